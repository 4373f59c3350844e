#pragma once

#include <algorithm>

#include "utrack/tape.hpp"

namespace utrack {

// Axis-aligned box in corner form, continuous pixel coordinates.
struct BoundingBox {
    double x_tl = 0.0, y_tl = 0.0, x_br = 0.0, y_br = 0.0;

    double width() const { return x_br - x_tl; }
    double height() const { return y_br - y_tl; }
    double cx() const { return 0.5 * (x_tl + x_br); }
    double cy() const { return 0.5 * (y_tl + y_br); }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

    static BoundingBox from_center(double cx, double cy, double w, double h) {
        return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    }

    // Reorders corners so the invariants x_tl <= x_br, y_tl <= y_br hold.
    BoundingBox normalized() const {
        return {std::min(x_tl, x_br), std::min(y_tl, y_br), std::max(x_tl, x_br),
                std::max(y_tl, y_br)};
    }

    BoundingBox translated(double dx, double dy) const {
        return {x_tl + dx, y_tl + dy, x_br + dx, y_br + dy};
    }
};

double iou(const BoundingBox& a, const BoundingBox& b);

// Corner coordinates recorded on a tape.
struct BoxVars {
    Var x_tl, y_tl, x_br, y_br;
};

}  // namespace utrack
