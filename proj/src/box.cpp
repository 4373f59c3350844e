#include "utrack/box.hpp"

namespace utrack {

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.x_br, b.x_br) - std::max(a.x_tl, b.x_tl);
    const double ih = std::min(a.y_br, b.y_br) - std::max(a.y_tl, b.y_tl);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace utrack
