#pragma once

#include "utrack/box.hpp"
#include "utrack/tape.hpp"
#include "utrack/uld.hpp"

namespace utrack {

struct LossWeights {
    double alpha = 2.0;  // overlap term
    double beta = 5.0;   // coordinate term
    double gamma = 2.0;  // uncertainty term
};

// Complete-IoU: 1 - IoU + center-distance/enclosing-diagonal + aspect term.
// The aspect weight is held constant during differentiation. A predicted box
// with inverted corners is clamped to zero extent. Zero-area ground truth is
// a domain error.
double ciou_loss(const BoundingBox& b, const BoundingBox& gt);
Var ciou_loss(Tape& t, const BoxVars& b, const BoundingBox& gt);

// Mean absolute corner difference, divided by `norm` (the search side when
// coordinates are in pixels).
double l1_loss(const BoundingBox& b, const BoundingBox& gt, double norm = 1.0);
Var l1_loss(Tape& t, const BoxVars& b, const BoundingBox& gt, double norm = 1.0);

// alpha * ciou + beta * l1 + gamma * uncertainty. `norm` scales the l1 and
// uncertainty coordinates into normalized units.
double stage1_loss(const CornerPrediction& pred, const BoundingBox& gt, const LossWeights& w,
                   double norm = 1.0);
Var stage1_loss(Tape& t, const CornerVars& pred, const BoundingBox& gt, const LossWeights& w,
                double norm = 1.0);

}  // namespace utrack
