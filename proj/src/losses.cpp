#include "utrack/losses.hpp"

#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/error.hpp"

namespace utrack {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_gt(const BoundingBox& gt) {
    if (gt.width() <= 0.0 || gt.height() <= 0.0) {
        throw DomainError("ciou_loss: ground-truth box has no area");
    }
}

}  // namespace

double ciou_loss(const BoundingBox& b, const BoundingBox& gt) {
    check_gt(gt);
    const double w = std::max(b.width(), 0.0);
    const double h = std::max(b.height(), 0.0);

    const double iw = std::max(0.0, std::min(b.x_br, gt.x_br) - std::max(b.x_tl, gt.x_tl));
    const double ih = std::max(0.0, std::min(b.y_br, gt.y_br) - std::max(b.y_tl, gt.y_tl));
    const double inter = iw * ih;
    const double uni = w * h + gt.area() - inter;
    const double iou = inter / uni;

    const double rho2 = (b.cx() - gt.cx()) * (b.cx() - gt.cx()) +
                        (b.cy() - gt.cy()) * (b.cy() - gt.cy());
    const double ew = std::max(b.x_br, gt.x_br) - std::min(b.x_tl, gt.x_tl);
    const double eh = std::max(b.y_br, gt.y_br) - std::min(b.y_tl, gt.y_tl);
    const double c2 = ew * ew + eh * eh;

    const double da = std::atan2(gt.width(), gt.height()) - std::atan2(w, h);
    const double v = 4.0 / (kPi * kPi) * da * da;
    const double alpha_v = v > 0.0 ? v / ((1.0 - iou) + v) : 0.0;

    return 1.0 - iou + rho2 / c2 + alpha_v * v;
}

Var ciou_loss(Tape& t, const BoxVars& b, const BoundingBox& gt) {
    check_gt(gt);
    Var zero = t.leaf(0.0);
    auto c = [&](double v) { return t.leaf(v); };

    Var w = ad::max_ew(t, ad::sub(t, b.x_br, b.x_tl), zero);
    Var h = ad::max_ew(t, ad::sub(t, b.y_br, b.y_tl), zero);

    Var iw = ad::max_ew(t, ad::sub(t, ad::min_ew(t, b.x_br, c(gt.x_br)),
                                   ad::max_ew(t, b.x_tl, c(gt.x_tl))),
                        zero);
    Var ih = ad::max_ew(t, ad::sub(t, ad::min_ew(t, b.y_br, c(gt.y_br)),
                                   ad::max_ew(t, b.y_tl, c(gt.y_tl))),
                        zero);
    Var inter = ad::mul(t, iw, ih);
    Var uni = ad::sub(t, ad::add_scalar(t, ad::mul(t, w, h), gt.area()), inter);
    Var iou_v = ad::div_ew(t, inter, uni);

    Var dcx = ad::sub(t, ad::mul_scalar(t, ad::add(t, b.x_tl, b.x_br), 0.5), c(gt.cx()));
    Var dcy = ad::sub(t, ad::mul_scalar(t, ad::add(t, b.y_tl, b.y_br), 0.5), c(gt.cy()));
    Var rho2 = ad::add(t, ad::square(t, dcx), ad::square(t, dcy));
    Var ew = ad::sub(t, ad::max_ew(t, b.x_br, c(gt.x_br)), ad::min_ew(t, b.x_tl, c(gt.x_tl)));
    Var eh = ad::sub(t, ad::max_ew(t, b.y_br, c(gt.y_br)), ad::min_ew(t, b.y_tl, c(gt.y_tl)));
    Var c2 = ad::add(t, ad::square(t, ew), ad::square(t, eh));

    Var da = ad::sub(t, c(std::atan2(gt.width(), gt.height())), ad::atan2_ew(t, w, h));
    Var v = ad::mul_scalar(t, ad::square(t, da), 4.0 / (kPi * kPi));

    // Aspect weight treated as a constant of the current values.
    const double v_val = t.scalar(v);
    const double alpha_v = v_val > 0.0 ? v_val / ((1.0 - t.scalar(iou_v)) + v_val) : 0.0;

    Var loss = ad::add_scalar(t, ad::mul_scalar(t, iou_v, -1.0), 1.0);
    loss = ad::add(t, loss, ad::div_ew(t, rho2, c2));
    loss = ad::add(t, loss, ad::mul_scalar(t, v, alpha_v));
    return loss;
}

double l1_loss(const BoundingBox& b, const BoundingBox& gt, double norm) {
    const double acc = std::abs(b.x_tl - gt.x_tl) + std::abs(b.y_tl - gt.y_tl) +
                       std::abs(b.x_br - gt.x_br) + std::abs(b.y_br - gt.y_br);
    return acc / (4.0 * norm);
}

Var l1_loss(Tape& t, const BoxVars& b, const BoundingBox& gt, double norm) {
    Var acc = ad::abs_ew(t, ad::add_scalar(t, b.x_tl, -gt.x_tl));
    acc = ad::add(t, acc, ad::abs_ew(t, ad::add_scalar(t, b.y_tl, -gt.y_tl)));
    acc = ad::add(t, acc, ad::abs_ew(t, ad::add_scalar(t, b.x_br, -gt.x_br)));
    acc = ad::add(t, acc, ad::abs_ew(t, ad::add_scalar(t, b.y_br, -gt.y_br)));
    return ad::mul_scalar(t, acc, 1.0 / (4.0 * norm));
}

double stage1_loss(const CornerPrediction& pred, const BoundingBox& gt, const LossWeights& w,
                   double norm) {
    const std::array<double, 4> mu = {pred.box.x_tl / norm, pred.box.y_tl / norm,
                                      pred.box.x_br / norm, pred.box.y_br / norm};
    const std::array<double, 4> mu_gt = {gt.x_tl / norm, gt.y_tl / norm, gt.x_br / norm,
                                         gt.y_br / norm};
    return w.alpha * ciou_loss(pred.box, gt) + w.beta * l1_loss(pred.box, gt, norm) +
           w.gamma * uncertainty_loss(mu, pred.sigma, mu_gt);
}

Var stage1_loss(Tape& t, const CornerVars& pred, const BoundingBox& gt, const LossWeights& w,
                double norm) {
    const double inv = 1.0 / norm;
    const std::array<Var, 4> mu = {
        ad::mul_scalar(t, pred.box.x_tl, inv), ad::mul_scalar(t, pred.box.y_tl, inv),
        ad::mul_scalar(t, pred.box.x_br, inv), ad::mul_scalar(t, pred.box.y_br, inv)};
    const std::array<double, 4> mu_gt = {gt.x_tl * inv, gt.y_tl * inv, gt.x_br * inv,
                                         gt.y_br * inv};
    Var loss = ad::mul_scalar(t, ciou_loss(t, pred.box, gt), w.alpha);
    loss = ad::add(t, loss, ad::mul_scalar(t, l1_loss(t, pred.box, gt, norm), w.beta));
    loss = ad::add(t, loss, ad::mul_scalar(t, uncertainty_loss(t, mu, pred.sigma, mu_gt), w.gamma));
    return loss;
}

}  // namespace utrack
