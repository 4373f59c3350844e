#pragma once

#include <array>
#include <utility>

#include "utrack/box.hpp"
#include "utrack/param_store.hpp"
#include "utrack/tape.hpp"

namespace utrack {

// Decoder heads over the encoded search features: a 2-channel corner
// probability map (each channel a distribution over the grid) and a
// 4-channel sigma map, strictly positive via softplus plus a floor.
struct HeadOutputs {
    Var prob_map;  // [2 x H x W]
    Var unc_map;   // [4 x H x W], sigma per coordinate (x_tl, y_tl, x_br, y_br)
    Var unc_norm;  // sigma / (1 + sigma), in (0, 1) -- the bounded view
    std::size_t grid_h = 0, grid_w = 0;
};

// Prediction snapshot with plain values, used for reports and plain losses.
struct CornerPrediction {
    BoundingBox box;                 // search-image pixels
    std::array<double, 4> sigma{};   // per coordinate
    Array prob_map;                  // [2 x H x W]
    Array unc_map;                   // [4 x H x W]
};

// Box and sigma nodes extracted from the heads, all in heat-grid units.
struct CornerVars {
    BoxVars box;
    std::array<Var, 4> sigma;
};

inline constexpr double kSigmaFloor = 1e-3;

void init_uld_params(ParamStore& store, std::size_t channels, std::size_t head_width, Rng& rng);

HeadOutputs decode_heads(Tape& t, Var search_feat, ParamVars& params, std::size_t head_width);

// Expectation of the grid coordinates under a normalized heatmap. Returns
// (x, y): x runs along columns, y along rows, both in grid units.
std::pair<double, double> soft_argmax(const Array& channel);
std::pair<Var, Var> soft_argmax(Tape& t, Var channel);

// Sigma read-out at the two predicted corners: channels 0,1 sampled at the
// top-left corner, channels 2,3 at the bottom-right, bilinear at the
// continuous location. Out-of-grid corners clamp to the border and warn.
std::array<double, 4> read_sigma(const Array& unc_map, std::pair<double, double> top_left,
                                 std::pair<double, double> bottom_right);

// Soft-argmax of both prob channels plus sigma samples at those corners.
CornerVars extract_corners(Tape& t, const HeadOutputs& heads);

// Gaussian negative log likelihood per coordinate, averaged over the four
// corner coordinates: (mu - gt)^2 / (2 sigma^2) + log(sigma^2) / 2.
double uncertainty_loss(const std::array<double, 4>& mu, const std::array<double, 4>& sigma,
                        const std::array<double, 4>& mu_gt);

// Same with the constant log(2 pi)/2 retained per coordinate.
double uncertainty_loss_full(const std::array<double, 4>& mu, const std::array<double, 4>& sigma,
                             const std::array<double, 4>& mu_gt);

Var uncertainty_loss(Tape& t, const std::array<Var, 4>& mu, const std::array<Var, 4>& sigma,
                     const std::array<double, 4>& mu_gt);

}  // namespace utrack
