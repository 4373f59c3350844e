#pragma once

#include <array>
#include <optional>

#include "utrack/array.hpp"
#include "utrack/box.hpp"

namespace utrack {

struct KalmanConfig {
    double process_pos = 1.0;     // process noise on (cx, cy, w, h)
    double process_vel = 0.25;    // process noise on the velocities
    double measurement = 4.0;     // measurement noise on (cx, cy, w, h)
    double init_pos = 10.0;       // initial variance, position block
    double init_vel = 100.0;      // initial variance, velocity block
};

// Constant-velocity state over (cx, cy, w, h): mean [8], covariance [8 x 8].
struct KalmanState {
    Array mean;
    Array covariance;
};

KalmanState kalman_init(const BoundingBox& box, const KalmanConfig& cfg);

// Predict with unit time step, then, when an observation (cx, cy, w, h) is
// given, the standard measurement update in Joseph form. The covariance is
// re-symmetrized; width/height means are clamped at zero.
KalmanState kalman_step(const KalmanState& state,
                        const std::optional<std::array<double, 4>>& observation,
                        const KalmanConfig& cfg);

BoundingBox kalman_box(const KalmanState& state);
std::array<double, 4> box_to_cxcywh(const BoundingBox& box);

// Diagnostics used by the state-consistency checks.
double max_symmetry_error(const Array& m);
double min_symmetric_eigenvalue(const Array& m);  // Jacobi sweeps

}  // namespace utrack
