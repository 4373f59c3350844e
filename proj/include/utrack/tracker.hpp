#pragma once

#include <array>
#include <functional>
#include <optional>

#include "utrack/config.hpp"
#include "utrack/kalman.hpp"
#include "utrack/pmn.hpp"
#include "utrack/uld.hpp"

namespace utrack {

// Affine map between patch pixel centers and frame coordinates:
// frame = origin + scale * patch.
struct PatchMapping {
    double origin_x = 0.0, origin_y = 0.0, scale = 1.0;

    double to_frame_x(double px) const { return origin_x + scale * px; }
    double to_frame_y(double py) const { return origin_y + scale * py; }
    double to_patch_x(double fx) const { return (fx - origin_x) / scale; }
    double to_patch_y(double fy) const { return (fy - origin_y) / scale; }
    BoundingBox to_frame(const BoundingBox& b) const {
        return {to_frame_x(b.x_tl), to_frame_y(b.y_tl), to_frame_x(b.x_br), to_frame_y(b.y_br)};
    }
};

struct TrackerState {
    Array template_img;            // [3 x T x T], the last accepted crop
    long template_frame = 0;       // frame the template was sampled from
    PrototypeBank bank;
    KalmanState kalman;
    double search_scale = 1.0;     // 1 normally, 2 after a rejection
    long last_confident_frame = 0;

    explicit TrackerState(std::size_t bank_capacity) : bank(bank_capacity) {}
};

struct FrameReport {
    long frame = 0;
    BoundingBox box;               // frame coordinates
    std::array<double, 4> sigma{};
    double confidence = 0.0;
    bool accepted = false;
    bool resampled = false;        // template refreshed this frame
};

// Test seams: force the localization or the reliability score.
struct TrackerHooks {
    std::function<BoundingBox(long frame)> box_override;  // frame coordinates
    std::optional<double> confidence_override;
};

// Square crop centered at (cx, cy) with the given side, bilinearly resampled
// to out_size x out_size; regions outside the frame read as zero.
Array crop_resize(const Array& frame, double cx, double cy, double side, std::size_t out_size);
PatchMapping crop_mapping(double cx, double cy, double side, std::size_t out_size);

// Crop around the current motion estimate. The side is
// base_context * max(w, h) * search_scale, the center clamped into frame
// bounds.
std::pair<Array, PatchMapping> crop_search(const Array& frame, const TrackerState& state,
                                           const RunConfig& cfg);

TrackerState tracker_init(const Array& frame, const BoundingBox& box, const RunConfig& cfg,
                          const ParamStore& params);

std::pair<TrackerState, FrameReport> tracker_step(const TrackerState& state, const Array& frame,
                                                  long frame_index, const RunConfig& cfg,
                                                  const ParamStore& params,
                                                  const TrackerHooks* hooks = nullptr);

}  // namespace utrack
