#include "utrack/tracker.hpp"

#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/encoder.hpp"
#include "utrack/error.hpp"
#include "utrack/ops.hpp"

namespace utrack {

namespace {

constexpr double kMinCropSide = 8.0;
constexpr double kMinTemplateSide = 4.0;

double sample_zero_pad(const Array& frame, std::size_t channel, double x, double y) {
    const long h = static_cast<long>(frame.extent(1));
    const long w = static_cast<long>(frame.extent(2));
    const long x0 = static_cast<long>(std::floor(x));
    const long y0 = static_cast<long>(std::floor(y));
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    auto value_at = [&](long yy, long xx) -> double {
        if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
        return frame.at(channel, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    };
    return (1 - fy) * ((1 - fx) * value_at(y0, x0) + fx * value_at(y0, x0 + 1)) +
           fy * ((1 - fx) * value_at(y0 + 1, x0) + fx * value_at(y0 + 1, x0 + 1));
}

}  // namespace

PatchMapping crop_mapping(double cx, double cy, double side, std::size_t out_size) {
    PatchMapping m;
    m.scale = side / static_cast<double>(out_size);
    m.origin_x = cx - side / 2.0 + 0.5 * m.scale;
    m.origin_y = cy - side / 2.0 + 0.5 * m.scale;
    return m;
}

Array crop_resize(const Array& frame, double cx, double cy, double side, std::size_t out_size) {
    if (frame.rank() != 3 || frame.extent(0) != 3) {
        throw ShapeError("crop_resize: expects [3 x H x W], got " + frame.shape_str());
    }
    const PatchMapping m = crop_mapping(cx, cy, side, out_size);
    Array out({3, out_size, out_size});
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t v = 0; v < out_size; ++v) {
            const double fy = m.to_frame_y(static_cast<double>(v));
            for (std::size_t u = 0; u < out_size; ++u) {
                out.at(c, v, u) = sample_zero_pad(frame, c, m.to_frame_x(static_cast<double>(u)), fy);
            }
        }
    }
    return out;
}

std::pair<Array, PatchMapping> crop_search(const Array& frame, const TrackerState& state,
                                           const RunConfig& cfg) {
    const KalmanState& k = state.kalman;
    const double w = static_cast<double>(frame.extent(2));
    const double h = static_cast<double>(frame.extent(1));
    const double cx = std::clamp(k.mean[0], 0.0, w - 1.0);
    const double cy = std::clamp(k.mean[1], 0.0, h - 1.0);
    const double side =
        std::max(kMinCropSide, cfg.base_context * std::max(k.mean[2], k.mean[3]) * state.search_scale);
    const std::size_t out = cfg.encoder.search_size;
    return {crop_resize(frame, cx, cy, side, out), crop_mapping(cx, cy, side, out)};
}

namespace {

struct PipelineResult {
    BoundingBox box_patch;  // search-patch pixels, corner-ordered
    std::array<double, 4> sigma{};
    double confidence = 0.0;
    Array p_star;
};

void check_finite(const Array& a, long frame_index, const char* stage) {
    if (!a.all_finite()) {
        throw NumericError("tracker step frame " + std::to_string(frame_index) +
                           ": non-finite value after " + stage);
    }
}

// Full per-frame forward pass: encode, decode the corner heads, run the
// memory network. When mask_box_patch is given (first frame), the foreground
// mask comes from it instead of the prediction.
PipelineResult run_pipeline(const Array& template_img, const Array& search_patch,
                            const PrototypeBank& bank, const RunConfig& cfg,
                            const ParamStore& params, long frame_index,
                            const BoundingBox* mask_box_patch) {
    Tape t;
    ParamVars p(t, params);
    Var vt = t.leaf(template_img);
    Var vs = t.leaf(search_patch);

    EncodedPair enc = encode(t, vt, vs, cfg.encoder, p);
    check_finite(t.value(enc.search_feat), frame_index, "encode");

    HeadOutputs heads = decode_heads(t, enc.search_feat, p, cfg.uld_head_width);
    check_finite(t.value(heads.prob_map), frame_index, "decode");
    CornerVars corners = extract_corners(t, heads);

    const double stride =
        static_cast<double>(cfg.encoder.search_size) / static_cast<double>(heads.grid_h);
    auto grid_to_px = [&](double g) { return (g + 0.5) * stride - 0.5; };

    PipelineResult out;
    const BoundingBox raw{t.scalar(corners.box.x_tl), t.scalar(corners.box.y_tl),
                          t.scalar(corners.box.x_br), t.scalar(corners.box.y_br)};
    const BoundingBox grid_box = raw.normalized();
    out.box_patch = {grid_to_px(grid_box.x_tl), grid_to_px(grid_box.y_tl),
                     grid_to_px(grid_box.x_br), grid_to_px(grid_box.y_br)};
    for (std::size_t i = 0; i < 4; ++i) {
        out.sigma[i] = cfg.uld_enabled ? t.scalar(corners.sigma[i]) : 1.0;
    }

    // Memory network input: bounded uncertainty view, or a flat 0.5 map when
    // the uncertainty branch is disabled.
    Var unc_norm = heads.unc_norm;
    if (!cfg.uld_enabled) {
        unc_norm = t.leaf(Array({4, heads.grid_h, heads.grid_w}, 0.5));
    }
    Var certainty = confidence_inversion(t, unc_norm, p);
    Var fs_up = ad::bilinear_upsample(t, enc.search_feat, 2);
    Var fused = fuse_features(t, certainty, fs_up, p);

    BoundingBox mask_box = grid_box;
    if (mask_box_patch) {
        auto px_to_grid = [&](double px) { return (px + 0.5) / stride - 0.5; };
        mask_box = {px_to_grid(mask_box_patch->x_tl), px_to_grid(mask_box_patch->y_tl),
                    px_to_grid(mask_box_patch->x_br), px_to_grid(mask_box_patch->y_br)};
    }
    const TargetMask mask = make_target_mask(mask_box, heads.grid_h, heads.grid_w);

    Var proto = extract_prototype(t, enc.template_feat);
    Var p_star = reweight_prototype(t, proto, fused, mask);
    check_finite(t.value(p_star), frame_index, "memory network");

    Var aggregated = p_star;
    if (!bank.empty()) {
        aggregated = memory_read(t, p_star, bank, cfg.pmn_topk, p, cfg.pmn_value_from_group)
                         .aggregated;
    }
    Var score = confidence_score(t, aggregated, p);
    out.confidence = t.scalar(score);
    if (!std::isfinite(out.confidence)) {
        throw NumericError("tracker step frame " + std::to_string(frame_index) +
                           ": non-finite value after reliability score");
    }
    out.p_star = t.value(p_star);
    return out;
}

Array crop_template(const Array& frame, const BoundingBox& box, const RunConfig& cfg) {
    const double side = std::max(kMinTemplateSide,
                                 cfg.template_context * std::max(box.width(), box.height()));
    return crop_resize(frame, box.cx(), box.cy(), side, cfg.encoder.template_size);
}

}  // namespace

TrackerState tracker_init(const Array& frame, const BoundingBox& box, const RunConfig& cfg,
                          const ParamStore& params) {
    cfg.validate();
    const BoundingBox b = box.normalized();
    const double w = static_cast<double>(frame.extent(2));
    const double h = static_cast<double>(frame.extent(1));
    if (b.x_tl < 0.0 || b.y_tl < 0.0 || b.x_br > w - 1.0 || b.y_br > h - 1.0 || b.area() <= 0.0) {
        throw InputError("tracker_init: box outside the frame or degenerate");
    }

    TrackerState state(cfg.pmn_capacity);
    state.template_img = crop_template(frame, b, cfg);
    state.template_frame = 0;
    state.kalman = kalman_init(b, cfg.kalman);
    state.search_scale = 1.0;
    state.last_confident_frame = 0;

    // Seed the bank with the first frame's prototype, mask from the given
    // box; the initial annotation is trusted unconditionally.
    const double side = std::max(kMinCropSide, cfg.base_context * std::max(b.width(), b.height()));
    const Array patch = crop_resize(frame, b.cx(), b.cy(), side, cfg.encoder.search_size);
    const PatchMapping mapping = crop_mapping(b.cx(), b.cy(), side, cfg.encoder.search_size);
    const BoundingBox box_patch{mapping.to_patch_x(b.x_tl), mapping.to_patch_y(b.y_tl),
                                mapping.to_patch_x(b.x_br), mapping.to_patch_y(b.y_br)};
    PipelineResult r = run_pipeline(state.template_img, patch, state.bank, cfg, params, 0,
                                    &box_patch);
    state.bank.insert(Prototype{std::move(r.p_star), 0, 1.0});
    return state;
}

std::pair<TrackerState, FrameReport> tracker_step(const TrackerState& state, const Array& frame,
                                                  long frame_index, const RunConfig& cfg,
                                                  const ParamStore& params,
                                                  const TrackerHooks* hooks) {
    auto [patch, mapping] = crop_search(frame, state, cfg);
    PipelineResult r =
        run_pipeline(state.template_img, patch, state.bank, cfg, params, frame_index, nullptr);

    BoundingBox box_frame = mapping.to_frame(r.box_patch);
    if (hooks && hooks->box_override) box_frame = hooks->box_override(frame_index).normalized();

    double confidence = r.confidence;
    if (!cfg.pmn_enabled) confidence = 1.0;
    if (hooks && hooks->confidence_override) confidence = *hooks->confidence_override;

    const bool accepted = confidence > cfg.pmn_threshold;

    TrackerState next = state;
    FrameReport report;
    report.frame = frame_index;
    report.box = box_frame;
    report.sigma = r.sigma;
    report.confidence = confidence;
    report.accepted = accepted;

    if (accepted) {
        next.kalman = kalman_step(state.kalman, box_to_cxcywh(box_frame), cfg.kalman);
        next.bank = memory_update(state.bank, Prototype{std::move(r.p_star), frame_index, confidence},
                                  confidence, cfg.pmn_threshold);
        next.template_img = crop_template(frame, box_frame, cfg);
        next.template_frame = frame_index;
        next.search_scale = 1.0;
        next.last_confident_frame = frame_index;
        report.resampled = true;
    } else {
        // Predict-only step; the template stays the last accepted crop.
        next.kalman = kalman_step(state.kalman, std::nullopt, cfg.kalman);
        next.search_scale = 2.0;
        report.resampled = false;
    }
    return {std::move(next), report};
}

}  // namespace utrack
