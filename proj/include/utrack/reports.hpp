#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "utrack/config.hpp"
#include "utrack/synth.hpp"
#include "utrack/tracker.hpp"

namespace utrack {

// One tracked sequence: the per-frame reports (row 0 records the
// initialization), overlap against ground truth and the frame tags.
struct TrackRun {
    std::vector<FrameReport> rows;
    std::vector<double> iou_gt;
    std::vector<EventTag> events;

    double mean_iou() const;
    double acceptance_rate() const;  // frames after the first
};

TrackRun track_sequence(const SyntheticSequence& seq, const RunConfig& cfg,
                        const ParamStore& params, const TrackerHooks* hooks = nullptr);

// Column order is fixed: frame, x_tl, y_tl, x_br, y_br, sigma_xtl,
// sigma_ytl, sigma_xbr, sigma_ybr, confidence, accepted, resampled,
// event_tag, iou_gt.
void write_track_csv(const TrackRun& run, const std::string& path);

nlohmann::ordered_json track_summary(const TrackRun& run);

// Evaluation corpus: constant-velocity sequences with one scripted mid-run
// occlusion span each.
std::vector<SyntheticSequence> make_eval_corpus(const RunConfig& cfg, std::size_t count,
                                                std::uint64_t seed);

// Per-variant metrics over a corpus. With all_variants, the four rows of the
// {uncertainty on/off} x {memory on/off} grid are produced; otherwise only
// the configured variant.
nlohmann::ordered_json eval_corpus(const std::vector<SyntheticSequence>& corpus,
                                   const RunConfig& cfg, const ParamStore& params,
                                   bool all_variants);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace utrack
