#include "utrack/reports.hpp"

#include <cstdio>
#include <fstream>

#include "utrack/error.hpp"

namespace utrack {

double TrackRun::mean_iou() const {
    if (iou_gt.empty()) return 0.0;
    double acc = 0.0;
    for (double v : iou_gt) acc += v;
    return acc / static_cast<double>(iou_gt.size());
}

double TrackRun::acceptance_rate() const {
    if (rows.size() <= 1) return 1.0;
    std::size_t accepted = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) accepted += rows[i].accepted ? 1 : 0;
    return static_cast<double>(accepted) / static_cast<double>(rows.size() - 1);
}

TrackRun track_sequence(const SyntheticSequence& seq, const RunConfig& cfg,
                        const ParamStore& params, const TrackerHooks* hooks) {
    if (seq.length() == 0) throw InputError("track_sequence: empty sequence");
    TrackRun run;
    TrackerState state = tracker_init(seq.frames[0], seq.gt[0], cfg, params);

    FrameReport first;
    first.frame = 0;
    first.box = seq.gt[0];
    first.confidence = 1.0;
    first.accepted = true;
    first.resampled = true;
    run.rows.push_back(first);
    run.iou_gt.push_back(1.0);
    run.events.push_back(seq.events[0]);

    for (std::size_t f = 1; f < seq.length(); ++f) {
        auto [next, report] = tracker_step(state, seq.frames[f], static_cast<long>(f), cfg,
                                           params, hooks);
        state = std::move(next);
        run.rows.push_back(report);
        run.iou_gt.push_back(iou(report.box, seq.gt[f]));
        run.events.push_back(seq.events[f]);
    }
    return run;
}

void write_track_csv(const TrackRun& run, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw InputError("write_track_csv: cannot write '" + path + "'");
    f << "frame,x_tl,y_tl,x_br,y_br,sigma_xtl,sigma_ytl,sigma_xbr,sigma_ybr,"
         "confidence,accepted,resampled,event_tag,iou_gt\n";
    char line[512];
    for (std::size_t i = 0; i < run.rows.size(); ++i) {
        const FrameReport& r = run.rows[i];
        std::snprintf(line, sizeof(line),
                      "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%s,%.17g\n",
                      r.frame, r.box.x_tl, r.box.y_tl, r.box.x_br, r.box.y_br, r.sigma[0],
                      r.sigma[1], r.sigma[2], r.sigma[3], r.confidence, r.accepted ? 1 : 0,
                      r.resampled ? 1 : 0, to_string(run.events[i]), run.iou_gt[i]);
        f << line;
    }
    if (!f) throw InputError("write_track_csv: write failed for '" + path + "'");
}

namespace {

nlohmann::ordered_json sigma_by_event(const TrackRun& run) {
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 1; i < run.rows.size(); ++i) {
        double s = 0.0;
        for (double v : run.rows[i].sigma) s += v;
        auto& slot = acc[to_string(run.events[i])];
        slot.first += s / 4.0;
        slot.second += 1;
    }
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& [tag, slot] : acc) {
        out[tag] = slot.first / static_cast<double>(slot.second);
    }
    return out;
}

}  // namespace

nlohmann::ordered_json track_summary(const TrackRun& run) {
    nlohmann::ordered_json j;
    j["frames"] = run.rows.size();
    j["mean_iou"] = run.mean_iou();
    j["acceptance_rate"] = run.acceptance_rate();
    j["sigma_by_event"] = sigma_by_event(run);
    return j;
}

std::vector<SyntheticSequence> make_eval_corpus(const RunConfig& cfg, std::size_t count,
                                                std::uint64_t seed) {
    if (count == 0) throw InputError("make_eval_corpus: empty corpus requested");
    Rng rng(seed);
    std::vector<SyntheticSequence> corpus;
    for (std::size_t i = 0; i < count; ++i) {
        SequenceSpec spec;
        spec.length = cfg.synth_length;
        spec.frame_size = cfg.synth_frame;
        spec.target_min = cfg.synth_target_min;
        spec.target_max = cfg.synth_target_max;
        // One heavy occlusion span in the middle; plenty of frames afterwards
        // so recovery behavior dominates the score.
        const std::size_t span = std::max<std::size_t>(6, cfg.synth_length / 5);
        const std::size_t begin = cfg.synth_length / 3;
        spec.events.push_back({begin, begin + span - 1, EventTag::kOccluded});
        corpus.push_back(gen_synthetic(spec, rng.raw()));
    }
    return corpus;
}

namespace {

nlohmann::ordered_json run_variant(const std::vector<SyntheticSequence>& corpus, RunConfig cfg,
                                   const ParamStore& params, bool uld_on, bool pmn_on) {
    cfg.uld_enabled = uld_on;
    cfg.pmn_enabled = pmn_on;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    double iou_weighted = 0.0, accept_acc = 0.0;
    std::size_t frames_total = 0;
    std::map<std::string, std::pair<double, std::size_t>> sig_acc;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const TrackRun run = track_sequence(corpus[i], cfg, params);
        nlohmann::ordered_json row;
        row["sequence"] = i;
        row["frames"] = run.rows.size();
        row["mean_iou"] = run.mean_iou();
        row["acceptance_rate"] = run.acceptance_rate();
        rows.push_back(row);
        iou_weighted += run.mean_iou() * static_cast<double>(run.rows.size());
        frames_total += run.rows.size();
        accept_acc += run.acceptance_rate();
        for (std::size_t r = 1; r < run.rows.size(); ++r) {
            double s = 0.0;
            for (double v : run.rows[r].sigma) s += v;
            auto& slot = sig_acc[to_string(run.events[r])];
            slot.first += s / 4.0;
            slot.second += 1;
        }
    }
    nlohmann::ordered_json out;
    out["uld"] = uld_on;
    out["pmn"] = pmn_on;
    out["mean_iou"] = iou_weighted / static_cast<double>(frames_total);
    out["acceptance_rate"] = accept_acc / static_cast<double>(corpus.size());
    nlohmann::ordered_json sig = nlohmann::ordered_json::object();
    for (const auto& [tag, slot] : sig_acc) sig[tag] = slot.first / static_cast<double>(slot.second);
    out["sigma_by_event"] = sig;
    out["per_sequence"] = rows;
    return out;
}

}  // namespace

nlohmann::ordered_json eval_corpus(const std::vector<SyntheticSequence>& corpus,
                                   const RunConfig& cfg, const ParamStore& params,
                                   bool all_variants) {
    if (corpus.empty()) throw InputError("eval_corpus: empty corpus");
    nlohmann::ordered_json variants = nlohmann::ordered_json::array();
    if (all_variants) {
        variants.push_back(run_variant(corpus, cfg, params, true, true));
        variants.push_back(run_variant(corpus, cfg, params, false, true));
        variants.push_back(run_variant(corpus, cfg, params, true, false));
        variants.push_back(run_variant(corpus, cfg, params, false, false));
    } else {
        variants.push_back(run_variant(corpus, cfg, params, cfg.uld_enabled, cfg.pmn_enabled));
    }
    nlohmann::ordered_json out;
    out["sequences"] = corpus.size();
    out["variants"] = variants;
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot write '" + path + "'");
    f << content;
    if (!f) throw InputError("write failed for '" + path + "'");
}

}  // namespace utrack
