// Command-line front end: synthetic data generation, two-stage training,
// tracking and evaluation runs, and a gradient self-check.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "utrack/ad.hpp"
#include "utrack/config.hpp"
#include "utrack/error.hpp"
#include "utrack/grad_check.hpp"
#include "utrack/reports.hpp"
#include "utrack/rng.hpp"
#include "utrack/synth.hpp"
#include "utrack/train.hpp"
#include "utrack/weights_io.hpp"

namespace {

using namespace utrack;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonOpts& opts) {
    RunConfig cfg = opts.config_path.empty() ? RunConfig{} : load_config(opts.config_path);
    for (const std::string& kv : opts.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* app, CommonOpts& opts) {
    app->add_option("--config", opts.config_path, "Config file (key = value lines)");
    app->add_option("--set", opts.overrides, "Override a config key, e.g. --set train.seed=3")
        ->take_all();
}

int cmd_synth(const CommonOpts& common, std::uint64_t seed, const std::string& events,
              const std::string& out_path) {
    const RunConfig cfg = resolve_config(common);
    SequenceSpec spec;
    spec.length = cfg.synth_length;
    spec.frame_size = cfg.synth_frame;
    spec.target_min = cfg.synth_target_min;
    spec.target_max = cfg.synth_target_max;
    if (!events.empty()) spec.events = parse_event_script(events);
    const SyntheticSequence seq = gen_synthetic(spec, seed);
    save_sequence(seq, out_path);
    std::printf("wrote %zu frames to %s\n", seq.length(), out_path.c_str());
    return 0;
}

int cmd_train_stage1(const CommonOpts& common, const std::string& out_path) {
    const RunConfig cfg = resolve_config(common);
    ParamStore params = init_all_params(cfg, cfg.seed);
    const auto corpus = make_training_corpus(cfg, cfg.seed + 101);
    const Stage1Log log = train_stage1(cfg, params, corpus);
    save_weights(params, out_path);
    std::printf("stage 1: %zu steps, probe loss %.6f -> %.6f%s\n", log.losses.size(),
                log.probe_before, log.probe_after, log.diverged ? " (diverged, kept last good)" : "");
    if (log.diverged) return 3;
    return 0;
}

int cmd_train_stage2(const CommonOpts& common, const std::string& weights_path,
                     const std::string& out_path) {
    const RunConfig cfg = resolve_config(common);
    ParamStore params = load_weights(weights_path);
    const auto corpus = make_training_corpus(cfg, cfg.seed + 101);
    const Stage2Log log = train_stage2(cfg, params, corpus);
    save_weights(params, out_path);
    std::printf("stage 2: %zu steps, held-out pair accuracy %.3f%s\n", log.losses.size(),
                log.holdout_accuracy, log.diverged ? " (diverged, kept last good)" : "");
    if (log.diverged) return 3;
    return 0;
}

int cmd_track(const CommonOpts& common, const std::string& weights_path,
              const std::string& seq_path, const std::string& csv_path,
              const std::string& json_path) {
    const RunConfig cfg = resolve_config(common);
    const ParamStore params = load_weights(weights_path);
    const SyntheticSequence seq = load_sequence(seq_path);
    const TrackRun run = track_sequence(seq, cfg, params);
    if (!csv_path.empty()) write_track_csv(run, csv_path);
    if (!json_path.empty()) write_text_file(json_path, track_summary(run).dump(2) + "\n");
    std::printf("tracked %zu frames: mean IoU %.4f, acceptance %.3f\n", run.rows.size(),
                run.mean_iou(), run.acceptance_rate());
    return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& weights_path, std::size_t num_seqs,
             std::uint64_t corpus_seed, bool all_variants, const std::string& out_path) {
    const RunConfig cfg = resolve_config(common);
    const ParamStore params = load_weights(weights_path);
    const auto corpus = make_eval_corpus(cfg, num_seqs, corpus_seed);
    const auto metrics = eval_corpus(corpus, cfg, params, all_variants);
    if (!out_path.empty()) write_text_file(out_path, metrics.dump(2) + "\n");
    for (const auto& v : metrics["variants"]) {
        std::printf("uld=%d pmn=%d  mean IoU %.4f  acceptance %.3f\n", v["uld"].get<bool>() ? 1 : 0,
                    v["pmn"].get<bool>() ? 1 : 0, v["mean_iou"].get<double>(),
                    v["acceptance_rate"].get<double>());
    }
    return 0;
}

int cmd_gradcheck() {
    Rng rng(42);
    auto random_array = [&](std::vector<std::size_t> shape) {
        Array a(shape);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-1.0, 1.0);
        return a;
    };
    struct Case {
        const char* name;
        ScalarFn fn;
        std::vector<Array> point;
    };
    std::vector<Case> cases;
    cases.push_back({"matmul", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t, ad::matmul(t, xs[0], xs[1]));
                     },
                     {random_array({3, 4}), random_array({4, 2})}});
    cases.push_back({"softmax", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t, ad::square(t, ad::masked_softmax(t, xs[0], 1)));
                     },
                     {random_array({3, 5})}});
    cases.push_back({"conv2d", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t, ad::conv2d(t, xs[0], xs[1], 1, 1));
                     },
                     {random_array({2, 5, 5}), random_array({3, 2, 3, 3})}});
    cases.push_back({"upsample+pool", [](Tape& t, const std::vector<Var>& xs) {
                         Var u = ad::bilinear_upsample(t, xs[0], 2);
                         return ad::sum(t, ad::square(t, ad::global_avg_pool(t, u)));
                     },
                     {random_array({2, 3, 3})}});
    cases.push_back({"layer_norm", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t, ad::square(t, ad::layer_norm(t, xs[0], xs[1], xs[2])));
                     },
                     {random_array({3, 6}), random_array({6}), random_array({6})}});
    int rc = 0;
    for (const Case& c : cases) {
        const GradCheckReport r = grad_check(c.fn, c.point);
        const bool ok = r.max_rel_error <= 1e-6;
        std::printf("%-16s max rel err %.3e  %s\n", c.name, r.max_rel_error, ok ? "ok" : "FAIL");
        if (!ok) rc = 1;
    }
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-aware corner tracker with a prototype memory"};
    app.require_subcommand(1);

    CommonOpts synth_common, s1_common, s2_common, track_common, eval_common;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic sequence file");
    std::uint64_t synth_seed = 1;
    std::string synth_events, synth_out = "sequence.useq";
    add_common(synth, synth_common);
    synth->add_option("--seed", synth_seed, "Sequence seed");
    synth->add_option("--events", synth_events, "Script, e.g. occluded:20-32,deformed:40-45");
    synth->add_option("--out", synth_out, "Output path")->required();

    auto* s1 = app.add_subcommand("train-stage1", "Train the encoder and localization decoder");
    std::string s1_out = "stage1.weights";
    add_common(s1, s1_common);
    s1->add_option("--out", s1_out, "Weights output path")->required();

    auto* s2 = app.add_subcommand("train-stage2", "Train the memory network (rest frozen)");
    std::string s2_weights, s2_out = "stage2.weights";
    add_common(s2, s2_common);
    s2->add_option("--weights", s2_weights, "Stage-1 weights")->required();
    s2->add_option("--out", s2_out, "Weights output path")->required();

    auto* track = app.add_subcommand("track", "Track a sequence and write reports");
    std::string track_weights, track_seq, track_csv, track_json;
    add_common(track, track_common);
    track->add_option("--weights", track_weights, "Weights file")->required();
    track->add_option("--seq", track_seq, "Sequence file from synth")->required();
    track->add_option("--out-csv", track_csv, "Per-frame CSV path");
    track->add_option("--out-json", track_json, "Summary JSON path");

    auto* eval = app.add_subcommand("eval", "Evaluate over a seeded corpus");
    std::string eval_weights, eval_out;
    std::size_t eval_n = 20;
    std::uint64_t eval_seed = 7;
    bool eval_all = false;
    add_common(eval, eval_common);
    eval->add_option("--weights", eval_weights, "Weights file")->required();
    eval->add_option("--num-seqs", eval_n, "Corpus size");
    eval->add_option("--corpus-seed", eval_seed, "Corpus seed");
    eval->add_flag("--all-variants", eval_all, "Run the 2x2 on/off grid");
    eval->add_option("--out", eval_out, "Metrics JSON path");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the primitives");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(synth_common, synth_seed, synth_events, synth_out);
        if (s1->parsed()) return cmd_train_stage1(s1_common, s1_out);
        if (s2->parsed()) return cmd_train_stage2(s2_common, s2_weights, s2_out);
        if (track->parsed()) {
            return cmd_track(track_common, track_weights, track_seq, track_csv, track_json);
        }
        if (eval->parsed()) {
            return cmd_eval(eval_common, eval_weights, eval_n, eval_seed, eval_all, eval_out);
        }
        if (gradcheck->parsed()) return cmd_gradcheck();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const InputError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical abort: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
