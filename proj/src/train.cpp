#include "utrack/train.hpp"

#include <algorithm>
#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/encoder.hpp"
#include "utrack/error.hpp"
#include "utrack/losses.hpp"
#include "utrack/pmn.hpp"
#include "utrack/tracker.hpp"
#include "utrack/uld.hpp"

namespace utrack {

namespace {

constexpr double kGradClipNorm = 10.0;

// Velocity-based and adaptive updates behind one interface; both walk the
// store in name order so runs are reproducible.
class Optimizer {
public:
    Optimizer(std::string kind, double momentum) : kind_(std::move(kind)), momentum_(momentum) {}

    void apply(ParamStore& params, const std::map<std::string, Array>& grads, double lr,
               const std::function<bool(const std::string&)>& trainable) {
        ++steps_;
        for (auto& [name, value] : params) {
            if (trainable && !trainable(name)) continue;
            auto g = grads.find(name);
            if (g == grads.end()) continue;
            if (kind_ == "adam") {
                adam_update(name, value, g->second, lr);
            } else {
                sgd_update(name, value, g->second, lr);
            }
        }
    }

private:
    void sgd_update(const std::string& name, Array& value, const Array& grad, double lr) {
        Array& v = slot(velocity_, name, value);
        for (std::size_t i = 0; i < value.size(); ++i) {
            v[i] = momentum_ * v[i] - lr * grad[i];
            value[i] += v[i];
        }
    }

    void adam_update(const std::string& name, Array& value, const Array& grad, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        Array& m = slot(m_, name, value);
        Array& v = slot(v_, name, value);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }

    static Array& slot(std::map<std::string, Array>& table, const std::string& name,
                       const Array& like) {
        auto it = table.find(name);
        if (it == table.end()) it = table.emplace(name, Array(like.shape())).first;
        return it->second;
    }

    std::string kind_;
    double momentum_;
    std::size_t steps_ = 0;
    std::map<std::string, Array> velocity_;
    std::map<std::string, Array> m_, v_;
};

void clip_gradients(std::map<std::string, Array>& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    }
    const double norm = std::sqrt(sq);
    if (norm <= kGradClipNorm || norm == 0.0) return;
    const double s = kGradClipNorm / norm;
    for (auto& [name, g] : grads) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
    }
}

bool grads_finite(const std::map<std::string, Array>& grads) {
    for (const auto& [name, g] : grads) {
        if (!g.all_finite()) return false;
    }
    return true;
}

std::vector<std::size_t> frames_with(const SyntheticSequence& seq, EventTag tag) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < seq.length(); ++i) {
        if (seq.events[i] == tag) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> trackable_frames(const SyntheticSequence& seq) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < seq.length(); ++i) {
        if (seq.events[i] != EventTag::kOutOfView) out.push_back(i);
    }
    return out;
}

}  // namespace

ParamStore init_all_params(const RunConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore store;
    Rng rng(seed);
    init_encoder_params(store, cfg.encoder, rng);
    init_uld_params(store, cfg.encoder.width, cfg.uld_head_width, rng);
    init_pmn_params(store, cfg.encoder.width, cfg.pmn_hidden, rng);
    return store;
}

std::vector<SyntheticSequence> make_training_corpus(const RunConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<SyntheticSequence> out;
    for (std::size_t i = 0; i < cfg.synth_train_sequences; ++i) {
        SequenceSpec spec;
        spec.length = cfg.synth_length;
        spec.frame_size = cfg.synth_frame;
        spec.target_min = cfg.synth_target_min;
        spec.target_max = cfg.synth_target_max;
        // Two thirds of the corpus carries one occlusion span; a sprinkle of
        // deformation keeps the box regression honest about scale changes.
        if (i % 3 != 2) {
            const std::size_t span = std::max<std::size_t>(6, cfg.synth_length / 4);
            const std::size_t begin =
                5 + rng.index(std::max<std::size_t>(1, cfg.synth_length - span - 10));
            spec.events.push_back({begin, begin + span - 1, EventTag::kOccluded});
        }
        if (i % 4 == 1) {
            const std::size_t begin = 2 + rng.index(3);
            spec.events.push_back({begin, begin + 4, EventTag::kDeformed});
        }
        out.push_back(gen_synthetic(spec, rng.raw()));
    }
    return out;
}

TrainSample sample_stage1(const std::vector<SyntheticSequence>& data, const RunConfig& cfg,
                          Rng& rng, bool corrupt_occluded) {
    const SyntheticSequence& seq = data[rng.index(data.size())];
    const auto usable = trackable_frames(seq);
    const std::size_t f = usable[rng.index(usable.size())];

    auto clean = frames_with(seq, EventTag::kClean);
    if (clean.empty()) clean = usable;
    const std::size_t tf = clean[rng.index(clean.size())];

    const double fsize = static_cast<double>(seq.frames[f].extent(1));

    const BoundingBox& tb = seq.gt[tf];
    const double tside = std::max(4.0, cfg.template_context * std::max(tb.width(), tb.height()));
    const double tjit = 0.05 * tside;
    TrainSample s;
    s.tag = seq.events[f];
    s.template_img = crop_resize(seq.frames[tf], tb.cx() + rng.uniform(-tjit, tjit),
                                 tb.cy() + rng.uniform(-tjit, tjit), tside,
                                 cfg.encoder.template_size);

    const BoundingBox& gb = seq.gt[f];
    const double base = std::max(8.0, cfg.base_context * std::max(gb.width(), gb.height()));
    const double side = base * rng.uniform(0.8, 1.2);
    const double jit = 0.22 * side;
    const double cx = std::clamp(gb.cx() + rng.uniform(-jit, jit), 0.0, fsize - 1.0);
    const double cy = std::clamp(gb.cy() + rng.uniform(-jit, jit), 0.0, fsize - 1.0);
    s.search_patch = crop_resize(seq.frames[f], cx, cy, side, cfg.encoder.search_size);

    const PatchMapping m = crop_mapping(cx, cy, side, cfg.encoder.search_size);
    BoundingBox target{m.to_patch_x(gb.x_tl), m.to_patch_y(gb.y_tl), m.to_patch_x(gb.x_br),
                       m.to_patch_y(gb.y_br)};

    if (corrupt_occluded && s.tag == EventTag::kOccluded) {
        // Noisy supervision: jitter the center and log-scale the extents.
        const double c = cfg.corrupt_px;
        const double ncx = target.cx() + rng.uniform(-c, c);
        const double ncy = target.cy() + rng.uniform(-c, c);
        const double nw = std::max(1.0, target.width() * std::exp(rng.uniform(-0.25, 0.25)));
        const double nh = std::max(1.0, target.height() * std::exp(rng.uniform(-0.25, 0.25)));
        target = BoundingBox::from_center(ncx, ncy, nw, nh);
    }
    s.target = target;
    return s;
}

double stage1_batch_loss(const RunConfig& cfg, const ParamStore& params,
                         const std::vector<TrainSample>& batch,
                         std::map<std::string, Array>* grads) {
    Tape t;
    ParamVars p(t, params);
    Var total{};
    for (const TrainSample& s : batch) {
        Var vt = t.leaf(s.template_img);
        Var vs = t.leaf(s.search_patch);
        EncodedPair enc = encode(t, vt, vs, cfg.encoder, p);
        HeadOutputs heads = decode_heads(t, enc.search_feat, p, cfg.uld_head_width);
        CornerVars corners = extract_corners(t, heads);

        const double stride =
            static_cast<double>(cfg.encoder.search_size) / static_cast<double>(heads.grid_h);
        auto to_px = [&](Var g) {
            return ad::add_scalar(t, ad::mul_scalar(t, g, stride), 0.5 * stride - 0.5);
        };
        CornerVars px;
        px.box = BoxVars{to_px(corners.box.x_tl), to_px(corners.box.y_tl), to_px(corners.box.x_br),
                         to_px(corners.box.y_br)};
        px.sigma = corners.sigma;

        Var loss = stage1_loss(t, px, s.target, cfg.loss,
                               static_cast<double>(cfg.encoder.search_size));
        total = total.valid() ? ad::add(t, total, loss) : loss;
    }
    total = ad::mul_scalar(t, total, 1.0 / static_cast<double>(batch.size()));
    const double value = t.scalar(total);
    if (grads) {
        const Gradients adj = t.backward(total);
        grads->clear();
        for (const auto& [name, var] : p.bound()) {
            (*grads)[name] = adj[static_cast<std::size_t>(var.id)];
        }
    }
    return value;
}

Stage1Log train_stage1(const RunConfig& cfg, ParamStore& params,
                       const std::vector<SyntheticSequence>& data) {
    if (data.empty()) throw InputError("train_stage1: empty corpus");
    Stage1Log log;
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 1);
    Rng probe_rng = rng.fork(7);

    std::vector<TrainSample> probe;
    for (std::size_t i = 0; i < std::max<std::size_t>(cfg.stage1_batch, 8); ++i) {
        probe.push_back(sample_stage1(data, cfg, probe_rng));
    }
    log.probe_before = stage1_batch_loss(cfg, params, probe, nullptr);
    log.probe_after = log.probe_before;
    if (cfg.stage1_steps == 0) return log;

    Optimizer opt(cfg.optimizer, cfg.momentum);
    ParamStore checkpoint = params;
    std::map<std::string, Array> grads;
    for (std::size_t step = 0; step < cfg.stage1_steps; ++step) {
        std::vector<TrainSample> batch;
        for (std::size_t i = 0; i < cfg.stage1_batch; ++i) {
            batch.push_back(sample_stage1(data, cfg, rng));
        }
        const double loss = stage1_batch_loss(cfg, params, batch, &grads);
        if (!std::isfinite(loss) || !grads_finite(grads)) {
            params = checkpoint;
            log.diverged = true;
            break;
        }
        checkpoint = params;
        log.losses.push_back(loss);
        clip_gradients(grads);
        opt.apply(params, grads, cfg.stage1_lr, nullptr);
    }
    log.probe_after = stage1_batch_loss(cfg, params, probe, nullptr);
    return log;
}

Stage2Sampler::Stage2Sampler(const std::vector<SyntheticSequence>& data, std::uint64_t seed)
    : data_(&data), rng_(seed) {
    if (data.size() < 2) throw InputError("stage 2 needs at least two sequences");
    for (const SyntheticSequence& seq : data) {
        auto clean = frames_with(seq, EventTag::kClean);
        if (clean.empty()) clean = trackable_frames(seq);
        clean_frames_.push_back(std::move(clean));
    }
}

PairSample Stage2Sampler::next() {
    PairSample s;
    s.label = rng_.bernoulli(0.5) ? 1 : 0;
    s.template_seq = rng_.index(data_->size());
    s.template_frame = clean_frames_[s.template_seq][rng_.index(clean_frames_[s.template_seq].size())];
    if (s.label == 1) {
        s.search_seq = s.template_seq;
    } else {
        s.search_seq = rng_.index(data_->size() - 1);
        if (s.search_seq >= s.template_seq) ++s.search_seq;
    }
    s.search_frame = clean_frames_[s.search_seq][rng_.index(clean_frames_[s.search_seq].size())];
    return s;
}

namespace {

struct PairCrops {
    Array template_img;
    Array search_patch;
    BoundingBox box_grid;  // search-frame target in heat-grid units
};

PairCrops make_pair_crops(const std::vector<SyntheticSequence>& data, const PairSample& s,
                          const RunConfig& cfg, Rng& rng, std::size_t grid_h) {
    const SyntheticSequence& tseq = data[s.template_seq];
    const SyntheticSequence& sseq = data[s.search_seq];
    const BoundingBox& tb = tseq.gt[s.template_frame];
    const BoundingBox& gb = sseq.gt[s.search_frame];
    const double fsize = static_cast<double>(sseq.frames[0].extent(1));

    PairCrops out;
    const double tside = std::max(4.0, cfg.template_context * std::max(tb.width(), tb.height()));
    out.template_img = crop_resize(tseq.frames[s.template_frame], tb.cx(), tb.cy(), tside,
                                   cfg.encoder.template_size);

    const double side = std::max(8.0, cfg.base_context * std::max(gb.width(), gb.height()));
    const double jit = 0.1 * side;
    const double cx = std::clamp(gb.cx() + rng.uniform(-jit, jit), 0.0, fsize - 1.0);
    const double cy = std::clamp(gb.cy() + rng.uniform(-jit, jit), 0.0, fsize - 1.0);
    out.search_patch = crop_resize(sseq.frames[s.search_frame], cx, cy, side,
                                   cfg.encoder.search_size);

    const PatchMapping m = crop_mapping(cx, cy, side, cfg.encoder.search_size);
    const double stride = static_cast<double>(cfg.encoder.search_size) / static_cast<double>(grid_h);
    auto to_grid = [&](double px) { return (px + 0.5) / stride - 0.5; };
    out.box_grid = {to_grid(m.to_patch_x(gb.x_tl)), to_grid(m.to_patch_y(gb.y_tl)),
                    to_grid(m.to_patch_x(gb.x_br)), to_grid(m.to_patch_y(gb.y_br))};
    return out;
}

// Reliability score of one pair against the template sequence's bank.
Var pair_confidence(Tape& t, ParamVars& p, const PairCrops& crops, const PrototypeBank& bank,
                    const RunConfig& cfg) {
    Var vt = t.leaf(crops.template_img);
    Var vs = t.leaf(crops.search_patch);
    EncodedPair enc = encode(t, vt, vs, cfg.encoder, p);
    HeadOutputs heads = decode_heads(t, enc.search_feat, p, cfg.uld_head_width);
    Var certainty = confidence_inversion(t, heads.unc_norm, p);
    Var fs_up = ad::bilinear_upsample(t, enc.search_feat, 2);
    Var fused = fuse_features(t, certainty, fs_up, p);
    const TargetMask mask = make_target_mask(crops.box_grid, heads.grid_h, heads.grid_w);
    Var proto = extract_prototype(t, enc.template_feat);
    Var p_star = reweight_prototype(t, proto, fused, mask);
    Var aggregated = p_star;
    if (!bank.empty()) {
        aggregated =
            memory_read(t, p_star, bank, cfg.pmn_topk, p, cfg.pmn_value_from_group).aggregated;
    }
    return confidence_score(t, aggregated, p);
}

// Reference prototypes per sequence, computed with the current parameters
// from evenly spaced clean frames and masked by the true boxes.
std::vector<PrototypeBank> build_banks(const std::vector<SyntheticSequence>& data,
                                       const RunConfig& cfg, const ParamStore& params) {
    std::vector<PrototypeBank> banks;
    for (const SyntheticSequence& seq : data) {
        PrototypeBank bank(cfg.pmn_capacity);
        auto clean = frames_with(seq, EventTag::kClean);
        if (clean.empty()) clean = trackable_frames(seq);
        const std::size_t want = std::min<std::size_t>(cfg.pmn_capacity, clean.size());
        for (std::size_t i = 0; i < want; ++i) {
            const std::size_t f = clean[i * clean.size() / want];
            Tape t;
            ParamVars p(t, params);
            const BoundingBox& gb = seq.gt[f];
            const double fsize = static_cast<double>(seq.frames[f].extent(1));
            const double cx = std::clamp(gb.cx(), 0.0, fsize - 1.0);
            const double cy = std::clamp(gb.cy(), 0.0, fsize - 1.0);
            const double side = std::max(8.0, cfg.base_context * std::max(gb.width(), gb.height()));
            Array patch = crop_resize(seq.frames[f], cx, cy, side, cfg.encoder.search_size);
            const double tside =
                std::max(4.0, cfg.template_context * std::max(gb.width(), gb.height()));
            Array tmpl = crop_resize(seq.frames[f], cx, cy, tside, cfg.encoder.template_size);

            Var vt = t.leaf(std::move(tmpl));
            Var vs = t.leaf(std::move(patch));
            EncodedPair enc = encode(t, vt, vs, cfg.encoder, p);
            HeadOutputs heads = decode_heads(t, enc.search_feat, p, cfg.uld_head_width);
            Var certainty = confidence_inversion(t, heads.unc_norm, p);
            Var fs_up = ad::bilinear_upsample(t, enc.search_feat, 2);
            Var fused = fuse_features(t, certainty, fs_up, p);

            const PatchMapping m = crop_mapping(cx, cy, side, cfg.encoder.search_size);
            const double stride =
                static_cast<double>(cfg.encoder.search_size) / static_cast<double>(heads.grid_h);
            auto to_grid = [&](double px) { return (px + 0.5) / stride - 0.5; };
            const BoundingBox box_grid{to_grid(m.to_patch_x(gb.x_tl)), to_grid(m.to_patch_y(gb.y_tl)),
                                       to_grid(m.to_patch_x(gb.x_br)),
                                       to_grid(m.to_patch_y(gb.y_br))};
            const TargetMask mask = make_target_mask(box_grid, heads.grid_h, heads.grid_w);
            Var proto = extract_prototype(t, enc.template_feat);
            Var p_star = reweight_prototype(t, proto, fused, mask);
            bank.insert(Prototype{t.value(p_star), static_cast<long>(f), 1.0});
        }
        banks.push_back(std::move(bank));
    }
    return banks;
}

bool is_pmn_param(const std::string& name) { return name.rfind("pmn.", 0) == 0; }

}  // namespace

Stage2Log train_stage2(const RunConfig& cfg, ParamStore& params,
                       const std::vector<SyntheticSequence>& data) {
    Stage2Log log;
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 2);
    Stage2Sampler sampler(data, rng.raw());

    // Heat grid side is fixed by the geometry: one upsample over the patch grid.
    const std::size_t grid_h = 2 * cfg.encoder.search_grid();

    std::vector<PrototypeBank> banks = build_banks(data, cfg, params);
    constexpr std::size_t kBankRefresh = 25;

    Optimizer opt(cfg.optimizer, cfg.momentum);
    ParamStore checkpoint = params;
    for (std::size_t step = 0; step < cfg.stage2_steps; ++step) {
        if (step > 0 && step % kBankRefresh == 0) banks = build_banks(data, cfg, params);

        Tape t;
        ParamVars p(t, params);
        std::vector<Var> scores;
        std::vector<int> labels;
        for (std::size_t i = 0; i < cfg.stage2_batch; ++i) {
            const PairSample s = sampler.next();
            const PairCrops crops = make_pair_crops(data, s, cfg, rng, grid_h);
            scores.push_back(pair_confidence(t, p, crops, banks[s.template_seq], cfg));
            labels.push_back(s.label);
        }
        Var loss = prototype_loss(t, scores, labels);
        const double value = t.scalar(loss);
        std::map<std::string, Array> grads;
        const Gradients adj = t.backward(loss);
        for (const auto& [name, var] : p.bound()) {
            if (is_pmn_param(name)) grads[name] = adj[static_cast<std::size_t>(var.id)];
        }
        if (!std::isfinite(value) || !grads_finite(grads)) {
            params = checkpoint;
            log.diverged = true;
            break;
        }
        checkpoint = params;
        log.losses.push_back(value);
        clip_gradients(grads);
        opt.apply(params, grads, cfg.stage2_lr, is_pmn_param);
    }

    // Held-out accuracy over fresh pairs.
    banks = build_banks(data, cfg, params);
    Stage2Sampler holdout(data, cfg.seed * 0x9e3779b97f4a7c15ULL + 99);
    Rng hold_rng(cfg.seed + 1234567);
    std::size_t correct = 0;
    constexpr std::size_t kHoldout = 200;
    for (std::size_t i = 0; i < kHoldout; ++i) {
        const PairSample s = holdout.next();
        const PairCrops crops = make_pair_crops(data, s, cfg, hold_rng, grid_h);
        Tape t;
        ParamVars p(t, params);
        const double score = t.scalar(pair_confidence(t, p, crops, banks[s.template_seq], cfg));
        if ((score > 0.5) == (s.label == 1)) ++correct;
    }
    log.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(kHoldout);
    return log;
}

SigmaStats measure_sigma_by_event(const RunConfig& cfg, const ParamStore& params,
                                  const std::vector<SyntheticSequence>& data, std::size_t samples,
                                  std::uint64_t seed) {
    Rng rng(seed);
    SigmaStats stats;
    double sum_clean = 0.0, sum_occ = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
        const TrainSample s = sample_stage1(data, cfg, rng, false);
        if (s.tag == EventTag::kDeformed || s.tag == EventTag::kOutOfView) continue;
        Tape t;
        ParamVars p(t, params);
        Var vt = t.leaf(s.template_img);
        Var vs = t.leaf(s.search_patch);
        EncodedPair enc = encode(t, vt, vs, cfg.encoder, p);
        HeadOutputs heads = decode_heads(t, enc.search_feat, p, cfg.uld_head_width);
        CornerVars corners = extract_corners(t, heads);
        double sig = 0.0;
        for (const Var& sv : corners.sigma) sig += t.scalar(sv);
        sig /= 4.0;
        if (s.tag == EventTag::kOccluded) {
            sum_occ += sig;
            ++stats.n_occluded;
        } else {
            sum_clean += sig;
            ++stats.n_clean;
        }
    }
    if (stats.n_clean) stats.mean_clean = sum_clean / static_cast<double>(stats.n_clean);
    if (stats.n_occluded) stats.mean_occluded = sum_occ / static_cast<double>(stats.n_occluded);
    return stats;
}

}  // namespace utrack
