#include "utrack/pmn.hpp"

#include <algorithm>
#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/error.hpp"
#include "utrack/ops.hpp"

namespace utrack {

PrototypeBank::PrototypeBank(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("PrototypeBank: capacity must be positive");
}

void PrototypeBank::insert(Prototype p) {
    entries_.push_back(std::move(p));
    if (entries_.size() > capacity_) entries_.erase(entries_.begin());
}

TargetMask make_target_mask(const BoundingBox& box_grid, std::size_t grid_h, std::size_t grid_w) {
    Array m({1, grid_h, grid_w}, kMaskedOut);
    std::size_t live = 0;
    for (std::size_t y = 0; y < grid_h; ++y) {
        for (std::size_t x = 0; x < grid_w; ++x) {
            const double cx = static_cast<double>(x) + 0.5;
            const double cy = static_cast<double>(y) + 0.5;
            if (cx >= box_grid.x_tl && cx <= box_grid.x_br && cy >= box_grid.y_tl &&
                cy <= box_grid.y_br) {
                m.at(0, y, x) = 0.0;
                ++live;
            }
        }
    }
    if (live == 0) {
        const auto clamp_idx = [](double v, std::size_t n) {
            return static_cast<std::size_t>(
                std::clamp(v, 0.0, static_cast<double>(n - 1)));
        };
        m.at(0, clamp_idx(box_grid.cy(), grid_h), clamp_idx(box_grid.cx(), grid_w)) = 0.0;
    }
    return TargetMask{std::move(m)};
}

void init_pmn_params(ParamStore& store, std::size_t channels, std::size_t hidden, Rng& rng,
                     std::size_t cim_kernel) {
    store.set("pmn.cim.w", xavier_uniform({1, 4, cim_kernel, cim_kernel}, 4 * cim_kernel * cim_kernel,
                                          cim_kernel * cim_kernel, rng));
    store.set("pmn.cim.b", Array({1}));
    store.set("pmn.fuse.w",
              xavier_uniform({channels, channels + 1, 1, 1}, channels + 1, channels, rng));
    store.set("pmn.fuse.b", Array({channels}));
    for (const char* nm : {"wq", "wk", "wv"}) {
        store.set(std::string("pmn.attn.") + nm,
                  xavier_uniform({channels, channels}, channels, channels, rng));
    }
    store.set("pmn.mlp.w1", xavier_uniform({channels, hidden}, channels, hidden, rng));
    store.set("pmn.mlp.b1", Array({hidden}));
    store.set("pmn.mlp.w2", xavier_uniform({hidden, 2}, hidden, 2, rng));
    store.set("pmn.mlp.b2", Array({2}));
}

Prototype extract_prototype(const Array& template_feat) {
    const Array pooled = global_avg_pool(template_feat);
    return Prototype{Array({pooled.size()}, pooled.data()), -1, 1.0};
}

Var extract_prototype(Tape& t, Var template_feat) {
    const std::size_t c = t.value(template_feat).extent(0);
    return ad::reshape(t, ad::global_avg_pool(t, template_feat), {c});
}

namespace {

void check_unit_interval(const Array& a, const char* op) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] < 0.0 || a[i] > 1.0) {
            throw ContractError(std::string(op) + ": input outside [0, 1]");
        }
    }
}

}  // namespace

Var confidence_inversion(Tape& t, Var unc_norm, ParamVars& params) {
    const Array& u = t.value(unc_norm);
    if (u.rank() != 3 || u.extent(0) != 4) {
        throw ShapeError("confidence_inversion: expects [4 x H x W], got " + u.shape_str());
    }
    check_unit_interval(u, "confidence_inversion");
    Var inverted = ad::add_scalar(t, ad::mul_scalar(t, unc_norm, -1.0), 1.0);
    const Array& kernel = params.store().at("pmn.cim.w");
    const std::size_t pad = kernel.extent(2) / 2;
    Var y = ad::conv2d(t, inverted, params("pmn.cim.w"), 1, pad);
    y = ad::add_channel_bias(t, y, params("pmn.cim.b"));
    return ad::sigmoid(t, y);
}

Array confidence_inversion(const Array& unc_norm, const ParamStore& params) {
    Tape t;
    ParamVars p(t, params);
    return t.value(confidence_inversion(t, t.leaf(unc_norm), p));
}

Var fuse_features(Tape& t, Var certainty, Var search_feat, ParamVars& params) {
    const Array& c = t.value(certainty);
    const Array& f = t.value(search_feat);
    if (c.rank() != 3 || f.rank() != 3 || c.extent(1) != f.extent(1) ||
        c.extent(2) != f.extent(2)) {
        throw ShapeError("fuse_features: spatial extents differ: " + c.shape_str() + " vs " +
                         f.shape_str());
    }
    Var stacked = ad::concat(t, {search_feat, certainty}, 0);
    Var y = ad::conv2d(t, stacked, params("pmn.fuse.w"), 1, 0);
    return ad::add_channel_bias(t, y, params("pmn.fuse.b"));
}

Array reweight_prototype(const Array& proto, const Array& fused, const TargetMask& mask) {
    const std::size_t c = fused.extent(0), hw = fused.extent(1) * fused.extent(2);
    if (proto.size() != c) {
        throw ShapeError("reweight_prototype: prototype " + proto.shape_str() +
                         " vs features " + fused.shape_str());
    }
    Array scores({1, hw});
    for (std::size_t j = 0; j < hw; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < c; ++i) dot += proto[i] * fused[i * hw + j];
        scores[j] = dot;
    }
    const Array mask_flat({1, hw}, mask.values.data());
    const Array w = masked_softmax(scores, 1, &mask_flat);
    Array out({c});
    for (std::size_t i = 0; i < c; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += w[j] * fused[i * hw + j];
        out[i] = acc;
    }
    return out;
}

Var reweight_prototype(Tape& t, Var proto, Var fused, const TargetMask& mask) {
    const Array& f = t.value(fused);
    const std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
    if (t.value(proto).size() != c) {
        throw ShapeError("reweight_prototype: prototype " + t.value(proto).shape_str() +
                         " vs features " + f.shape_str());
    }
    if (mask.values.size() != hw) {
        throw ShapeError("reweight_prototype: mask " + mask.values.shape_str() +
                         " does not match feature grid");
    }
    Var fm = ad::reshape(t, fused, {c, hw});
    Var scores = ad::matmul(t, ad::reshape(t, proto, {1, c}), fm);  // [1 x hw]
    const Array mask_flat({1, hw}, mask.values.data());
    Var w = ad::masked_softmax(t, scores, 1, &mask_flat);
    Var out = ad::matmul(t, fm, ad::transpose(t, w));  // [c x 1]
    return ad::reshape(t, out, {c});
}

double cosine_similarity(const Array& a, const Array& b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine_similarity: lengths differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<std::size_t> topk_by_similarity(const Array& query, const PrototypeBank& bank,
                                            std::size_t k) {
    if (bank.empty()) throw ContractError("topk_by_similarity: empty bank");
    if (k == 0) throw ContractError("topk_by_similarity: k must be positive");
    std::vector<std::size_t> idx(bank.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<double> sim(bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i) {
        sim[i] = cosine_similarity(query, bank.entry(i).vector);
    }
    // Higher similarity first; on ties the newer entry (larger index) wins.
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (sim[a] != sim[b]) return sim[a] > sim[b];
        return a > b;
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

MemoryReadResult memory_read(Tape& t, Var p_star, const PrototypeBank& bank, std::size_t k,
                             ParamVars& params, bool value_from_group) {
    if (bank.empty()) throw ContractError("memory_read: empty bank");
    const std::size_t c = t.value(p_star).size();
    const std::vector<std::size_t> selected = topk_by_similarity(t.value(p_star), bank, k);
    const std::size_t kk = selected.size();

    Array group({kk, c});
    for (std::size_t i = 0; i < kk; ++i) {
        const Array& v = bank.entry(selected[i]).vector;
        for (std::size_t j = 0; j < c; ++j) group.at(i, j) = v[j];
    }
    Var group_var = t.leaf(std::move(group));

    Var row = ad::reshape(t, p_star, {1, c});
    Var q = ad::matmul(t, row, params("pmn.attn.wq"));
    Var keys = ad::matmul(t, group_var, params("pmn.attn.wk"));
    Var scores = ad::matmul(t, q, ad::transpose(t, keys));  // [1 x kk]
    Var weights = ad::masked_softmax(t, scores, 1);

    Var values;
    if (value_from_group) {
        values = ad::matmul(t, group_var, params("pmn.attn.wv"));
    } else {
        Var v = ad::matmul(t, row, params("pmn.attn.wv"));
        values = kk == 1 ? v : ad::concat(t, std::vector<Var>(kk, v), 0);  // [kk x c]
    }
    Var attended = ad::matmul(t, weights, values);  // [1 x c]
    Var aggregated = ad::add(t, p_star, ad::reshape(t, attended, {c}));
    return MemoryReadResult{aggregated, selected};
}

Var confidence_score(Tape& t, Var p_hat, ParamVars& params) {
    const std::size_t c = t.value(p_hat).size();
    Var x = ad::reshape(t, p_hat, {1, c});
    Var h = ad::relu(t, ad::add_row_bias(t, ad::matmul(t, x, params("pmn.mlp.w1")),
                                         params("pmn.mlp.b1")));
    Var logits = ad::add_row_bias(t, ad::matmul(t, h, params("pmn.mlp.w2")), params("pmn.mlp.b2"));
    Var probs = ad::masked_softmax(t, logits, 1);
    return ad::element(t, probs, 1);
}

namespace {
constexpr double kProbClamp = 1e-12;
}

double prototype_loss(const std::vector<double>& p, const std::vector<int>& y) {
    if (p.size() != y.size() || p.empty()) {
        throw ShapeError("prototype_loss: probability/label lengths differ");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
        acc += y[i] ? std::log(pi) : std::log(1.0 - pi);
    }
    return -acc / static_cast<double>(p.size());
}

Var prototype_loss(Tape& t, const std::vector<Var>& p, const std::vector<int>& y) {
    if (p.size() != y.size() || p.empty()) {
        throw ShapeError("prototype_loss: probability/label lengths differ");
    }
    Var acc{};
    Var lo = t.leaf(kProbClamp);
    Var hi = t.leaf(1.0 - kProbClamp);
    for (std::size_t i = 0; i < p.size(); ++i) {
        Var pc = ad::min_ew(t, ad::max_ew(t, p[i], lo), hi);
        Var term = y[i] ? ad::log_ew(t, pc)
                        : ad::log_ew(t, ad::add_scalar(t, ad::mul_scalar(t, pc, -1.0), 1.0));
        acc = acc.valid() ? ad::add(t, acc, term) : term;
    }
    return ad::mul_scalar(t, acc, -1.0 / static_cast<double>(p.size()));
}

PrototypeBank memory_update(PrototypeBank bank, Prototype proto, double p, double threshold) {
    if (p < 0.0 || p > 1.0) throw ContractError("memory_update: score outside [0, 1]");
    if (p > threshold) bank.insert(std::move(proto));
    return bank;
}

}  // namespace utrack
