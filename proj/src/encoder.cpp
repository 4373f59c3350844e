#include "utrack/encoder.hpp"

#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/error.hpp"

namespace utrack {

void EncoderConfig::validate() const {
    if (patch == 0 || width == 0 || heads == 0) throw ConfigError("encoder: zero-sized config");
    if (width % heads != 0) {
        throw ConfigError("encoder: width " + std::to_string(width) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    if (template_size % patch != 0 || search_size % patch != 0) {
        throw ConfigError("encoder: patch side " + std::to_string(patch) +
                          " must divide template and search sizes");
    }
}

namespace {

std::string layer_prefix(std::size_t layer) { return "enc.l" + std::to_string(layer) + "."; }

Var linear(Tape& t, Var x, ParamVars& p, const std::string& w, const std::string& b) {
    return ad::add_row_bias(t, ad::matmul(t, x, p(w)), p(b));
}

}  // namespace

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.width;
    const std::size_t pd = 3 * cfg.patch * cfg.patch;
    store.set("enc.embed.w", xavier_uniform({pd, d}, pd, d, rng));
    store.set("enc.embed.b", Array({d}));
    store.set("enc.pos.template", xavier_uniform({cfg.template_tokens(), d}, d, d, rng));
    store.set("enc.pos.search", xavier_uniform({cfg.search_tokens(), d}, d, d, rng));
    const std::size_t ff = cfg.ff_multiplier * d;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string pre = layer_prefix(l);
        store.set(pre + "ln1.g", Array({d}, 1.0));
        store.set(pre + "ln1.b", Array({d}));
        store.set(pre + "ln2.g", Array({d}, 1.0));
        store.set(pre + "ln2.b", Array({d}));
        for (const char* nm : {"wq", "wk", "wv", "wo"}) {
            store.set(pre + "attn." + nm, xavier_uniform({d, d}, d, d, rng));
        }
        for (const char* nm : {"bq", "bk", "bv", "bo"}) {
            store.set(pre + "attn." + nm, Array({d}));
        }
        store.set(pre + "ff.w1", xavier_uniform({d, ff}, d, ff, rng));
        store.set(pre + "ff.b1", Array({ff}));
        store.set(pre + "ff.w2", xavier_uniform({ff, d}, ff, d, rng));
        store.set(pre + "ff.b2", Array({d}));
    }
}

TokenSet patchify_embed(Tape& t, Var image, TokenOrigin origin, const EncoderConfig& cfg,
                        ParamVars& params) {
    cfg.validate();
    const Array& img = t.value(image);
    if (img.rank() != 3 || img.extent(0) != 3) {
        throw ShapeError("patchify_embed: expects [3 x H x W], got " + img.shape_str());
    }
    if (img.extent(1) % cfg.patch != 0 || img.extent(2) % cfg.patch != 0) {
        throw ConfigError("patchify_embed: patch side " + std::to_string(cfg.patch) +
                          " does not divide image " + img.shape_str());
    }
    const std::size_t rows = img.extent(1) / cfg.patch;
    const std::size_t cols = img.extent(2) / cfg.patch;
    Var patches = ad::patch_flatten(t, image, cfg.patch);
    Var tok = linear(t, patches, params, "enc.embed.w", "enc.embed.b");
    const char* pos_name =
        origin == TokenOrigin::kTemplate ? "enc.pos.template" : "enc.pos.search";
    const Array& pos = params.store().at(pos_name);
    if (pos.extent(0) != rows * cols) {
        throw ShapeError("patchify_embed: positional table " + pos.shape_str() + " does not cover " +
                         std::to_string(rows * cols) + " tokens");
    }
    tok = ad::add(t, tok, params(pos_name));
    return TokenSet{tok, origin, rows, cols};
}

namespace {

// Per-head scaled dot-product attention of q [n_q x d] over the joint
// key/value tokens [n_kv x d]; heads are column blocks.
Var joint_attention(Tape& t, Var q, Var k, Var v, const EncoderConfig& cfg,
                    std::vector<Var>* weight_probe) {
    const std::size_t d = cfg.width;
    const std::size_t dh = d / cfg.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> head_outputs;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Var qh = ad::slice(t, q, 1, h * dh, dh);
        Var kh = ad::slice(t, k, 1, h * dh, dh);
        Var vh = ad::slice(t, v, 1, h * dh, dh);
        Var scores = ad::mul_scalar(t, ad::matmul(t, qh, ad::transpose(t, kh)), scale);
        Var weights = ad::masked_softmax(t, scores, 1);
        if (weight_probe) weight_probe->push_back(weights);
        head_outputs.push_back(ad::matmul(t, weights, vh));
    }
    return head_outputs.size() == 1 ? head_outputs[0] : ad::concat(t, head_outputs, 1);
}

}  // namespace

std::pair<TokenSet, TokenSet> mixed_attention_layer(Tape& t, const TokenSet& tmpl,
                                                    const TokenSet& search,
                                                    const EncoderConfig& cfg, ParamVars& params,
                                                    std::size_t layer_index,
                                                    AttentionProbe* probe) {
    const Array& ta = t.value(tmpl.tokens);
    const Array& sa = t.value(search.tokens);
    if (ta.extent(1) != sa.extent(1)) {
        throw ShapeError("mixed_attention_layer: widths differ: " + ta.shape_str() + " vs " +
                         sa.shape_str());
    }
    const std::string pre = layer_prefix(layer_index);

    Var tn = ad::layer_norm(t, tmpl.tokens, params(pre + "ln1.g"), params(pre + "ln1.b"));
    Var sn = ad::layer_norm(t, search.tokens, params(pre + "ln1.g"), params(pre + "ln1.b"));
    Var joint = ad::concat(t, {tn, sn}, 0);

    Var q_t = linear(t, tn, params, pre + "attn.wq", pre + "attn.bq");
    Var q_s = linear(t, sn, params, pre + "attn.wq", pre + "attn.bq");
    Var k = linear(t, joint, params, pre + "attn.wk", pre + "attn.bk");
    Var v = linear(t, joint, params, pre + "attn.wv", pre + "attn.bv");

    Var at = joint_attention(t, q_t, k, v, cfg, probe ? &probe->template_weights : nullptr);
    Var as = joint_attention(t, q_s, k, v, cfg, probe ? &probe->search_weights : nullptr);
    at = linear(t, at, params, pre + "attn.wo", pre + "attn.bo");
    as = linear(t, as, params, pre + "attn.wo", pre + "attn.bo");

    Var t1 = ad::add(t, tmpl.tokens, at);
    Var s1 = ad::add(t, search.tokens, as);

    auto feed_forward = [&](Var x) {
        Var xn = ad::layer_norm(t, x, params(pre + "ln2.g"), params(pre + "ln2.b"));
        Var h = ad::relu(t, linear(t, xn, params, pre + "ff.w1", pre + "ff.b1"));
        return ad::add(t, x, linear(t, h, params, pre + "ff.w2", pre + "ff.b2"));
    };
    TokenSet out_t{feed_forward(t1), tmpl.origin, tmpl.rows, tmpl.cols};
    TokenSet out_s{feed_forward(s1), search.origin, search.rows, search.cols};
    return {out_t, out_s};
}

namespace {

// [n x d] tokens -> [d x rows x cols] feature map.
Var tokens_to_map(Tape& t, const TokenSet& ts, std::size_t d) {
    Var tr = ad::transpose(t, ts.tokens);
    return ad::reshape(t, tr, {d, ts.rows, ts.cols});
}

}  // namespace

EncodedPair encode(Tape& t, Var template_image, Var search_image, const EncoderConfig& cfg,
                   ParamVars& params) {
    TokenSet tmpl = patchify_embed(t, template_image, TokenOrigin::kTemplate, cfg, params);
    TokenSet search = patchify_embed(t, search_image, TokenOrigin::kSearch, cfg, params);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::tie(tmpl, search) = mixed_attention_layer(t, tmpl, search, cfg, params, l);
    }
    EncodedPair out;
    out.template_feat = tokens_to_map(t, tmpl, cfg.width);
    out.search_feat = tokens_to_map(t, search, cfg.width);
    out.template_grid = tmpl.rows;
    out.search_grid = search.rows;
    return out;
}

}  // namespace utrack
