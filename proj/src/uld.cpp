#include "utrack/uld.hpp"

#include <cmath>
#include <cstdio>

#include "utrack/ad.hpp"
#include "utrack/error.hpp"
#include "utrack/ops.hpp"

namespace utrack {

namespace {

// Initial sigma head bias; softplus(-2.25) + floor gives sigma near 0.1.
constexpr double kSigmaBiasInit = -2.25;

void init_conv(ParamStore& store, const std::string& name, std::size_t co, std::size_t ci,
               std::size_t k, Rng& rng) {
    store.set(name, xavier_uniform({co, ci, k, k}, ci * k * k, co * k * k, rng));
}

void init_affine(ParamStore& store, const std::string& prefix, std::size_t c) {
    store.set(prefix + ".scale", Array({c}, 1.0));
    store.set(prefix + ".shift", Array({c}));
}

// Conv (3x3, pad 1) -> per-channel affine -> ReLU.
Var conv_affine_relu(Tape& t, Var x, ParamVars& p, const std::string& prefix) {
    Var y = ad::conv2d(t, x, p(prefix + ".w"), 1, 1);
    y = ad::channel_affine(t, y, p(prefix + ".scale"), p(prefix + ".shift"));
    return ad::relu(t, y);
}

}  // namespace

void init_uld_params(ParamStore& store, std::size_t channels, std::size_t head_width, Rng& rng) {
    init_conv(store, "uld.neck.w", channels, channels, 3, rng);
    init_affine(store, "uld.neck", channels);
    for (const char* branch : {"prob", "unc"}) {
        const std::string pre = std::string("uld.") + branch;
        init_conv(store, pre + ".c1.w", head_width, channels, 3, rng);
        init_affine(store, pre + ".c1", head_width);
        init_conv(store, pre + ".c2.w", head_width, head_width, 3, rng);
        init_affine(store, pre + ".c2", head_width);
    }
    init_conv(store, "uld.prob.proj.w", 2, head_width, 1, rng);
    store.set("uld.prob.proj.b", Array({2}));
    init_conv(store, "uld.unc.proj.w", 4, head_width, 1, rng);
    store.set("uld.unc.proj.b", Array({4}, kSigmaBiasInit));
}

HeadOutputs decode_heads(Tape& t, Var search_feat, ParamVars& params, std::size_t head_width) {
    const Array& f = t.value(search_feat);
    if (f.rank() != 3) throw ShapeError("decode_heads: expects [C x H x W], got " + f.shape_str());
    (void)head_width;

    Var x = ad::bilinear_upsample(t, search_feat, 2);
    x = conv_affine_relu(t, x, params, "uld.neck");
    const std::size_t gh = t.value(x).extent(1), gw = t.value(x).extent(2);

    Var pb = conv_affine_relu(t, x, params, "uld.prob.c1");
    pb = conv_affine_relu(t, pb, params, "uld.prob.c2");
    pb = ad::add_channel_bias(t, ad::conv2d(t, pb, params("uld.prob.proj.w"), 1, 0),
                              params("uld.prob.proj.b"));
    // Normalize each channel over the whole grid.
    Var flat = ad::reshape(t, pb, {2, gh * gw});
    Var prob = ad::reshape(t, ad::masked_softmax(t, flat, 1), {2, gh, gw});

    Var ub = conv_affine_relu(t, x, params, "uld.unc.c1");
    ub = conv_affine_relu(t, ub, params, "uld.unc.c2");
    ub = ad::add_channel_bias(t, ad::conv2d(t, ub, params("uld.unc.proj.w"), 1, 0),
                              params("uld.unc.proj.b"));
    Var unc = ad::add_scalar(t, ad::softplus(t, ub), kSigmaFloor);
    Var unc_norm = ad::div_ew(t, unc, ad::add_scalar(t, unc, 1.0));

    return HeadOutputs{prob, unc, unc_norm, gh, gw};
}

std::pair<double, double> soft_argmax(const Array& channel) {
    if (channel.rank() != 2) {
        throw ShapeError("soft_argmax: expects [H x W], got " + channel.shape_str());
    }
    double total = 0.0, ex = 0.0, ey = 0.0;
    for (std::size_t y = 0; y < channel.extent(0); ++y) {
        for (std::size_t x = 0; x < channel.extent(1); ++x) {
            const double w = channel.at(y, x);
            if (w < 0.0) throw ContractError("soft_argmax: negative mass in channel");
            total += w;
            ex += w * static_cast<double>(x);
            ey += w * static_cast<double>(y);
        }
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw ContractError("soft_argmax: channel mass " + std::to_string(total) + " is not 1");
    }
    return {ex, ey};
}

std::pair<Var, Var> soft_argmax(Tape& t, Var channel) {
    const Array& c = t.value(channel);
    soft_argmax(c);  // validates the contract on the current value
    Array xs(c.shape()), ys(c.shape());
    for (std::size_t y = 0; y < c.extent(0); ++y) {
        for (std::size_t x = 0; x < c.extent(1); ++x) {
            xs.at(y, x) = static_cast<double>(x);
            ys.at(y, x) = static_cast<double>(y);
        }
    }
    Var ex = ad::sum(t, ad::mul(t, channel, t.leaf(std::move(xs))));
    Var ey = ad::sum(t, ad::mul(t, channel, t.leaf(std::move(ys))));
    return {ex, ey};
}

namespace {

double sample_channel_clamped(const Array& unc_map, std::size_t channel, double x, double y) {
    const std::size_t h = unc_map.extent(1), w = unc_map.extent(2);
    if (x < 0.0 || y < 0.0 || x > static_cast<double>(w - 1) || y > static_cast<double>(h - 1)) {
        std::fprintf(stderr, "read_sigma: corner (%.3f, %.3f) outside %zux%zu grid, clamped\n", x, y,
                     w, h);
    }
    Array plane({h, w});
    for (std::size_t i = 0; i < h * w; ++i) plane[i] = unc_map[channel * h * w + i];
    return bilinear_sample(plane, x, y);
}

}  // namespace

std::array<double, 4> read_sigma(const Array& unc_map, std::pair<double, double> top_left,
                                 std::pair<double, double> bottom_right) {
    if (unc_map.rank() != 3 || unc_map.extent(0) != 4) {
        throw ShapeError("read_sigma: expects [4 x H x W], got " + unc_map.shape_str());
    }
    return {sample_channel_clamped(unc_map, 0, top_left.first, top_left.second),
            sample_channel_clamped(unc_map, 1, top_left.first, top_left.second),
            sample_channel_clamped(unc_map, 2, bottom_right.first, bottom_right.second),
            sample_channel_clamped(unc_map, 3, bottom_right.first, bottom_right.second)};
}

CornerVars extract_corners(Tape& t, const HeadOutputs& heads) {
    const std::size_t gh = heads.grid_h, gw = heads.grid_w;
    Var tl = ad::reshape(t, ad::slice(t, heads.prob_map, 0, 0, 1), {gh, gw});
    Var br = ad::reshape(t, ad::slice(t, heads.prob_map, 0, 1, 1), {gh, gw});
    auto [x_tl, y_tl] = soft_argmax(t, tl);
    auto [x_br, y_br] = soft_argmax(t, br);

    CornerVars out;
    out.box = BoxVars{x_tl, y_tl, x_br, y_br};
    const std::array<std::pair<Var, Var>, 4> at = {
        std::pair{x_tl, y_tl}, {x_tl, y_tl}, {x_br, y_br}, {x_br, y_br}};
    for (std::size_t c = 0; c < 4; ++c) {
        Var plane = ad::reshape(t, ad::slice(t, heads.unc_map, 0, c, 1), {gh, gw});
        out.sigma[c] = ad::bilinear_sample(t, plane, at[c].first, at[c].second);
    }
    return out;
}

namespace {

double nll_term(double mu, double sigma, double gt) {
    if (sigma <= 0.0) throw DomainError("uncertainty_loss: sigma must be positive");
    const double d = mu - gt;
    return d * d / (2.0 * sigma * sigma) + std::log(sigma * sigma) / 2.0;
}

}  // namespace

double uncertainty_loss(const std::array<double, 4>& mu, const std::array<double, 4>& sigma,
                        const std::array<double, 4>& mu_gt) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 4; ++i) acc += nll_term(mu[i], sigma[i], mu_gt[i]);
    return acc / 4.0;
}

double uncertainty_loss_full(const std::array<double, 4>& mu, const std::array<double, 4>& sigma,
                             const std::array<double, 4>& mu_gt) {
    constexpr double kHalfLogTwoPi = 0.9189385332046727;
    return uncertainty_loss(mu, sigma, mu_gt) + kHalfLogTwoPi;
}

Var uncertainty_loss(Tape& t, const std::array<Var, 4>& mu, const std::array<Var, 4>& sigma,
                     const std::array<double, 4>& mu_gt) {
    Var acc{};
    for (std::size_t i = 0; i < 4; ++i) {
        if (t.scalar(sigma[i]) <= 0.0) {
            throw DomainError("uncertainty_loss: sigma must be positive");
        }
        Var d = ad::add_scalar(t, mu[i], -mu_gt[i]);
        Var s2 = ad::square(t, sigma[i]);
        Var quad = ad::div_ew(t, ad::square(t, d), ad::mul_scalar(t, s2, 2.0));
        Var term = ad::add(t, quad, ad::mul_scalar(t, ad::log_ew(t, s2), 0.5));
        acc = acc.valid() ? ad::add(t, acc, term) : term;
    }
    return ad::mul_scalar(t, acc, 0.25);
}

}  // namespace utrack
