#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/error.hpp"
#include "utrack/grad_check.hpp"
#include "utrack/ops.hpp"
#include "utrack/rng.hpp"

using namespace utrack;

namespace {

Array random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

// Triple-loop reference product.
Array matmul_oracle(const Array& a, const Array& b) {
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Array out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            out.at(i, j) = acc;
        }
    return out;
}

// Direct sliding-window cross-correlation.
Array conv2d_oracle(const Array& x, const Array& k, std::size_t stride, std::size_t pad) {
    const std::size_t ci = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t co = k.extent(0), kh = k.extent(2), kw = k.extent(3);
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    Array out({co, oh, ow});
    for (std::size_t c = 0; c < co; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t ic = 0; ic < ci; ++ic)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                ix >= static_cast<long>(w))
                                continue;
                            acc += x.at(ic, iy, ix) * k[((c * ci + ic) * kh + ky) * kw + kx];
                        }
                out.at(c, oy, ox) = acc;
            }
    return out;
}

double max_abs_diff(const Array& a, const Array& b) {
    REQUIRE(a.same_shape(b));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
    Array eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Rng rng(3);
    const Array b = random_array({3, 2}, rng);
    CHECK(max_abs_diff(matmul(eye, b), b) == 0.0);

    const Array s = matmul(Array({1, 1}, {2.0}), Array({1, 1}, {3.0}));
    CHECK(s[0] == doctest::Approx(6.0));
}

TEST_CASE("matmul agrees with the triple-loop oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.index(16), k = 1 + rng.index(16), n = 1 + rng.index(16);
        const Array a = random_array({m, k}, rng);
        const Array b = random_array({k, n}, rng);
        CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) <= 1e-12);
    }
}

TEST_CASE("matmul rejects mismatched shapes with both named") {
    Rng rng(5);
    const Array a = random_array({4, 5}, rng);
    const Array b = random_array({3, 2}, rng);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[4x5]"), ShapeError);
}

TEST_CASE("masked_softmax basics") {
    const Array flat = masked_softmax(Array({3}, {5.0, 5.0, 5.0}), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(flat[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const Array two = masked_softmax(Array({2}, {0.0, std::log(3.0)}), 0);
    CHECK(two[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(two[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("masked_softmax honors the mask exactly") {
    const Array x({3}, {1.0, 2.0, 3.0});
    const Array mask({3}, {0.0, kMaskedOut, 0.0});
    const Array y = masked_softmax(x, 0, &mask);
    // Two-term softmax over entries 1 and 3.
    const double e1 = std::exp(1.0 - 3.0), e3 = 1.0;
    CHECK(y[0] == doctest::Approx(e1 / (e1 + e3)).epsilon(1e-12));
    CHECK(y[1] == 0.0);
    CHECK(y[2] == doctest::Approx(e3 / (e1 + e3)).epsilon(1e-12));
}

TEST_CASE("masked_softmax properties: rows sum to one, masked stay zero") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.index(7);
        Array x = random_array({3, n}, rng, -30.0, 30.0);
        Array mask({3, n});
        for (std::size_t i = 0; i < mask.size(); ++i) {
            mask[i] = rng.uniform() < 0.3 ? kMaskedOut : 0.0;
        }
        for (std::size_t r = 0; r < 3; ++r) {
            bool any = false;
            for (std::size_t c = 0; c < n; ++c) any = any || mask.at(r, c) == 0.0;
            if (!any) mask.at(r, rng.index(n)) = 0.0;
        }
        const Array y = masked_softmax(x, 1, &mask);
        for (std::size_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                CHECK(y.at(r, c) >= 0.0);
                if (mask.at(r, c) == kMaskedOut) CHECK(y.at(r, c) == 0.0);
                sum += y.at(r, c);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("masked_softmax rejects a fully masked slice") {
    const Array x({2}, {1.0, 2.0});
    const Array mask({2}, {kMaskedOut, kMaskedOut});
    CHECK_THROWS_AS(masked_softmax(x, 0, &mask), DomainError);
}

TEST_CASE("conv2d identity and constant-field cases") {
    Rng rng(23);
    const Array x = random_array({2, 4, 4}, rng);
    Array k1({2, 2, 1, 1});
    k1[0 * 2 + 0] = 1.0;  // out0 <- in0
    k1[(1 * 2 + 1)] = 1.0;  // out1 <- in1
    CHECK(max_abs_diff(conv2d(x, k1, 1, 0), x) == 0.0);

    Array ones({1, 1, 3, 3}, 1.0);
    Array c({1, 5, 5}, 2.5);
    const Array y = conv2d(c, ones, 1, 1);
    CHECK(y.at(0, 2, 2) == doctest::Approx(9 * 2.5).epsilon(1e-12));
}

TEST_CASE("conv2d agrees with the sliding-window oracle") {
    Rng rng(29);
    for (int trial = 0; trial < 30; ++trial) {
        const Array x = random_array({2, 8, 8}, rng);
        const Array k = random_array({4, 2, 3, 3}, rng);
        CHECK(max_abs_diff(conv2d(x, k, 1, 1), conv2d_oracle(x, k, 1, 1)) <= 1e-12);
        CHECK(max_abs_diff(conv2d(x, k, 1, 0), conv2d_oracle(x, k, 1, 0)) <= 1e-12);
    }
}

TEST_CASE("conv2d rejects non-integral output extents") {
    Rng rng(31);
    const Array x = random_array({1, 6, 6}, rng);
    const Array k = random_array({1, 1, 3, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, k, 2, 0), ShapeError);
}

TEST_CASE("global_avg_pool matches the direct mean") {
    Array c({3, 2, 2}, 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 7.0;
    const Array pooled = global_avg_pool(c);
    for (std::size_t i = 0; i < 3; ++i) CHECK(pooled[i] == doctest::Approx(7.0));

    Rng rng(37);
    const Array x = random_array({3, 4, 4}, rng);
    const Array p = global_avg_pool(x);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 16; ++i) acc += x[ch * 16 + i];
        CHECK(std::abs(p[ch] - acc / 16.0) <= 1e-12);
    }

    const Array single = random_array({4, 1, 1}, rng);
    CHECK(max_abs_diff(global_avg_pool(single), single) == 0.0);
}

TEST_CASE("bilinear_upsample keeps constants and spreads single samples") {
    const Array c({2, 3, 3}, 1.25);
    const Array up = bilinear_upsample(c, 2);
    for (std::size_t i = 0; i < up.size(); ++i) CHECK(up[i] == doctest::Approx(1.25).epsilon(1e-12));

    const Array one({1, 1, 1}, {0.7});
    const Array up1 = bilinear_upsample(one, 2);
    REQUIRE(up1.shape() == std::vector<std::size_t>{1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(up1[i] == doctest::Approx(0.7));
}

TEST_CASE("bilinear_upsample linear ramp sampled at documented coordinates") {
    // Source coordinate of output pixel o is (o + 0.5)/2 - 0.5, clamped.
    const Array ramp({1, 1, 2}, {1.0, 3.0});
    const Array up = bilinear_upsample(ramp, 2);
    REQUIRE(up.shape() == std::vector<std::size_t>{1, 2, 4});
    for (std::size_t row = 0; row < 2; ++row) {
        CHECK(up.at(0, row, 0) == doctest::Approx(1.0));
        CHECK(up.at(0, row, 1) == doctest::Approx(0.75 * 1.0 + 0.25 * 3.0));
        CHECK(up.at(0, row, 2) == doctest::Approx(0.25 * 1.0 + 0.75 * 3.0));
        CHECK(up.at(0, row, 3) == doctest::Approx(3.0));
    }
}

TEST_CASE("bilinear_upsample rejects unsupported factors") {
    CHECK_THROWS_AS(bilinear_upsample(Array({1, 2, 2}, 1.0), 3), ConfigError);
}

TEST_CASE("backward: analytic derivatives on small closed forms") {
    Tape t;
    Var x = t.leaf(3.0);
    Var y = ad::square(t, x);
    const Gradients g = t.backward(y);
    CHECK(g[static_cast<std::size_t>(x.id)][0] == doctest::Approx(6.0));

    Tape t2;
    Var c = t2.leaf(4.0);
    Var z = ad::mul_scalar(t2, c, 0.0);  // constant function of c
    Var out = ad::add_scalar(t2, z, 5.0);
    const Gradients g2 = t2.backward(out);
    CHECK(g2[static_cast<std::size_t>(c.id)][0] == 0.0);
}

TEST_CASE("backward rejects non-scalar seeds") {
    Tape t;
    Var x = t.leaf(Array({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("backward of matmul -> masked_softmax -> sum matches finite differences") {
    Rng rng(41);
    auto fn = [](Tape& t, const std::vector<Var>& xs) {
        Var m = ad::matmul(t, xs[0], xs[1]);
        Var s = ad::masked_softmax(t, m, 1);
        return ad::sum(t, ad::square(t, s));
    };
    const GradCheckReport r = grad_check(fn, {random_array({3, 3}, rng), random_array({3, 3}, rng)});
    CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("grad_check: quadratics are exact up to rounding") {
    auto fn = [](Tape& t, const std::vector<Var>& xs) { return ad::sum(t, ad::square(t, xs[0])); };
    Rng rng(43);
    const GradCheckReport r = grad_check(fn, {random_array({4}, rng)});
    CHECK(r.max_rel_error <= 1e-9);
}

TEST_CASE("grad_check flags a corrupted gradient") {
    // Op computes x^2 but reports a doubled derivative.
    auto fn = [](Tape& t, const std::vector<Var>& xs) {
        Var bad = t.record(
            "bad_square", {xs[0]}, Array::scalar(t.scalar(xs[0]) * t.scalar(xs[0])),
            [](const Tape::Inputs& in) { return Array::scalar((*in[0])[0] * (*in[0])[0]); },
            [](const Array& g, const Tape::Inputs& in, const Array&) {
                return std::vector<Array>{Array::scalar(g[0] * 4.0 * (*in[0])[0])};
            });
        return bad;
    };
    const GradCheckReport r = grad_check(fn, {Array::scalar(1.5)});
    CHECK(r.max_rel_error > 1e-2);
}

TEST_CASE("grad_check: every differentiable primitive at random points") {
    Rng rng(47);
    struct Case {
        const char* name;
        ScalarFn fn;
        std::vector<Array> point;
    };
    std::vector<Case> cases;
    cases.push_back({"add_mul_div", [](Tape& t, const std::vector<Var>& xs) {
                         Var s = ad::add(t, xs[0], xs[1]);
                         Var m = ad::mul(t, s, xs[0]);
                         Var d = ad::div_ew(t, m, ad::add_scalar(t, ad::square(t, xs[1]), 1.5));
                         return ad::sum(t, d);
                     },
                     {random_array({5}, rng), random_array({5}, rng)}});
    cases.push_back({"minmax_abs", [](Tape& t, const std::vector<Var>& xs) {
                         Var m = ad::min_ew(t, xs[0], xs[1]);
                         Var M = ad::max_ew(t, xs[0], xs[1]);
                         return ad::sum(t, ad::add(t, ad::abs_ew(t, m), ad::square(t, M)));
                     },
                     {random_array({6}, rng), random_array({6}, rng)}});
    cases.push_back({"exp_log_sqrt", [](Tape& t, const std::vector<Var>& xs) {
                         Var e = ad::exp_ew(t, xs[0]);
                         Var l = ad::log_ew(t, ad::add_scalar(t, ad::square(t, xs[0]), 1.0));
                         Var q = ad::sqrt_ew(t, ad::add_scalar(t, ad::square(t, xs[0]), 0.5));
                         return ad::mean(t, ad::add(t, e, ad::add(t, l, q)));
                     },
                     {random_array({5}, rng)}});
    cases.push_back({"activations", [](Tape& t, const std::vector<Var>& xs) {
                         Var a = ad::relu(t, xs[0]);
                         Var b = ad::softplus(t, xs[0]);
                         Var c = ad::sigmoid(t, xs[0]);
                         return ad::sum(t, ad::mul(t, a, ad::mul(t, b, c)));
                     },
                     {random_array({7}, rng)}});
    cases.push_back({"atan2", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t, ad::atan2_ew(t, xs[0], xs[1]));
                     },
                     {random_array({4}, rng, 0.2, 1.0), random_array({4}, rng, 0.2, 1.0)}});
    cases.push_back({"structure", [](Tape& t, const std::vector<Var>& xs) {
                         Var r = ad::reshape(t, xs[0], {2, 6});
                         Var tr = ad::transpose(t, r);
                         Var sl = ad::slice(t, tr, 0, 1, 4);
                         Var cat = ad::concat(t, {sl, sl}, 1);
                         return ad::sum(t, ad::square(t, cat));
                     },
                     {random_array({12}, rng)}});
    cases.push_back({"conv_affine", [](Tape& t, const std::vector<Var>& xs) {
                         Var c = ad::conv2d(t, xs[0], xs[1], 1, 1);
                         Var a = ad::channel_affine(t, c, xs[2], xs[3]);
                         return ad::sum(t, ad::square(t, a));
                     },
                     {random_array({2, 4, 4}, rng), random_array({3, 2, 3, 3}, rng),
                      random_array({3}, rng), random_array({3}, rng)}});
    cases.push_back({"pool_upsample", [](Tape& t, const std::vector<Var>& xs) {
                         Var u = ad::bilinear_upsample(t, xs[0], 2);
                         Var p = ad::global_avg_pool(t, ad::square(t, u));
                         return ad::sum(t, p);
                     },
                     {random_array({2, 3, 3}, rng)}});
    cases.push_back({"layer_norm", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t,
                                        ad::square(t, ad::layer_norm(t, xs[0], xs[1], xs[2])));
                     },
                     {random_array({4, 6}, rng), random_array({6}, rng, 0.5, 1.5),
                      random_array({6}, rng)}});
    cases.push_back({"row_channel_bias", [](Tape& t, const std::vector<Var>& xs) {
                         Var r = ad::add_row_bias(t, xs[0], xs[1]);
                         Var img = ad::reshape(t, r, {2, 2, 3});
                         Var c = ad::add_channel_bias(t, img, xs[2]);
                         return ad::sum(t, ad::square(t, c));
                     },
                     {random_array({4, 3}, rng), random_array({3}, rng), random_array({2}, rng)}});
    cases.push_back({"patch_flatten", [](Tape& t, const std::vector<Var>& xs) {
                         return ad::sum(t, ad::square(t, ad::patch_flatten(t, xs[0], 2)));
                     },
                     {random_array({3, 4, 4}, rng)}});
    cases.push_back({"bilinear_sample", [](Tape& t, const std::vector<Var>& xs) {
                         Var v = ad::bilinear_sample(t, xs[0], xs[1], xs[2]);
                         return ad::square(t, v);
                     },
                     {random_array({4, 5}, rng), Array::scalar(1.7), Array::scalar(2.3)}});

    for (const Case& c : cases) {
        CAPTURE(c.name);
        for (int rep = 0; rep < 3; ++rep) {
            std::vector<Array> point = c.point;
            for (Array& a : point) {
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += rng.uniform(-0.05, 0.05);
            }
            const GradCheckReport r = grad_check(c.fn, point);
            CHECK(r.max_rel_error <= 1e-6);
        }
    }
}

TEST_CASE("tape replay reproduces the forward pass bit for bit") {
    Rng rng(53);
    Tape t;
    Var a = t.leaf(random_array({3, 4}, rng));
    Var b = t.leaf(random_array({4, 3}, rng));
    Var m = ad::matmul(t, a, b);
    Var s = ad::masked_softmax(t, m, 1);
    Var c = ad::conv2d(t, ad::reshape(t, s, {1, 3, 3}),
                       t.leaf(random_array({2, 1, 3, 3}, rng)), 1, 1);
    Var out = ad::sum(t, ad::square(t, c));
    (void)out;
    CHECK(t.replay_matches());
}

TEST_CASE("grad_check requires finite evaluations") {
    auto fn = [](Tape& t, const std::vector<Var>& xs) { return ad::log_ew(t, xs[0]); };
    CHECK_THROWS_AS(grad_check(fn, {Array::scalar(1e-7)}, 1e-6), NumericError);
}
