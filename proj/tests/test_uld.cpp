#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/encoder.hpp"
#include "utrack/error.hpp"
#include "utrack/grad_check.hpp"
#include "utrack/rng.hpp"
#include "utrack/uld.hpp"

using namespace utrack;

namespace {

Array random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

HeadOutputs make_heads(Tape& t, const ParamStore& store, const Array& feat, std::size_t width) {
    ParamVars p(t, store);
    return decode_heads(t, t.leaf(feat), p, width);
}

}  // namespace

TEST_CASE("decode_heads doubles the grid and normalizes the channels") {
    Rng rng(1);
    const std::size_t c = 8, head_w = 4;
    ParamStore store;
    init_uld_params(store, c, head_w, rng);

    const Array feat = random_array({c, 5, 5}, rng);
    Tape t;
    const HeadOutputs heads = make_heads(t, store, feat, head_w);
    CHECK(heads.grid_h == 10);
    CHECK(heads.grid_w == 10);

    const Array& prob = t.value(heads.prob_map);
    REQUIRE(prob.shape() == std::vector<std::size_t>{2, 10, 10});
    for (std::size_t ch = 0; ch < 2; ++ch) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 100; ++i) sum += prob[ch * 100 + i];
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }

    const Array& unc = t.value(heads.unc_map);
    REQUIRE(unc.shape() == std::vector<std::size_t>{4, 10, 10});
    for (std::size_t i = 0; i < unc.size(); ++i) CHECK(unc[i] > 0.0);

    const Array& un = t.value(heads.unc_norm);
    for (std::size_t i = 0; i < un.size(); ++i) {
        CHECK(un[i] > 0.0);
        CHECK(un[i] < 1.0);
        CHECK(un[i] == doctest::Approx(unc[i] / (1.0 + unc[i])).epsilon(1e-12));
    }
}

TEST_CASE("decode_heads grid for the full-scale feature map") {
    Rng rng(2);
    ParamStore store;
    init_uld_params(store, 8, 4, rng);
    Tape t;
    const HeadOutputs heads = make_heads(t, store, random_array({8, 18, 18}, rng), 4);
    CHECK(heads.grid_h == 36);
    CHECK(heads.grid_w == 36);
}

TEST_CASE("soft_argmax: delta, uniform and symmetric mixtures") {
    Array onehot({7, 7});
    onehot.at(5, 3) = 1.0;  // row 5, column 3
    auto [x, y] = soft_argmax(onehot);
    CHECK(x == doctest::Approx(3.0));
    CHECK(y == doctest::Approx(5.0));

    Array uniform({4, 4}, 1.0 / 16.0);
    auto [ux, uy] = soft_argmax(uniform);
    CHECK(ux == doctest::Approx(1.5));
    CHECK(uy == doctest::Approx(1.5));

    Array peaks({3, 3});
    peaks.at(0, 0) = 0.5;
    peaks.at(2, 2) = 0.5;
    auto [px, py] = soft_argmax(peaks);
    CHECK(px == doctest::Approx(1.0));
    CHECK(py == doctest::Approx(1.0));
}

TEST_CASE("soft_argmax returns the symmetry center of symmetric maps") {
    Rng rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 5;
        Array half({n, n});
        for (std::size_t yy = 0; yy < n; ++yy)
            for (std::size_t xx = 0; xx < n; ++xx) half.at(yy, xx) = rng.uniform(0.0, 1.0);
        // Symmetrize around the center and normalize.
        Array sym({n, n});
        double total = 0.0;
        for (std::size_t yy = 0; yy < n; ++yy)
            for (std::size_t xx = 0; xx < n; ++xx) {
                sym.at(yy, xx) = half.at(yy, xx) + half.at(n - 1 - yy, n - 1 - xx);
                total += sym.at(yy, xx);
            }
        for (std::size_t i = 0; i < sym.size(); ++i) sym[i] /= total;
        auto [sx, sy] = soft_argmax(sym);
        CHECK(sx == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(sy == doctest::Approx(2.0).epsilon(1e-9));
    }
}

TEST_CASE("soft_argmax rejects non-normalized input") {
    CHECK_THROWS_AS(soft_argmax(Array({3, 3}, 1.0)), ContractError);
}

TEST_CASE("read_sigma samples constants, grid points and midpoints") {
    Array unc({4, 4, 4}, 0.0);
    for (std::size_t i = 0; i < 16; ++i) {
        unc[0 * 16 + i] = 2.5;                           // constant channel
        unc[1 * 16 + i] = static_cast<double>(i % 4);    // column ramp
        unc[2 * 16 + i] = 1.0 + 2.0 * ((i % 4) == 1);    // cells of 1 and 3
        unc[3 * 16 + i] = 0.5;
    }
    const auto s = read_sigma(unc, {1.0, 2.0}, {0.5, 0.0});
    CHECK(s[0] == doctest::Approx(2.5));            // constant regardless of location
    CHECK(s[1] == doctest::Approx(1.0));            // exact cell value on the grid
    CHECK(s[2] == doctest::Approx(2.0));            // midpoint between 1 and 3
    CHECK(s[3] == doctest::Approx(0.5));
}

TEST_CASE("read_sigma clamps out-of-grid corners to the border") {
    Array unc({4, 3, 3}, 1.0);
    for (std::size_t x = 0; x < 3; ++x) unc.at(0, 0, x) = static_cast<double>(x + 1);
    const auto s = read_sigma(unc, {-2.0, -1.0}, {5.0, 5.0});
    CHECK(s[0] == doctest::Approx(1.0));  // clamped to column 0
    CHECK(s[2] == doctest::Approx(1.0));
}

TEST_CASE("uncertainty_loss closed forms") {
    const std::array<double, 4> zeros = {0, 0, 0, 0};
    const std::array<double, 4> ones = {1, 1, 1, 1};
    CHECK(uncertainty_loss(zeros, ones, zeros) == doctest::Approx(0.0));

    // Each coordinate off by two at unit sigma: 4/2 + 0 = 2 per coordinate.
    const std::array<double, 4> mu = {2, 2, 2, 2};
    CHECK(uncertainty_loss(mu, ones, zeros) == doctest::Approx(2.0));

    // Stationarity in sigma at |delta| and value 1/2 + log(delta^2)/2 there.
    const double delta = 1.7;
    const std::array<double, 4> md = {delta, delta, delta, delta};
    auto at_sigma = [&](double s) {
        return uncertainty_loss(md, {s, s, s, s}, zeros);
    };
    const double at_opt = at_sigma(delta);
    CHECK(at_opt == doctest::Approx(0.5 + std::log(delta * delta) / 2.0).epsilon(1e-12));
    const double h = 1e-5;
    CHECK(std::abs(at_sigma(delta + h) - at_sigma(delta - h)) / (2 * h) <= 1e-4);
    // Derivative changes sign across the stationary point.
    CHECK(at_sigma(delta - 0.2) > at_opt);
    CHECK(at_sigma(delta + 0.2) > at_opt);
}

TEST_CASE("uncertainty_loss monotonicity properties") {
    const std::array<double, 4> zeros = {0, 0, 0, 0};
    // Delta = 0: strictly increasing in sigma.
    double prev = uncertainty_loss(zeros, {0.2, 0.2, 0.2, 0.2}, zeros);
    for (double s = 0.4; s < 3.0; s += 0.3) {
        const double cur = uncertainty_loss(zeros, {s, s, s, s}, zeros);
        CHECK(cur > prev);
        prev = cur;
    }
    // Fixed sigma: moving the target away never decreases the loss.
    const std::array<double, 4> sig = {0.9, 0.9, 0.9, 0.9};
    double prev_d = uncertainty_loss(zeros, sig, zeros);
    for (double d = 0.25; d < 3.0; d += 0.25) {
        const double cur = uncertainty_loss(zeros, sig, {d, d, d, d});
        CHECK(cur >= prev_d);
        prev_d = cur;
    }
}

TEST_CASE("uncertainty_loss rejects nonpositive sigma") {
    const std::array<double, 4> z = {0, 0, 0, 0};
    CHECK_THROWS_AS(uncertainty_loss(z, {1, 1, 0.0, 1}, z), DomainError);
    CHECK_THROWS_AS(uncertainty_loss(z, {1, -0.5, 1, 1}, z), DomainError);
}

TEST_CASE("full form differs by exactly log(2 pi)/2 with identical gradients") {
    Rng rng(5);
    const double half_log_2pi = std::log(2.0 * 3.14159265358979323846) / 2.0;
    for (int trial = 0; trial < 20; ++trial) {
        std::array<double, 4> mu{}, sigma{}, gt{};
        for (int i = 0; i < 4; ++i) {
            mu[i] = rng.uniform(-2, 2);
            sigma[i] = rng.uniform(0.1, 3.0);
            gt[i] = rng.uniform(-2, 2);
        }
        const double diff = uncertainty_loss_full(mu, sigma, gt) - uncertainty_loss(mu, sigma, gt);
        CHECK(diff == doctest::Approx(half_log_2pi).epsilon(1e-12));

        // Gradients agree elementwise: the offset is constant.
        const double h = 1e-6;
        for (int i = 0; i < 4; ++i) {
            auto mu_p = mu, mu_m = mu;
            mu_p[i] += h;
            mu_m[i] -= h;
            const double g_simple =
                (uncertainty_loss(mu_p, sigma, gt) - uncertainty_loss(mu_m, sigma, gt)) / (2 * h);
            const double g_full = (uncertainty_loss_full(mu_p, sigma, gt) -
                                   uncertainty_loss_full(mu_m, sigma, gt)) /
                                  (2 * h);
            CHECK(g_simple == doctest::Approx(g_full).epsilon(1e-9));
        }
    }

    const std::array<double, 4> z = {0, 0, 0, 0};
    const std::array<double, 4> ones = {1, 1, 1, 1};
    CHECK(uncertainty_loss_full(z, ones, z) == doctest::Approx(0.9189385).epsilon(1e-6));
}

TEST_CASE("grad_check on the uncertainty loss at random points") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        Array mu({4}), sigma({4}), gt({4});
        for (std::size_t i = 0; i < 4; ++i) {
            mu[i] = rng.uniform(-2, 2);
            sigma[i] = rng.uniform(0.3, 3.0);
            gt[i] = rng.uniform(-2, 2);
        }
        std::array<double, 4> gt_a = {gt[0], gt[1], gt[2], gt[3]};
        auto fn = [&](Tape& t, const std::vector<Var>& xs) {
            std::array<Var, 4> mu_v, sig_v;
            for (std::size_t i = 0; i < 4; ++i) {
                mu_v[i] = ad::element(t, xs[0], i);
                sig_v[i] = ad::element(t, xs[1], i);
            }
            return uncertainty_loss(t, mu_v, sig_v, gt_a);
        };
        const GradCheckReport r = grad_check(fn, {mu, sigma});
        CHECK(r.max_rel_error <= 1e-6);
    }
}

TEST_CASE("grad_check of the tape uncertainty loss against Eq-style closed form point") {
    // mu = 1, sigma = 2, target 0 on every coordinate.
    Array mu({4}, 1.0), sigma({4}, 2.0);
    auto fn = [](Tape& t, const std::vector<Var>& xs) {
        std::array<Var, 4> mu_v, sig_v;
        for (std::size_t i = 0; i < 4; ++i) {
            mu_v[i] = ad::element(t, xs[0], i);
            sig_v[i] = ad::element(t, xs[1], i);
        }
        return uncertainty_loss(t, mu_v, sig_v, {0, 0, 0, 0});
    };
    const GradCheckReport r = grad_check(fn, {mu, sigma});
    CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("extract_corners ties sigma reads to the soft-argmax locations") {
    Rng rng(7);
    ParamStore store;
    init_uld_params(store, 8, 4, rng);
    const Array feat = random_array({8, 4, 4}, rng);
    Tape t;
    const HeadOutputs heads = make_heads(t, store, feat, 4);
    const CornerVars corners = extract_corners(t, heads);

    // Plain-path oracle: soft_argmax + read_sigma on the stored maps.
    const Array& prob = t.value(heads.prob_map);
    const std::size_t hw = heads.grid_h * heads.grid_w;
    Array tl({heads.grid_h, heads.grid_w}), br({heads.grid_h, heads.grid_w});
    for (std::size_t i = 0; i < hw; ++i) {
        tl[i] = prob[i];
        br[i] = prob[hw + i];
    }
    const auto [x1, y1] = soft_argmax(tl);
    const auto [x2, y2] = soft_argmax(br);
    CHECK(t.scalar(corners.box.x_tl) == doctest::Approx(x1).epsilon(1e-12));
    CHECK(t.scalar(corners.box.y_br) == doctest::Approx(y2).epsilon(1e-12));

    const auto sig = read_sigma(t.value(heads.unc_map), {x1, y1}, {x2, y2});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(t.scalar(corners.sigma[i]) == doctest::Approx(sig[i]).epsilon(1e-9));
    }
}
