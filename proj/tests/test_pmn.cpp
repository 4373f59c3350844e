#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "utrack/ad.hpp"
#include "utrack/error.hpp"
#include "utrack/grad_check.hpp"
#include "utrack/ops.hpp"
#include "utrack/pmn.hpp"
#include "utrack/rng.hpp"

using namespace utrack;

namespace {

Array random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

Prototype proto_of(Array v) { return Prototype{std::move(v), 0, 1.0}; }

TargetMask all_live_mask(std::size_t h, std::size_t w) {
    return TargetMask{Array({1, h, w}, 0.0)};
}

}  // namespace

TEST_CASE("extract_prototype pools per channel") {
    Array constant({4, 3, 3}, 0.0);
    for (std::size_t i = 0; i < constant.size(); ++i) constant[i] = 1.75;
    const Prototype p = extract_prototype(constant);
    REQUIRE(p.vector.shape() == std::vector<std::size_t>{4});
    for (std::size_t i = 0; i < 4; ++i) CHECK(p.vector[i] == doctest::Approx(1.75));

    Rng rng(1);
    const Array single = random_array({5, 1, 1}, rng);
    const Prototype ps = extract_prototype(single);
    for (std::size_t i = 0; i < 5; ++i) CHECK(ps.vector[i] == doctest::Approx(single[i]));

    const Array x = random_array({4, 3, 3}, rng);
    const Prototype px = extract_prototype(x);
    for (std::size_t c = 0; c < 4; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 9; ++i) acc += x[c * 9 + i];
        CHECK(std::abs(px.vector[c] - acc / 9.0) <= 1e-12);
    }
}

TEST_CASE("confidence_inversion range, shape and monotonicity") {
    Rng rng(2);
    ParamStore store;
    init_pmn_params(store, 6, 4, rng);

    const Array u = random_array({4, 6, 6}, rng, 0.0, 1.0);
    const Array fc = confidence_inversion(u, store);
    REQUIRE(fc.shape() == std::vector<std::size_t>{1, 6, 6});
    for (std::size_t i = 0; i < fc.size(); ++i) {
        CHECK(fc[i] > 0.0);
        CHECK(fc[i] < 1.0);
    }

    // Fixed positive 1x1 kernel, zero bias: raising any uncertainty entry
    // strictly lowers the matching output.
    ParamStore mono;
    mono.set("pmn.cim.w", Array({1, 4, 1, 1}, {0.5, 1.0, 0.25, 0.75}));
    mono.set("pmn.cim.b", Array({1}));
    Array base({4, 3, 3}, 0.4);
    const Array out0 = confidence_inversion(base, mono);
    Array bumped = base;
    bumped.at(2, 1, 1) = 0.9;
    const Array out1 = confidence_inversion(bumped, mono);
    CHECK(out1.at(0, 1, 1) < out0.at(0, 1, 1));
    CHECK(out1.at(0, 0, 0) == doctest::Approx(out0.at(0, 0, 0)));

    Array bad = base;
    bad[0] = 1.5;
    CHECK_THROWS_AS(confidence_inversion(bad, mono), ContractError);
}

TEST_CASE("fuse_features projects back to C channels") {
    Rng rng(3);
    const std::size_t c = 5;
    ParamStore store;
    init_pmn_params(store, c, 4, rng);

    const Array fc = random_array({1, 4, 4}, rng, 0.0, 1.0);
    const Array fs = random_array({c, 4, 4}, rng);

    Tape t;
    ParamVars p(t, store);
    Var fused = fuse_features(t, t.leaf(fc), t.leaf(fs), p);
    REQUIRE(t.value(fused).shape() == std::vector<std::size_t>{c, 4, 4});

    // Direct concatenate-then-project oracle.
    const Array& w = store.at("pmn.fuse.w");
    const Array& b = store.at("pmn.fuse.b");
    for (std::size_t oc = 0; oc < c; ++oc) {
        for (std::size_t i = 0; i < 16; ++i) {
            double acc = b[oc];
            for (std::size_t ic = 0; ic < c; ++ic) acc += w[oc * (c + 1) + ic] * fs[ic * 16 + i];
            acc += w[oc * (c + 1) + c] * fc[i];
            CHECK(t.value(fused)[oc * 16 + i] == doctest::Approx(acc).epsilon(1e-12));
        }
    }

    // Identity-selecting kernel passes the first C input channels through.
    ParamStore ident;
    Array wi({c, c + 1, 1, 1});
    for (std::size_t i = 0; i < c; ++i) wi[i * (c + 1) + i] = 1.0;
    ident.set("pmn.fuse.w", wi);
    ident.set("pmn.fuse.b", Array({c}));
    Tape t2;
    ParamVars p2(t2, ident);
    Var same = fuse_features(t2, t2.leaf(fc), t2.leaf(fs), p2);
    CHECK(t2.value(same).bit_equal(fs));
}

TEST_CASE("fuse_features rejects mismatched spatial extents") {
    Rng rng(4);
    ParamStore store;
    init_pmn_params(store, 3, 4, rng);
    Tape t;
    ParamVars p(t, store);
    Var fc = t.leaf(random_array({1, 4, 4}, rng));
    Var fs = t.leaf(random_array({3, 5, 5}, rng));
    CHECK_THROWS_AS(fuse_features(t, fc, fs, p), ShapeError);
}

TEST_CASE("reweight_prototype trivial cases") {
    // Constant features, whole map live: the output is that constant column.
    Array f({3, 2, 2});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) f[c * 4 + i] = 0.5 + static_cast<double>(c);
    Array pvec({3}, {1.0, -0.5, 0.25});
    const Array out = reweight_prototype(pvec, f, all_live_mask(2, 2));
    for (std::size_t c = 0; c < 3; ++c) CHECK(out[c] == doctest::Approx(0.5 + c).epsilon(1e-12));

    // Exactly one live pixel: the output is that column.
    Rng rng(5);
    Array fr = random_array({3, 2, 2}, rng);
    TargetMask single{Array({1, 2, 2}, kMaskedOut)};
    single.values.at(0, 1, 0) = 0.0;
    const Array picked = reweight_prototype(pvec, fr, single);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(picked[c] == doctest::Approx(fr.at(c, 1, 0)).epsilon(1e-12));
    }
}

TEST_CASE("reweight_prototype equals the explicit loop oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const Array f = random_array({3, 4, 4}, rng);
        const Array pv = random_array({3}, rng);
        TargetMask mask{Array({1, 4, 4})};
        for (std::size_t i = 0; i < 16; ++i) {
            mask.values[i] = rng.uniform() < 0.4 ? kMaskedOut : 0.0;
        }
        mask.values[rng.index(16)] = 0.0;

        // Explicit softmax-weighted sum over live columns.
        std::vector<double> scores(16, 0.0);
        double mx = -1e300;
        for (std::size_t i = 0; i < 16; ++i) {
            if (mask.values[i] == kMaskedOut) continue;
            for (std::size_t c = 0; c < 3; ++c) scores[i] += pv[c] * f[c * 16 + i];
            mx = std::max(mx, scores[i]);
        }
        double denom = 0.0;
        std::vector<double> w(16, 0.0);
        for (std::size_t i = 0; i < 16; ++i) {
            if (mask.values[i] == kMaskedOut) continue;
            w[i] = std::exp(scores[i] - mx);
            denom += w[i];
        }
        Array expect({3});
        for (std::size_t i = 0; i < 16; ++i) {
            if (w[i] == 0.0) continue;
            for (std::size_t c = 0; c < 3; ++c) expect[c] += (w[i] / denom) * f[c * 16 + i];
        }
        const Array got = reweight_prototype(pv, f, mask);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(got[c] == doctest::Approx(expect[c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("reweight_prototype output stays in the convex hull of live columns") {
    Rng rng(7);
    const Array f = random_array({4, 3, 3}, rng);
    const Array pv = random_array({4}, rng);
    TargetMask mask{Array({1, 3, 3}, kMaskedOut)};
    mask.values[1] = 0.0;
    mask.values[4] = 0.0;
    mask.values[7] = 0.0;
    const Array out = reweight_prototype(pv, f, mask);
    for (std::size_t c = 0; c < 4; ++c) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t i : {1, 4, 7}) {
            lo = std::min(lo, f[c * 9 + i]);
            hi = std::max(hi, f[c * 9 + i]);
        }
        CHECK(out[c] >= lo - 1e-12);
        CHECK(out[c] <= hi + 1e-12);
    }
}

TEST_CASE("cosine similarity: bounds and scale invariance") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const Array a = random_array({6}, rng);
        const Array b = random_array({6}, rng);
        const double s = cosine_similarity(a, b);
        CHECK(s >= -1.0 - 1e-12);
        CHECK(s <= 1.0 + 1e-12);
        const double sa = rng.uniform(0.1, 10.0), sb = rng.uniform(0.1, 10.0);
        CHECK(std::abs(cosine_similarity(ew_scale(a, sa), ew_scale(b, sb)) - s) <= 1e-12);
    }
    const Array v = random_array({5}, rng);
    CHECK(cosine_similarity(v, v) == doctest::Approx(1.0));
}

TEST_CASE("topk selection equals a brute-force sort, ties prefer newer") {
    Rng rng(9);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.index(8);
        PrototypeBank bank(8);
        const Array q = random_array({4}, rng);
        std::vector<double> sims;
        for (std::size_t i = 0; i < n; ++i) {
            Array v = random_array({4}, rng);
            sims.push_back(cosine_similarity(q, v));
            bank.insert(proto_of(std::move(v)));
        }
        const std::size_t k = 1 + rng.index(4);
        const auto got = topk_by_similarity(q, bank, k);
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (sims[a] != sims[b]) return sims[a] > sims[b];
            return a > b;
        });
        order.resize(std::min(k, n));
        CHECK(got == order);
    }

    // Exact ties: two identical entries, the newer index must come first.
    PrototypeBank bank(4);
    Array v({3}, {1.0, 0.0, 0.0});
    bank.insert(proto_of(v));
    bank.insert(proto_of(v));
    const auto sel = topk_by_similarity(v, bank, 2);
    REQUIRE(sel.size() == 2);
    CHECK(sel[0] == 1);
    CHECK(sel[1] == 0);
}

TEST_CASE("memory_read similarity extremes and empty-bank signal") {
    Rng rng(10);
    ParamStore store;
    init_pmn_params(store, 4, 4, rng);

    const Array q = random_array({4}, rng);
    PrototypeBank same(6);
    for (int i = 0; i < 3; ++i) same.insert(proto_of(q));
    for (std::size_t i = 0; i < same.size(); ++i) {
        CHECK(cosine_similarity(q, same.entry(i).vector) == doctest::Approx(1.0));
    }

    Array orth({4}, {0.0, 0.0, 0.0, 0.0});
    // Construct a vector orthogonal to q.
    orth[0] = -q[1];
    orth[1] = q[0];
    CHECK(cosine_similarity(q, orth) == doctest::Approx(0.0).epsilon(1e-12));

    Tape t;
    ParamVars p(t, store);
    PrototypeBank empty(6);
    CHECK_THROWS_AS(memory_read(t, t.leaf(q), empty, 3, p), ContractError);
}

TEST_CASE("memory_read aggregates with a residual; verbatim value comes from the query") {
    Rng rng(11);
    const std::size_t c = 5;
    ParamStore store;
    init_pmn_params(store, c, 4, rng);
    PrototypeBank bank(6);
    for (int i = 0; i < 6; ++i) bank.insert(proto_of(random_array({c}, rng)));
    const Array q = random_array({c}, rng);

    Tape t;
    ParamVars p(t, store);
    const MemoryReadResult r = memory_read(t, t.leaf(q), bank, 3, p, false);
    CHECK(r.selected.size() == 3);

    // With the value projected from the query, the attention output reduces
    // to q * Wv exactly (the softmax weights sum to one), so the result is
    // q + q * Wv whatever the bank holds.
    const Array& wv = store.at("pmn.attn.wv");
    for (std::size_t j = 0; j < c; ++j) {
        double acc = q[j];
        for (std::size_t i = 0; i < c; ++i) acc += q[i] * wv.at(i, j);
        CHECK(t.scalar(ad::element(t, r.aggregated, j)) == doctest::Approx(acc).epsilon(1e-9));
    }

    // The group variant actually mixes the selected bank entries.
    Tape t2;
    ParamVars p2(t2, store);
    const MemoryReadResult rg = memory_read(t2, t2.leaf(q), bank, 3, p2, true);
    bool differs = false;
    for (std::size_t j = 0; j < c; ++j) {
        const double a = t.scalar(ad::element(t, r.aggregated, j));
        const double b = t2.scalar(ad::element(t2, rg.aggregated, j));
        if (std::abs(a - b) > 1e-9) differs = true;
    }
    CHECK(differs);
}

TEST_CASE("confidence_score softmax properties and hand evaluation") {
    // Zero weights and biases: both logits vanish, p = 1/2.
    ParamStore zero;
    zero.set("pmn.mlp.w1", Array({3, 2}));
    zero.set("pmn.mlp.b1", Array({2}));
    zero.set("pmn.mlp.w2", Array({2, 2}));
    zero.set("pmn.mlp.b2", Array({2}));
    Tape t;
    ParamVars p(t, zero);
    Var score = confidence_score(t, t.leaf(Array({3}, {1.0, -2.0, 0.5})), p);
    CHECK(t.scalar(score) == doctest::Approx(0.5));

    // Hand-set single-unit network.
    ParamStore one;
    one.set("pmn.mlp.w1", Array({1, 1}, {2.0}));
    one.set("pmn.mlp.b1", Array({1}, {0.5}));
    one.set("pmn.mlp.w2", Array({1, 2}, {1.0, -1.0}));
    one.set("pmn.mlp.b2", Array({2}, {0.1, -0.1}));
    Tape t2;
    ParamVars p2(t2, one);
    const double x = 0.8;
    Var s2 = confidence_score(t2, t2.leaf(Array({1}, {x})), p2);
    const double h = std::max(0.0, 2.0 * x + 0.5);
    const double l0 = h + 0.1, l1 = -h - 0.1;
    const double e0 = std::exp(l0 - std::max(l0, l1)), e1 = std::exp(l1 - std::max(l0, l1));
    CHECK(t2.scalar(s2) == doctest::Approx(e1 / (e0 + e1)).epsilon(1e-12));

    // The two class probabilities always sum to one.
    Rng rng(12);
    ParamStore store;
    init_pmn_params(store, 4, 8, rng);
    Tape t3;
    ParamVars p3(t3, store);
    Var sc = confidence_score(t3, t3.leaf(random_array({4}, rng)), p3);
    const double pv = t3.scalar(sc);
    CHECK(pv >= 0.0);
    CHECK(pv <= 1.0);
}

TEST_CASE("prototype_loss closed forms and positivity") {
    CHECK(prototype_loss({1.0}, {1}) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(prototype_loss({0.5}, {1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(prototype_loss({0.5}, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(prototype_loss({0.8, 0.3}, {1, 0}) ==
          doctest::Approx(-0.5 * (std::log(0.8) + std::log(0.7))).epsilon(1e-12));

    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> ps;
        std::vector<int> ys;
        for (int i = 0; i < 5; ++i) {
            ps.push_back(rng.uniform(0.0, 1.0));
            ys.push_back(rng.bernoulli(0.5) ? 1 : 0);
        }
        CHECK(prototype_loss(ps, ys) >= 0.0);
    }

    CHECK_THROWS_AS(prototype_loss({0.5, 0.5}, {1}), ShapeError);
}

TEST_CASE("prototype_loss gradient against finite differences") {
    Rng rng(14);
    const std::vector<int> labels = {1, 0, 1, 1, 0};
    auto fn = [&](Tape& t, const std::vector<Var>& xs) {
        std::vector<Var> ps;
        for (std::size_t i = 0; i < labels.size(); ++i) ps.push_back(ad::element(t, xs[0], i));
        return prototype_loss(t, ps, labels);
    };
    for (int trial = 0; trial < 20; ++trial) {
        Array p({5});
        for (std::size_t i = 0; i < 5; ++i) p[i] = rng.uniform(0.05, 0.95);
        const GradCheckReport r = grad_check(fn, {p});
        CHECK(r.max_rel_error <= 1e-6);
    }
}

TEST_CASE("memory_update: strict threshold, FIFO order, immutability") {
    Rng rng(15);
    PrototypeBank bank(6);

    // Seven accepted insertions: entry 0 leaves, order preserved.
    for (int i = 0; i < 7; ++i) {
        Array v({2}, {static_cast<double>(i), 1.0});
        bank = memory_update(std::move(bank), Prototype{v, i, 0.9}, 0.9, 0.5);
    }
    REQUIRE(bank.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(bank.entry(i).vector[0] == doctest::Approx(static_cast<double>(i + 1)));
        CHECK(bank.entry(i).source_frame == static_cast<long>(i + 1));
    }

    // Score exactly at the threshold: no insertion.
    PrototypeBank before = bank;
    bank = memory_update(std::move(bank), proto_of(random_array({2}, rng)), 0.5, 0.5);
    REQUIRE(bank.size() == before.size());
    for (std::size_t i = 0; i < bank.size(); ++i) {
        CHECK(bank.entry(i).vector.bit_equal(before.entry(i).vector));
    }

    // Below threshold: bitwise unchanged too.
    bank = memory_update(std::move(bank), proto_of(random_array({2}, rng)), 0.2, 0.5);
    for (std::size_t i = 0; i < bank.size(); ++i) {
        CHECK(bank.entry(i).vector.bit_equal(before.entry(i).vector));
    }
}

TEST_CASE("memory_update never exceeds capacity or reorders survivors") {
    Rng rng(16);
    PrototypeBank bank(4);
    std::vector<long> frames;
    for (int i = 0; i < 40; ++i) {
        const double p = rng.uniform(0.0, 1.0);
        const bool expect_insert = p > 0.5;
        std::vector<long> prev;
        for (std::size_t j = 0; j < bank.size(); ++j) prev.push_back(bank.entry(j).source_frame);
        bank = memory_update(std::move(bank), Prototype{random_array({3}, rng), i, p}, p, 0.5);
        CHECK(bank.size() <= 4);
        std::vector<long> cur;
        for (std::size_t j = 0; j < bank.size(); ++j) cur.push_back(bank.entry(j).source_frame);
        if (expect_insert) {
            CHECK(cur.back() == i);
            // Survivors keep their relative order.
            const std::size_t drop = prev.size() == 4 ? 1 : 0;
            for (std::size_t j = drop; j < prev.size(); ++j) CHECK(cur[j - drop] == prev[j]);
        } else {
            CHECK(cur == prev);
        }
    }
}

TEST_CASE("reweight gradient flows through features and prototype") {
    Rng rng(17);
    TargetMask mask{Array({1, 3, 3})};
    for (std::size_t i = 0; i < 9; ++i) mask.values[i] = i % 2 ? kMaskedOut : 0.0;
    auto fn = [&](Tape& t, const std::vector<Var>& xs) {
        Var out = reweight_prototype(t, xs[0], xs[1], mask);
        return ad::sum(t, ad::square(t, out));
    };
    const GradCheckReport r =
        grad_check(fn, {random_array({3}, rng), random_array({3, 3, 3}, rng)});
    CHECK(r.max_rel_error <= 1e-6);
}
