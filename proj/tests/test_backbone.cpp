#include "tokenhalt/backbone.hpp"
#include "tokenhalt/params.hpp"
#include "tokenhalt/scene.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

using namespace tokenhalt;
using ad::Var;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

// Direct per-row evaluation of weighted softmax attention inside one group.
Tensor reference_attention(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<double>* w,
                           const RegionGroups& groups, int heads, double eps) {
    const std::size_t n = q.dim(0), d = q.dim(1), dh = d / static_cast<std::size_t>(heads);
    Tensor out({n, d});
    for (const auto& g : groups.members)
        for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h)
            for (auto i : g) {
                std::vector<double> num(dh, 0.0), logit;
                double den = w ? eps : 0.0, top = -1e300;
                for (auto j : g) {
                    double p = 0;
                    for (std::size_t c = 0; c < dh; ++c) p += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                    logit.push_back(p / std::sqrt(static_cast<double>(dh)));
                    if (!w || (*w)[j] > 0) top = std::max(top, logit.back());
                }
                std::size_t at = 0;
                for (auto j : g) {
                    const double a = std::exp(logit[at++] - top) * (w ? (*w)[j] : 1.0);
                    den += a;
                    for (std::size_t c = 0; c < dh; ++c) num[c] += a * v.at(j, h * dh + c);
                }
                for (std::size_t c = 0; c < dh; ++c) out.at(i, h * dh + c) = num[c] / den;
            }
    return out;
}

struct Fixture {
    LayerSpec spec;
    ParamStore store;
    AttentionLayerWeights w;
    std::vector<std::array<int, 2>> coords;
    RegionLayout layout;
    Tensor feats;

    explicit Fixture(std::uint64_t seed, int region_size = 4) {
        spec.d_model = 8;
        spec.heads = 2;
        spec.d_ff = 12;
        spec.pe_hidden = 4;
        spec.region_size = region_size;
        Rng rng(seed);
        w = AttentionLayerWeights::create(store, "l1", spec, rng);
        coords = {{0, 0}, {1, 2}, {3, 3}, {2, 1}, {5, 1}, {6, 3}, {9, 9}, {10, 8}};
        layout = make_layout(coords, region_size, false);
        feats = random_tensor({coords.size(), 8}, rng);
    }
};

}  // namespace

TEST_CASE("region attention matches a dense reference") {
    Rng rng(5);
    const std::size_t n = 7, d = 6;
    const Tensor q = random_tensor({n, d}, rng), k = random_tensor({n, d}, rng), v = random_tensor({n, d}, rng);
    const RegionGroups groups = group_by_region(std::vector<int>{0, 0, 0, 1, 1, 1, 1});
    const Tensor plain =
        region_attention(ad::constant(q), ad::constant(k), ad::constant(v), nullptr, groups, 2).value();
    CHECK(max_abs_diff(plain, reference_attention(q, k, v, nullptr, groups, 2, 0.0)) < 1e-10);

    const std::vector<double> scores{0.3, 0.9, 0.6, 1.0, 0.5, 0.25, 0.0};
    const Var sv = ad::constant(Tensor(Shape{n}, scores));
    const Tensor weighted = region_attention(ad::constant(q), ad::constant(k), ad::constant(v), &sv, groups, 2).value();
    CHECK(max_abs_diff(weighted, reference_attention(q, k, v, &scores, groups, 2, kAttentionEps)) < 1e-10);
}

TEST_CASE("single-token region returns its value") {
    Rng rng(6);
    const Tensor q = random_tensor({1, 4}, rng), k = random_tensor({1, 4}, rng), v = random_tensor({1, 4}, rng);
    const RegionGroups groups = group_by_region(std::vector<int>{3});
    const Tensor out = region_attention(ad::constant(q), ad::constant(k), ad::constant(v), nullptr, groups, 2).value();
    CHECK(max_abs_diff(out, v) < 1e-15);
}

TEST_CASE("uniform scores reproduce unweighted attention") {
    Fixture fx(7);
    const Var f = ad::constant(fx.feats);
    const Tensor plain = attention_branch(f, nullptr, fx.w, fx.layout, fx.spec).value();
    for (double c : {1.0, 2.5, 10.0}) {
        const Var s = ad::constant(Tensor(Shape{fx.coords.size()}, c));
        const Tensor weighted = attention_branch(f, &s, fx.w, fx.layout, fx.spec).value();
        CHECK(max_abs_diff(plain, weighted) < 1e-8);
    }
    const Var ones = ad::constant(Tensor(Shape{fx.coords.size()}, 1.0));
    CHECK(max_abs_diff(sra(f, fx.w, fx.layout, fx.spec).value(), wsa(f, ones, fx.w, fx.layout, fx.spec).value()) < 1e-8);
}

TEST_CASE("weighted attention is scale invariant in the scores") {
    Fixture fx(8);
    Rng rng(1);
    const Var f = ad::constant(fx.feats);
    const Tensor s = random_tensor({fx.coords.size()}, rng, 0.1, 1.0);
    Tensor s2 = s;
    for (auto& x : s2.vec()) x *= 4.0;
    const Var a = ad::constant(s), b = ad::constant(s2);
    CHECK(max_abs_diff(attention_branch(f, &a, fx.w, fx.layout, fx.spec).value(),
                       attention_branch(f, &b, fx.w, fx.layout, fx.spec).value()) < 1e-8);
}

TEST_CASE("zero-scored token is excluded from other rows") {
    Rng rng(9);
    const std::size_t n = 4, d = 4;
    const Tensor q = random_tensor({n, d}, rng), k = random_tensor({n, d}, rng), v = random_tensor({n, d}, rng);
    const Var s = ad::constant(Tensor::from({1.0, 0.5, 0.25, 0.0}));
    const RegionGroups all = group_by_region(std::vector<int>{0, 0, 0, 0});
    const Tensor full = region_attention(ad::constant(q), ad::constant(k), ad::constant(v), &s, all, 1).value();
    const std::vector<double> sw{1.0, 0.5, 0.25, 0.0};
    CHECK(max_abs_diff(full, reference_attention(q, k, v, &sw, all, 1, kAttentionEps)) < 1e-10);

    auto drop = [](const Tensor& t) {
        Tensor r({3, t.dim(1)});
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t c = 0; c < t.dim(1); ++c) r.at(i, c) = t.at(i, c);
        return r;
    };
    const Var s3 = ad::constant(Tensor::from({1.0, 0.5, 0.25}));
    const RegionGroups three = group_by_region(std::vector<int>{0, 0, 0});
    const Tensor reduced =
        region_attention(ad::constant(drop(q)), ad::constant(drop(k)), ad::constant(drop(v)), &s3, three, 1).value();
    CHECK(max_abs_diff(drop(full), reduced) == 0.0);
}

TEST_CASE("all-zero scores give finite near-zero attention") {
    Rng rng(10);
    const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
    const Var s = ad::constant(Tensor(Shape{3}, 0.0));
    const RegionGroups g = group_by_region(std::vector<int>{0, 0, 0});
    const Tensor out = region_attention(ad::constant(q), ad::constant(k), ad::constant(v), &s, g, 1).value();
    CHECK(out.all_finite());
    for (double x : out.vec()) CHECK(x == 0.0);
}

TEST_CASE("zero value projection and MLP leave tokens unchanged") {
    Fixture fx(11);
    fx.w.w_v.mutable_value().fill(0.0);
    fx.w.mlp_w2.mutable_value().fill(0.0);
    fx.w.mlp_b2.mutable_value().fill(0.0);
    const Tensor out = sra(ad::constant(fx.feats), fx.w, fx.layout, fx.spec).value();
    CHECK(max_abs_diff(out, fx.feats) == 0.0);
}

TEST_CASE("positional encoding") {
    Fixture fx(12, 5);
    const auto layout = make_layout(std::vector<std::array<int, 2>>{{2, 2}, {7, 12}, {3, 1}}, 5, false);
    // (2,2) and (7,12) share the within-region offset; (2,2) is the region center
    CHECK(layout.offsets.at(0, 0) == 0.0);
    CHECK(layout.offsets.at(0, 1) == 0.0);
    const Tensor pe = positional_encoding(layout.offsets, fx.w).value();
    for (std::size_t c = 0; c < 8; ++c) CHECK(pe.at(0, c) == pe.at(1, c));

    for (auto* v : {&fx.w.pe_w1, &fx.w.pe_b1, &fx.w.pe_w2, &fx.w.pe_b2}) v->mutable_value().fill(0.0);
    const Tensor zero = positional_encoding(layout.offsets, fx.w).value();
    for (std::size_t c = 0; c < 8; ++c) CHECK(zero.at(0, c) == 0.0);

    Rng rng(3);
    const double err = ad::grad_check(
        [&](std::span<const Var> in) {
            AttentionLayerWeights w = fx.w;
            w.pe_w1 = in[0];
            w.pe_b1 = in[1];
            w.pe_w2 = in[2];
            return ad::sum(ad::square(positional_encoding(layout.offsets, w)));
        },
        {random_tensor({2, 4}, rng), random_tensor({4}, rng, 0.1, 0.5), random_tensor({4, 8}, rng)});
    CHECK(err < 1e-4);
}

TEST_CASE("cross-region isolation") {
    Fixture fx(13);
    const Tensor base = sra(ad::constant(fx.feats), fx.w, fx.layout, fx.spec).value();
    Tensor perturbed = fx.feats;
    // tokens 6 and 7 form region (2,2)
    for (std::size_t c = 0; c < 8; ++c) perturbed.at(6, c) += 0.3;
    const Tensor out = sra(ad::constant(perturbed), fx.w, fx.layout, fx.spec).value();
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(i, c) == base.at(i, c));
}

TEST_CASE("weighted attention gradients match finite differences") {
    Fixture fx(14);
    Rng rng(2);
    const Tensor scores = random_tensor({fx.coords.size()}, rng, 0.2, 1.0);
    const Tensor probe = random_tensor({fx.coords.size(), 8}, rng);
    const double err = ad::grad_check(
        [&](std::span<const Var> in) {
            AttentionLayerWeights w = fx.w;
            w.w_q = in[2];
            w.w_k = in[3];
            w.w_v = in[4];
            return ad::sum(ad::mul(wsa(in[0], in[1], w, fx.layout, fx.spec), ad::constant(probe)));
        },
        {fx.feats, scores, fx.w.w_q.value(), fx.w.w_k.value(), fx.w.w_v.value()});
    CHECK(err < 1e-4);
}

TEST_CASE("two-layer backbone gradient check") {
    Fixture fx(15);
    ParamStore store2;
    Rng rng(4);
    const AttentionLayerWeights w2 = AttentionLayerWeights::create(store2, "l2", fx.spec, rng);
    const RegionLayout shifted = make_layout(fx.coords, fx.spec.region_size, true);
    const Tensor probe = random_tensor({fx.coords.size(), 8}, rng);
    std::vector<Tensor> inputs{fx.feats};
    for (const auto& e : fx.store.entries()) inputs.push_back(e.var.value());
    for (const auto& e : store2.entries()) inputs.push_back(e.var.value());
    auto unpack = [](std::span<const Var> in, std::size_t at, AttentionLayerWeights w) {
        Var* fields[] = {&w.ln1_gamma, &w.ln1_beta, &w.w_q, &w.w_k, &w.w_v, &w.pe_w1, &w.pe_b1, &w.pe_w2,
                         &w.pe_b2, &w.ln2_gamma, &w.ln2_beta, &w.mlp_w1, &w.mlp_b1, &w.mlp_w2, &w.mlp_b2};
        for (auto* f : fields) *f = in[at++];
        return w;
    };
    const std::size_t per_layer = fx.store.entries().size();
    const double err = ad::grad_check(
        [&](std::span<const Var> in) {
            const auto a = unpack(in, 1, fx.w);
            const auto b = unpack(in, 1 + per_layer, w2);
            const Var h = sra(in[0], a, fx.layout, fx.spec);
            return ad::sum(ad::mul(sra(h, b, shifted, fx.spec), ad::constant(probe)));
        },
        inputs);
    CHECK(err < 1e-4);
}

TEST_CASE("two layers on the golden scene hash stably") {
    const GridSpec grid{40.0, 0.5};
    SceneConfig sc;
    const Scene scene = generate_scene(7, sc);
    TokenSet tokens = voxelize(scene, grid);
    LayerSpec spec;
    ParamStore store;
    Rng rng(42);
    const auto l1 = AttentionLayerWeights::create(store, "l1", spec, rng);
    const auto l2 = AttentionLayerWeights::create(store, "l2", spec, rng);
    const Var embed_w = ad::constant(init_normal({kRawFeatures, 32}, kRawFeatures, rng));
    Var f = ad::matmul(ad::constant(tokens.raw), embed_w);
    f = sra(f, l1, make_layout(tokens.grid_coords, spec.region_size, false), spec);
    f = sra(f, l2, make_layout(tokens.grid_coords, spec.region_size, true), spec);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (double x : f.value().vec()) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof bits);
        h = (h ^ bits) * 0x100000001b3ull;
    }
    MESSAGE("golden layer hash " << h);
    CHECK(h == 8108458441587316648ull);
}
