#include "tokenhalt/backbone.hpp"

#include "tokenhalt/params.hpp"
#include "tokenhalt/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>

namespace tokenhalt {

void LayerSpec::validate() const {
    if (n_layers < 1) throw std::invalid_argument("model.layers must be >= 1");
    if (heads < 1 || d_model < 1 || d_model % heads != 0)
        throw std::invalid_argument("model.d_model must be a positive multiple of model.heads");
    if (d_ff < 1 || pe_hidden < 1) throw std::invalid_argument("model.d_ff and model.pe_hidden must be >= 1");
    if (region_size < 1) throw std::invalid_argument("model.region_size must be >= 1");
}

AttentionLayerWeights AttentionLayerWeights::create(ParamStore& store, const std::string& prefix, const LayerSpec& spec,
                                                    Rng& rng) {
    const auto D = static_cast<std::size_t>(spec.d_model);
    const auto F = static_cast<std::size_t>(spec.d_ff);
    const auto P = static_cast<std::size_t>(spec.pe_hidden);
    AttentionLayerWeights w;
    w.ln1_gamma = store.add(prefix + ".ln1.gamma", Tensor(Shape{D}, 1.0));
    w.ln1_beta = store.add(prefix + ".ln1.beta", Tensor(Shape{D}));
    w.w_q = store.add(prefix + ".w_q", init_normal({D, D}, D, rng));
    w.w_k = store.add(prefix + ".w_k", init_normal({D, D}, D, rng));
    w.w_v = store.add(prefix + ".w_v", init_normal({D, D}, D, rng));
    w.pe_w1 = store.add(prefix + ".pe.w1", init_normal({2, P}, 2, rng));
    w.pe_b1 = store.add(prefix + ".pe.b1", Tensor(Shape{P}));
    w.pe_w2 = store.add(prefix + ".pe.w2", init_normal({P, D}, P, rng, 0.5));
    w.pe_b2 = store.add(prefix + ".pe.b2", Tensor(Shape{D}));
    w.ln2_gamma = store.add(prefix + ".ln2.gamma", Tensor(Shape{D}, 1.0));
    w.ln2_beta = store.add(prefix + ".ln2.beta", Tensor(Shape{D}));
    w.mlp_w1 = store.add(prefix + ".mlp.w1", init_normal({D, F}, D, rng, std::sqrt(2.0)));
    w.mlp_b1 = store.add(prefix + ".mlp.b1", Tensor(Shape{F}));
    w.mlp_w2 = store.add(prefix + ".mlp.w2", init_normal({F, D}, F, rng, 0.5));
    w.mlp_b2 = store.add(prefix + ".mlp.b2", Tensor(Shape{D}));
    return w;
}

RegionGroups group_by_region(std::span<const int> region_ids) {
    std::map<int, std::vector<std::uint32_t>> by_id;
    for (std::size_t i = 0; i < region_ids.size(); ++i) by_id[region_ids[i]].push_back(static_cast<std::uint32_t>(i));
    RegionGroups g;
    g.members.reserve(by_id.size());
    for (auto& [id, members] : by_id) g.members.push_back(std::move(members));
    return g;
}

RegionLayout make_layout(std::span<const std::array<int, 2>> coords, int region_size, bool shifted) {
    constexpr int kStride = 1 << 16;
    const int off = shifted ? region_size / 2 : 0;
    std::vector<int> ids;
    ids.reserve(coords.size());
    RegionLayout layout;
    layout.offsets = Tensor(Shape{coords.size(), 2});
    const double half = (region_size - 1) / 2.0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const auto rc = region_cell(coords[i], region_size, shifted);
        ids.push_back(rc[1] * kStride + rc[0]);
        for (int a = 0; a < 2; ++a) {
            const int local = coords[i][static_cast<std::size_t>(a)] + off - rc[static_cast<std::size_t>(a)] * region_size;
            layout.offsets.at(i, static_cast<std::size_t>(a)) = half > 0 ? (local - half) / half : 0.0;
        }
    }
    layout.groups = group_by_region(ids);
    return layout;
}

ad::Var positional_encoding(const Tensor& offsets, const AttentionLayerWeights& w) {
    const auto o = ad::constant(offsets);
    const auto h = ad::relu(ad::add_bias(ad::matmul(o, w.pe_w1), w.pe_b1));
    return ad::add_bias(ad::matmul(h, w.pe_w2), w.pe_b2);
}

namespace {

// Per (group, head) block of exp(P_ij - m_i), plus row denominators.
struct AttentionCache {
    std::vector<std::size_t> block_offset;  // into expo, per group*heads + h
    std::vector<std::size_t> row_offset;    // into denom, per group*heads + h
    std::vector<double> expo;
    std::vector<double> denom;
};

}  // namespace

ad::Var region_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, const ad::Var* weights,
                         const RegionGroups& groups, int heads, double eps) {
    const char* op = weights ? "weighted_region_attention" : "region_attention";
    if (q.shape().size() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
        throw ShapeError(op, "q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    const std::size_t n = q.shape()[0], d = q.shape()[1];
    const auto H = static_cast<std::size_t>(heads);
    if (H == 0 || d % H != 0) throw ShapeError(op, "width " + std::to_string(d) + " not divisible by heads");
    if (weights && weights->shape() != Shape{n})
        throw ShapeError(op, "weights " + shape_str(weights->shape()) + " for " + std::to_string(n) + " tokens");
    std::size_t covered = 0;
    for (const auto& g : groups.members) {
        covered += g.size();
        for (auto i : g)
            if (i >= n) throw ShapeError(op, "region member " + std::to_string(i) + " out of range");
    }
    if (covered != n) throw ShapeError(op, "regions cover " + std::to_string(covered) + " of " + std::to_string(n) + " tokens");

    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& Q = q.value().vec();
    const auto& K = k.value().vec();
    const auto& V = v.value().vec();
    const double* W = weights ? weights->value().vec().data() : nullptr;
    const double eps_used = weights ? eps : 0.0;

    auto cache = std::make_shared<AttentionCache>();
    {
        std::size_t blocks = 0, rows = 0;
        for (const auto& g : groups.members) {
            blocks += g.size() * g.size() * H;
            rows += g.size() * H;
        }
        cache->expo.resize(blocks);
        cache->denom.resize(rows);
    }

    Tensor out(Shape{n, d});
    std::size_t boff = 0, roff = 0;
    std::vector<double> logits;
    for (const auto& g : groups.members) {
        const std::size_t r = g.size();
        logits.resize(r * r);
        for (std::size_t h = 0; h < H; ++h) {
            cache->block_offset.push_back(boff);
            cache->row_offset.push_back(roff);
            const std::size_t c0 = h * dh;
            for (std::size_t a = 0; a < r; ++a) {
                const double* qa = &Q[g[a] * d + c0];
                for (std::size_t b = 0; b < r; ++b) {
                    const double* kb = &K[g[b] * d + c0];
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qa[c] * kb[c];
                    logits[a * r + b] = s * scale;
                }
            }
            for (std::size_t a = 0; a < r; ++a) {
                // Row max over keys that carry weight, so zero-weight keys
                // cannot shift the stabilizer.
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t b = 0; b < r; ++b)
                    if (!W || W[g[b]] > 0.0) m = std::max(m, logits[a * r + b]);
                if (!std::isfinite(m)) m = 0.0;
                double* e = &cache->expo[boff + a * r];
                double den = 0.0;
                for (std::size_t b = 0; b < r; ++b) {
                    e[b] = std::exp(logits[a * r + b] - m);
                    den += W ? e[b] * W[g[b]] : e[b];
                }
                // eps joins the shifted sum, so its relative effect stays below
                // eps / max weight instead of growing with exp(-max logit)
                den += eps_used;
                cache->denom[roff + a] = den;
                double* o = &out[g[a] * d + c0];
                if (den > 0.0) {
                    for (std::size_t b = 0; b < r; ++b) {
                        const double coef = (W ? e[b] * W[g[b]] : e[b]) / den;
                        if (coef == 0.0) continue;
                        const double* vb = &V[g[b] * d + c0];
                        for (std::size_t c = 0; c < dh; ++c) o[c] += coef * vb[c];
                    }
                }
            }
            boff += r * r;
            roff += r;
        }
    }

    std::vector<ad::Var> parents{q, k, v};
    if (weights) parents.push_back(*weights);
    auto backward = [q, k, v, wv = weights ? *weights : ad::Var(), groups_copy = groups, cache, H, dh, d, n, scale](
                        ad::Node& self) {
        const auto& Q = q.value().vec();
        const auto& K = k.value().vec();
        const auto& V = v.value().vec();
        const auto& O = self.value.vec();
        const auto& G = self.grad.vec();
        const bool weighted = static_cast<bool>(wv);
        const double* W = weighted ? wv.value().vec().data() : nullptr;
        std::vector<double> gq(n * d, 0.0), gk(n * d, 0.0), gv(n * d, 0.0), gw(weighted ? n : 0, 0.0);
        std::vector<double> dlogit;
        std::size_t block = 0;
        for (const auto& g : groups_copy.members) {
            const std::size_t r = g.size();
            dlogit.resize(r * r);
            for (std::size_t h = 0; h < H; ++h, ++block) {
                const std::size_t c0 = h * dh;
                const double* E = &cache->expo[cache->block_offset[block]];
                const double* Dn = &cache->denom[cache->row_offset[block]];
                for (std::size_t a = 0; a < r; ++a) {
                    const double* ga = &G[g[a] * d + c0];
                    const double* oa = &O[g[a] * d + c0];
                    const double den = Dn[a];
                    for (std::size_t b = 0; b < r; ++b) {
                        if (den <= 0.0) {
                            dlogit[a * r + b] = 0.0;
                            continue;
                        }
                        const double* vb = &V[g[b] * d + c0];
                        double contrib = 0.0;  // g_a . (v_b - o_a)
                        for (std::size_t c = 0; c < dh; ++c) contrib += ga[c] * (vb[c] - oa[c]);
                        const double e = E[a * r + b];
                        const double att = (W ? e * W[g[b]] : e) / den;
                        dlogit[a * r + b] = contrib * att;
                        if (W) gw[g[b]] += contrib * e / den;
                        if (att != 0.0) {
                            double* gvb = &gv[g[b] * d + c0];
                            for (std::size_t c = 0; c < dh; ++c) gvb[c] += att * ga[c];
                        }
                    }
                }
                for (std::size_t a = 0; a < r; ++a) {
                    double* gqa = &gq[g[a] * d + c0];
                    const double* qa = &Q[g[a] * d + c0];
                    for (std::size_t b = 0; b < r; ++b) {
                        const double dp = dlogit[a * r + b] * scale;
                        if (dp == 0.0) continue;
                        const double* kb = &K[g[b] * d + c0];
                        double* gkb = &gk[g[b] * d + c0];
                        for (std::size_t c = 0; c < dh; ++c) {
                            gqa[c] += dp * kb[c];
                            gkb[c] += dp * qa[c];
                        }
                    }
                }
            }
        }
        if (q.requires_grad()) q.node()->accumulate(gq);
        if (k.requires_grad()) k.node()->accumulate(gk);
        if (v.requires_grad()) v.node()->accumulate(gv);
        if (weighted && wv.requires_grad()) wv.node()->accumulate(gw);
    };
    return ad::make_result(op, std::move(out), std::move(parents), std::move(backward));
}

ad::Var attention_branch(const ad::Var& f, const ad::Var* weights, const AttentionLayerWeights& w,
                         const RegionLayout& layout, const LayerSpec& spec) {
    const auto normed = ad::layer_norm(f, w.ln1_gamma, w.ln1_beta);
    const auto with_pe = ad::add(normed, positional_encoding(layout.offsets, w));
    const auto q = ad::matmul(with_pe, w.w_q);
    const auto k = ad::matmul(with_pe, w.w_k);
    const auto v = ad::matmul(normed, w.w_v);
    return region_attention(q, k, v, weights, layout.groups, spec.heads);
}

ad::Var attention_layer(const ad::Var& f, const ad::Var* weights, const AttentionLayerWeights& w,
                        const RegionLayout& layout, const LayerSpec& spec) {
    const auto mid = ad::add(f, attention_branch(f, weights, w, layout, spec));
    const auto normed = ad::layer_norm(mid, w.ln2_gamma, w.ln2_beta);
    const auto hidden = ad::relu(ad::add_bias(ad::matmul(normed, w.mlp_w1), w.mlp_b1));
    return ad::add(mid, ad::add_bias(ad::matmul(hidden, w.mlp_w2), w.mlp_b2));
}

}  // namespace tokenhalt
