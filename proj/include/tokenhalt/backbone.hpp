#pragma once

#include "tokenhalt/autodiff.hpp"
#include "tokenhalt/rng.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tokenhalt {

class ParamStore;

struct LayerSpec {
    int n_layers = 4;
    int heads = 4;
    int d_model = 32;
    int d_ff = 64;
    int pe_hidden = 16;
    int region_size = 7;

    int d_head() const { return d_model / heads; }
    /// Layers are numbered from 1; even layers use the shifted grouping.
    static bool shifted(int layer) { return layer % 2 == 0; }
    void validate() const;
};

/// Added to the weighted-attention denominator.
constexpr double kAttentionEps = 1e-9;

struct AttentionLayerWeights {
    ad::Var ln1_gamma, ln1_beta;
    ad::Var w_q, w_k, w_v;  // [D, D]; head h owns columns [h*d_head, (h+1)*d_head)
    ad::Var pe_w1, pe_b1, pe_w2, pe_b2;
    ad::Var ln2_gamma, ln2_beta;
    ad::Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    static AttentionLayerWeights create(ParamStore& store, const std::string& prefix, const LayerSpec& spec, Rng& rng);
};

/// Token positions grouped by region, groups ordered by region id and
/// members in ascending token order.
struct RegionGroups {
    std::vector<std::vector<std::uint32_t>> members;
};

RegionGroups group_by_region(std::span<const int> region_ids);

/// Region grouping plus normalized within-region offsets for one token set.
struct RegionLayout {
    RegionGroups groups;
    Tensor offsets;  // [N, 2] in [-1, 1]
};

RegionLayout make_layout(std::span<const std::array<int, 2>> coords, int region_size, bool shifted);

/// Small MLP on within-region offsets: relu(o W1 + b1) W2 + b2 -> [N, D].
ad::Var positional_encoding(const Tensor& offsets, const AttentionLayerWeights& w);

/// Multi-head attention restricted to regions. With `weights` null this is
/// plain softmax attention; otherwise row i is
///   sum_j exp(P_ij - m_i) w_j v_j / (sum_k exp(P_ik - m_i) w_k + eps)
/// with m_i the largest logit among keys of positive weight. Forward and
/// backward are fused; rows whose region carries no positive weight come out
/// as zero. The backward treats m_i as constant (its true effect is O(eps)).
ad::Var region_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, const ad::Var* weights,
                         const RegionGroups& groups, int heads, double eps = kAttentionEps);

/// Attention branch MSA(LN(f), PE) with optional token weights.
ad::Var attention_branch(const ad::Var& f, const ad::Var* weights, const AttentionLayerWeights& w,
                         const RegionLayout& layout, const LayerSpec& spec);

/// Full layer: f' = attn + f; out = MLP(LN(f')) + f'.
ad::Var attention_layer(const ad::Var& f, const ad::Var* weights, const AttentionLayerWeights& w,
                        const RegionLayout& layout, const LayerSpec& spec);

inline ad::Var sra(const ad::Var& f, const AttentionLayerWeights& w, const RegionLayout& layout, const LayerSpec& spec) {
    return attention_layer(f, nullptr, w, layout, spec);
}

inline ad::Var wsa(const ad::Var& f, const ad::Var& scores, const AttentionLayerWeights& w, const RegionLayout& layout,
                   const LayerSpec& spec) {
    return attention_layer(f, &scores, w, layout, spec);
}

}  // namespace tokenhalt
