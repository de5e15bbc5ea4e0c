#pragma once

#include "tokenhalt/autodiff.hpp"
#include "tokenhalt/halting.hpp"
#include "tokenhalt/scene.hpp"

#include <span>
#include <string>
#include <vector>

namespace tokenhalt {

class ParamStore;

struct HeadWeights {
    ad::Var conv1_w, conv1_b;  // 3x3, D -> hidden
    ad::Var conv2_w, conv2_b;  // 3x3, hidden -> hidden
    ad::Var center_w, center_b;  // [hidden, 1], [1]
    ad::Var box_w, box_b;        // [hidden, kBoxParams], [kBoxParams]

    static HeadWeights create(ParamStore& store, const std::string& prefix, std::size_t d_model, std::size_t hidden,
                              Rng& rng);
};

/// Initial center bias: sigmoid(-2.19) ~ 0.1 keeps the focal loss calm early on.
constexpr double kCenterBiasInit = -2.19;

struct HeadOutput {
    ad::Var center_logits;  // [H*W], row-major cells
    ad::Var box_params;     // [H*W, kBoxParams]
};

/// bev is channel-first [D, H, W].
HeadOutput detect_head(const ad::Var& bev, const HeadWeights& w);

/// Focal constants shared by the heatmap and sparsity losses.
struct FocalParams {
    double alpha = 2.0;  // exponent on the prediction error; only 2 is supported
    double gamma = 4.0;  // exponent on (1 - m) for negatives
    double eps = 1e-4;   // clamp and positive-cell tolerance
};

/// Per-element focal terms for probabilities p against targets m, after
/// clamping p to [eps, 1 - eps].
ad::Var focal_terms(const ad::Var& p, std::span<const double> targets, const FocalParams& fp = {});

/// Focal loss over sigmoid(center_logits), divided by max(1, #cells with m >= 1 - eps).
ad::Var loss_heatmap(const ad::Var& center_logits, const Heatmap& heatmap, const FocalParams& fp = {});

/// Mean absolute error over all channels of cells with m >= 1 - eps; 0 if none.
ad::Var loss_box(const ad::Var& box_params, const std::vector<BBox>& boxes, const Heatmap& heatmap,
                 const GridSpec& grid, const FocalParams& fp = {});

/// Scores of one halting module over all N tokens, plus the tokens still
/// active when it ran.
struct SparsityTerm {
    ad::Var scores;
    std::vector<std::uint8_t> active;
};

/// Sum over halting modules of the focal sparsity penalty averaged over that
/// module's active tokens; targets are heatmap values at the token cells.
ad::Var loss_sparsity(std::span<const SparsityTerm> terms, std::span<const double> token_targets,
                      const FocalParams& fp = {});

/// Ablation: sum over modules of the mean active score.
ad::Var loss_sparsity_uniform(std::span<const SparsityTerm> terms);

struct LossWeights {
    double box = 2.0;
    double heat = 1.0;
    double sparse = 0.5;
};

struct LossBreakdown {
    ad::Var l_box, l_heat, l_sparse, total;
};

LossBreakdown total_loss(const ad::Var& l_box, const ad::Var& l_heat, const ad::Var& l_sparse, const LossWeights& w);

/// Heatmap value at each token's cell.
std::vector<double> token_targets(const Heatmap& heatmap, std::span<const std::array<int, 2>> coords);

}  // namespace tokenhalt
