#pragma once

// Accuracy of the straight-through pseudo-gradient on a one-layer model.
//
// Tokens with keep mask k produce q = (1 - k) f + k layer(f, s k), and the
// loss is 0.5 |q - T|^2. For each halted token i (score 0.9 u, below the
// threshold u) the true effect of keeping it, L(k + e_i) - L(k), is
// compared with dL/ds_i from one backward pass through the masks.

#include "tokenhalt/backbone.hpp"
#include "tokenhalt/params.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace tokenhalt {

struct PseudoGradConfig {
    LayerSpec spec;
    std::size_t tokens = 48;
    int grid_side = 16;
    double halted_fraction = 0.3;
    /// Std of the random target. The 0.5|dq|^2 remainder of the squared loss
    /// does not shrink with u; a wide target makes the u-dependent part of the
    /// error dominate it.
    double target_scale = 1e4;
    /// Zero the value projection and the MLP output so the layer is the identity.
    bool zero_residual = false;
};

struct ReducedProblem {
    LayerSpec spec;
    ParamStore store;
    AttentionLayerWeights weights;
    Tensor features;  // [N, D]
    Tensor target;    // [N, D]
    RegionLayout layout;
    std::vector<std::uint8_t> halted;
    std::vector<double> kept_scores;  // scores of kept tokens, fixed across u
};

ReducedProblem make_reduced_problem(std::uint64_t seed, const PseudoGradConfig& config);

struct PseudoGradRow {
    double u = 0;
    std::size_t token = 0;
    double delta = 0;
    double grad = 0;
    double abs_err = 0;
};

std::vector<PseudoGradRow> pseudo_grad_experiment(const ReducedProblem& problem, std::span<const double> u_list);

struct PseudoGradSummary {
    std::vector<double> u;
    std::vector<double> median_err;
    double slope = 0;  // least-squares slope of log median error against log u
};

/// Needs at least two distinct u values.
PseudoGradSummary summarize(std::span<const PseudoGradRow> rows);

void write_pseudo_grad_csv(std::ostream& os, std::span<const PseudoGradRow> rows);

}  // namespace tokenhalt
