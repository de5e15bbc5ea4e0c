#pragma once

// The two forward passes over a token set.
//
// train_forward keeps all N tokens in every layer. Halting only changes the
// attention weights (score times cumulative keep mask) and which layer's
// features a token contributes to the BEV map, so the whole pass stays
// differentiable through the straight-through masks.
//
// infer_forward physically drops halted tokens: survivors are compacted in
// their original order and each halted token's features are written to the
// BEV map at the layer where it stopped. Both passes produce the same map.

#include "tokenhalt/halting.hpp"
#include "tokenhalt/losses.hpp"
#include "tokenhalt/model.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokenhalt {

struct HaltSchedule {
    double u = 0.01;
    /// Halt-fraction bounds per module; the last pair repeats for extra modules.
    std::vector<std::array<double, 2>> bounds{{0.8, 0.9}, {0.9, 0.99}};

    std::array<double, 2> bounds_for(std::size_t module) const;
    /// u = 0 with no clamp: nothing halts.
    static HaltSchedule disabled();
};

struct ForwardOptions {
    HaltSchedule schedule;
    /// false makes the masks constants, so gradients are true derivatives of
    /// the piecewise-smooth pass (used for finite-difference checks).
    bool straight_through = true;
    /// false drops halted tokens from the BEV map (ablation).
    bool recycle = true;
    /// Test hook: may edit the survivor list after each halting module in
    /// the inference pass.
    std::function<void(int layer, std::vector<std::uint32_t>& survivors)> tamper_survivors;
};

struct BevMap {
    std::size_t side = 0;
    Tensor features;              // [D, side, side]
    std::vector<int> provenance;  // per cell: layer whose features landed there, 0 = empty
};

/// Work done by one attention layer, including the halting module in front of it.
struct LayerCost {
    int layer = 0;
    std::size_t tokens = 0;                  // tokens attending in this layer
    std::vector<std::size_t> region_sizes;  // occupied region sizes for this layer's grouping
    int module = -1;                         // halting module ordinal (0-based) or -1
    std::size_t module_tokens = 0;           // tokens scored by that module
};

struct PassTrace {
    std::size_t n_tokens = 0;
    /// features[l-1] = features entering layer l (l = 1..L) after any fusion,
    /// including tokens its module halts; features[L] = output.
    std::vector<Tensor> features;
    /// Row-to-token map for each features entry; empty means identity.
    std::vector<std::vector<std::uint32_t>> rows;
    HaltRecord record;
    /// Per token: layer whose entering features were recycled, L+1 for survivors.
    std::vector<int> halt_layer;
    std::vector<LayerCost> observed;
    /// Same layers with nothing halted.
    std::vector<LayerCost> dense;
};

struct TrainPass {
    ad::Var bev;         // [D, side, side]
    ad::Var bev_tokens;  // [N, D]
    BevMap map;
    PassTrace trace;
    std::vector<SparsityTerm> sparsity;
};

TrainPass train_forward(const TokenSet& tokens, const Model& model, const ForwardOptions& options);

struct InferPass {
    BevMap map;
    PassTrace trace;
};

InferPass infer_forward(const TokenSet& tokens, const Model& model, const ForwardOptions& options);

class EquivalenceError : public std::runtime_error {
public:
    EquivalenceError(int layer, std::size_t token, const std::string& detail);
    int layer() const { return layer_; }
    std::size_t token() const { return token_; }

private:
    int layer_;
    std::size_t token_;
};

/// Throws EquivalenceError on the first stage, then token, that differs in
/// mask, cumulative mask, threshold or active-token score.
void compare_records(const HaltRecord& train, const HaltRecord& infer);

/// Runs both passes and returns max |BEV_train - BEV_infer|.
double check_equivalence(const TokenSet& tokens, const Model& model, const ForwardOptions& options);

/// Per-cell provenance and a [N, D] token map assembled from per-layer
/// features by the telescoping keep-mask differences.
Tensor assemble_bev_tokens(const PassTrace& trace, std::size_t d_model);

// ---- FLOP model -------------------------------------------------------------
//
// Multiply-adds, with softmax counted as 4 per score entry:
//   embedding        N * 6 * D
//   attention layer  n * (3 D^2 + 2 P + P D + 2 D F) + sum_regions r^2 (2 D + 4 H)
//   dense module     sum_convs 9 Cin Cout Hout Wout + n (c + c D)
//   linear module    n * min(D, 32)
// The detection head is excluded.

struct FlopRow {
    std::string pass;  // "dense" or "observed"
    int layer = 0;     // 0 = embedding
    std::size_t tokens = 0;
    std::uint64_t flops = 0;
};

struct FlopReport {
    std::uint64_t dense = 0;
    std::uint64_t observed = 0;
    double speedup = 1.0;
    std::vector<FlopRow> rows;
};

std::uint64_t attention_layer_flops(const ModelConfig& config, std::size_t tokens,
                                    std::span<const std::size_t> region_sizes);
std::uint64_t dense_module_flops(const ModelConfig& config, std::size_t tokens);
std::uint64_t linear_module_flops(const ModelConfig& config, std::size_t tokens);

FlopReport flop_count(const PassTrace& trace, const ModelConfig& config);
void write_flops_csv(std::ostream& os, const FlopReport& report);

}  // namespace tokenhalt
