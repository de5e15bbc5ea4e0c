#pragma once

#include "tokenhalt/autodiff.hpp"
#include "tokenhalt/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tokenhalt {

class ParamStore;

/// Halting modules read at most this many leading token features.
constexpr std::size_t kHaltInputCap = 32;

struct FusionWeights {
    ad::Var weight;  // [latent, D]
    ad::Var bias;    // [D]
};

/// Two-level conv encoder-decoder with skip connections, a sigmoid score
/// head and a fusion layer that adds the decoder latent back into tokens.
struct DenseHaltWeights {
    std::size_t in_features = 0;
    std::size_t channels = 0;
    ad::Var enc1_w, enc1_b;  // stride 1, in -> c
    ad::Var enc2_w, enc2_b;  // stride 2, c -> 2c
    ad::Var enc3_w, enc3_b;  // stride 2, 2c -> 4c
    ad::Var dec2_w, dec2_b;  // [up(e3), e2] -> 2c
    ad::Var dec1_w, dec1_b;  // [up(d2), e1] -> c
    ad::Var score_ln_gamma, score_ln_beta;  // normalizes the latent before the score head
    ad::Var score_w, score_b;
    FusionWeights fusion;

    static DenseHaltWeights create(ParamStore& store, const std::string& prefix, std::size_t d_model,
                                   std::size_t channels, Rng& rng);
};

struct MlpHaltWeights {
    std::size_t in_features = 0;
    ad::Var weight;  // [in, 1]
    ad::Var bias;    // [1]

    static MlpHaltWeights create(ParamStore& store, const std::string& prefix, std::size_t d_model, Rng& rng);
};

struct DenseHaltOutput {
    ad::Var scores;  // [N]
    ad::Var latent;  // [N, channels]
};

/// Scatters the leading token features onto the square grid, runs the
/// encoder-decoder and gathers scores and latent back at the token cells.
DenseHaltOutput score_module_dense(const ad::Var& tokens, std::span<const std::uint32_t> cells, std::size_t grid_side,
                                   const DenseHaltWeights& w);

/// sigmoid(linear(leading token features)) -> [N].
ad::Var score_module_mlp(const ad::Var& tokens, const MlpHaltWeights& w);

/// tokens + latent W + b.
ad::Var fuse_latent(const ad::Var& tokens, const ad::Var& latent, const FusionWeights& w);

/// Nearest-rank quantile of an ascending list: sorted[ceil(alpha * n)], or
/// +inf when that index runs past the end.
double quantile(std::span<const double> sorted, double alpha);

struct ThresholdResult {
    std::vector<std::uint8_t> mask;
    double threshold = 0.0;
};

/// Keeps active tokens whose score reaches clamp(u, Q(alpha_lo), Q(alpha_hi)),
/// quantiles taken over active scores. Inactive tokens stay 0. With no active
/// tokens the threshold reported is u.
ThresholdResult threshold(std::span<const double> scores, double u, double alpha_lo, double alpha_hi,
                          std::span<const std::uint8_t> active);

/// Forward value is the given mask; backward passes the upstream gradient to
/// the scores unchanged.
ad::Var ste_apply(const ad::Var& scores, std::span<const std::uint8_t> mask);

/// One halting module's decision, indexed over all N tokens.
struct HaltStage {
    int layer = 0;  // attention layer the module sits in front of (1-based)
    std::vector<double> scores;
    std::vector<std::uint8_t> mask;
    std::vector<std::uint8_t> cumulative;
    double threshold = 0.0;
};

struct HaltRecord {
    std::vector<HaltStage> stages;
};

}  // namespace tokenhalt
