#pragma once

#include "tokenhalt/backbone.hpp"
#include "tokenhalt/halting.hpp"
#include "tokenhalt/losses.hpp"
#include "tokenhalt/params.hpp"
#include "tokenhalt/scene.hpp"

#include <filesystem>
#include <stdexcept>
#include <vector>

namespace tokenhalt {

struct ModelConfig {
    LayerSpec layers;
    /// Attention layers (1-based) preceded by a halting module. The first
    /// module is the dense encoder-decoder, later ones are linear scorers.
    std::vector<int> halt_layers{1, 3};
    std::size_t module1_channels = 8;
    std::size_t head_hidden = 16;
    GridSpec grid;

    void validate() const;
    /// Index into halt_layers for a layer, or -1.
    int module_at(int layer) const;
};

/// All trainable weights. Holds graph leaves, so it is move-only; use
/// clone() for an independent copy.
class Model {
public:
    ModelConfig config;
    ParamStore params;
    ad::Var embed_w;  // [kRawFeatures, D]
    ad::Var embed_b;  // [D]
    std::vector<AttentionLayerWeights> layers;
    DenseHaltWeights dense_halt;
    std::vector<MlpHaltWeights> mlp_halts;  // modules 2.. in order
    HeadWeights head;

    Model(const ModelConfig& config, std::uint64_t seed);
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    Model clone() const;
    /// Copies parameter values from a model with the same configuration.
    void assign(const Model& other);
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Text manifest (model config, tensor names and shapes, checksum) followed
/// by the raw tensor values as little-endian f64 in manifest order.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace tokenhalt
