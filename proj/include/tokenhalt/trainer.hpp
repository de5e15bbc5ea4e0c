#pragma once

// Training loop: one scene per step, AdamW with decoupled weight decay,
// linear warmup then cosine decay, and per-module foreground/background
// keep ratios.

#include "tokenhalt/edf.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokenhalt {

struct TrainConfig {
    std::uint64_t seed = 1;
    int epochs = 3;
    int scenes_per_epoch = 200;
    double lr_start = 1e-4;
    double lr_peak = 2.5e-3;
    double lr_floor = 1e-5;
    double warmup_fraction = 0.3;
    double weight_decay = 0.01;
    double grad_clip_norm = 10.0;
    bool augment = false;
    /// Replace the heatmap-driven sparsity loss with the mean active score.
    bool uniform_sparsity = false;
    bool recycle = true;
    LossWeights lambda;
    HaltSchedule schedule;
    SceneConfig scene;
    ModelConfig model;
    /// Sweep only: steps of fine-tuning per grid point and held-out scenes.
    int sweep_finetune_steps = 50;
    int sweep_eval_scenes = 20;

    void validate() const;
};

/// Bad config key or value; the message names the key (empty for file errors).
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& key, const std::string& detail);
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

/// Plain `key = value` lines; `#` starts a comment. Unknown or repeated keys throw.
TrainConfig parse_config(std::istream& is);
TrainConfig load_config(const std::filesystem::path& path);

/// Learning rate at a 0-based step of a run with total_steps steps: linear
/// from lr_start to lr_peak at the warmup end, cosine down to lr_floor at the
/// last step.
double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before scaling.
double clip_grad_norm(ParamStore& params, double max_norm);

class AdamW {
public:
    explicit AdamW(ParamStore& params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8);
    /// Weight decay applies to matrices and conv kernels, not to biases or norms.
    void step(double lr);

private:
    ParamStore& params_;
    double weight_decay_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

/// Foreground iff the token's cell center lies inside a box footprint.
std::vector<std::uint8_t> classify_tokens_fg_bg(const TokenSet& tokens, const std::vector<BBox>& boxes,
                                                const GridSpec& grid);

/// One scene with everything the losses and trackers need.
struct Sample {
    std::vector<BBox> boxes;
    TokenSet tokens;
    Heatmap heatmap;
    std::vector<double> targets;    // heatmap value per token
    std::vector<std::uint8_t> fg;  // per token
};

Sample make_sample(const Scene& scene, const GridSpec& grid);
/// Scene seeds of a dataset split ("train" or "eval") derived from the run seed.
std::uint64_t scene_seed(std::uint64_t seed, std::string_view split, std::size_t index);

struct MetricsRow {
    std::size_t step = 0;
    double l_box = 0, l_heat = 0, l_sparse = 0, total = 0;
};

struct SparsityRow {
    std::size_t step = 0;
    int layer = 0;
    double fg_keep = 0;   // fraction of foreground tokens still kept after this layer's module
    double bg_keep = 0;
    double sparsity = 0;  // fraction of all tokens halted so far
};

/// Kept and total foreground/background counts at one module.
struct KeepCounts {
    int layer = 0;
    std::size_t fg_kept = 0, fg_total = 0, bg_kept = 0, bg_total = 0;
    std::size_t kept = 0, total = 0;
    double fg_ratio() const;
    double bg_ratio() const;
    double sparsity() const;
};

struct StepResult {
    MetricsRow metrics;
    std::vector<KeepCounts> keep;  // one per halting module
    PassTrace trace;
};

/// Forward (and backward when requested) pass of one sample; gradients
/// accumulate into the model's parameters.
StepResult run_step(const Sample& sample, const Model& model, const TrainConfig& config, bool backward);

class TrainingError : public std::runtime_error {
public:
    TrainingError(std::size_t step, const MetricsRow& row);
    /// A non-finite value raised inside the pass, before the loss existed.
    TrainingError(std::size_t step, const std::string& detail);
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

struct TrainResult {
    Model model;
    std::vector<MetricsRow> metrics;
    std::vector<SparsityRow> sparsity;
    double first_epoch_total = 0;  // mean total loss over the first epoch
    double final_total = 0;        // mean total loss over the last epoch
    /// Pooled over the last epoch, one per halting module.
    std::vector<KeepCounts> final_keep;
};

using ProgressFn = std::function<void(int epoch, double mean_total)>;

/// Trains from a fresh model built from config.seed.
TrainResult train(const TrainConfig& config, const ProgressFn& progress = {});
/// Continues training the given model for a fixed number of steps.
TrainResult train_from(Model model, const TrainConfig& config, std::size_t steps, const ProgressFn& progress = {});

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);
void write_sparsity_csv(std::ostream& os, const std::vector<SparsityRow>& rows);

}  // namespace tokenhalt
