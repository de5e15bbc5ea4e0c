#pragma once

// Sparsity versus speedup sweep: one shared trained model, a short
// fine-tune per threshold, then loss, keep ratios and FLOPs on held-out scenes.

#include "tokenhalt/trainer.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokenhalt {

struct SweepPoint {
    /// Empty means halting disabled.
    std::optional<double> u;
};

/// Comma-separated thresholds; "off" disables halting for that point.
std::vector<SweepPoint> parse_u_grid(const std::string& text);

struct SweepRow {
    double u = 0;
    bool halting = true;
    std::vector<std::array<double, 2>> bounds;  // per module
    std::vector<KeepCounts> keep;               // per module, pooled over eval scenes
    std::uint64_t dense_flops = 0;
    std::uint64_t observed_flops = 0;
    double speedup = 1.0;
    double total_loss = 0;  // mean over eval scenes
};

/// Rows sorted by speedup, ties kept in grid order.
std::vector<SweepRow> run_sweep(const TrainConfig& config, std::span<const SweepPoint> grid,
                                const ProgressFn& progress = {});

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

}  // namespace tokenhalt
