// Command-line entry point. Exit codes: 0 success, 1 check failed, 2 usage or config error.

#include "tokenhalt/edf.hpp"
#include "tokenhalt/pseudo_grad.hpp"
#include "tokenhalt/sweep.hpp"
#include "tokenhalt/trainer.hpp"
#include "tokenhalt/util.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace tokenhalt;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;
constexpr double kEquivalenceTolerance = 1e-9;
constexpr std::uint64_t kGoldenSceneSeed = 7;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::ofstream open_out(const fs::path& dir, const std::string& name) {
    fs::create_directories(dir);
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw UsageError("cannot write " + (dir / name).string());
    return os;
}

std::vector<double> parse_doubles(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw UsageError("bad number '" + part + "' in " + what);
        }
    }
    return out;
}

/// "lo:hi,lo:hi" per module.
std::vector<std::array<double, 2>> parse_bounds(const std::string& text) {
    std::vector<std::array<double, 2>> out;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw UsageError("bounds entry '" + part + "' is not lo:hi");
        const auto lo = parse_doubles(part.substr(0, colon), "--bounds");
        const auto hi = parse_doubles(part.substr(colon + 1), "--bounds");
        out.push_back({lo.at(0), hi.at(0)});
    }
    if (out.empty()) throw UsageError("--bounds is empty");
    return out;
}

struct TrainArgs {
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    bool uniform_sparsity = false;
    bool no_recycle = false;
};

TrainConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
    TrainConfig c = load_config(path);
    if (seed) c.seed = *seed;
    return c;
}

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg = resolve_config(a.config, a.seed);
    if (a.uniform_sparsity) cfg.uniform_sparsity = true;
    if (a.no_recycle) cfg.recycle = false;
    const TrainResult r = train(cfg, [](int epoch, double mean) {
        std::cerr << "epoch " << epoch << " mean total loss " << fmt_num(mean) << '\n';
    });
    const fs::path out(a.out);
    fs::create_directories(out);
    save_checkpoint(out / "model.ckpt", r.model);
    {
        auto os = open_out(out, "metrics.csv");
        write_metrics_csv(os, r.metrics);
    }
    {
        auto os = open_out(out, "sparsity.csv");
        write_sparsity_csv(os, r.sparsity);
    }
    {
        const TokenSet golden = voxelize(generate_scene(kGoldenSceneSeed, cfg.scene), cfg.model.grid);
        ForwardOptions opts;
        opts.schedule = cfg.schedule;
        opts.recycle = cfg.recycle;
        auto os = open_out(out, "flops.csv");
        write_flops_csv(os, flop_count(infer_forward(golden, r.model, opts).trace, cfg.model));
    }
    for (const auto& k : r.final_keep)
        std::cout << "layer " << k.layer << " fg_keep " << fmt_num(k.fg_ratio()) << " bg_keep " << fmt_num(k.bg_ratio())
                  << '\n';
    std::cout << "final total loss " << fmt_num(r.final_total) << '\n';
    return kOk;
}

struct EquivArgs {
    std::string checkpoint;
    std::size_t scenes = 50;
    std::uint64_t seed = 1;
};

int cmd_equiv(const EquivArgs& a) {
    const Model model = load_checkpoint(a.checkpoint);
    SceneConfig sc;
    sc.extent_m = model.config.grid.extent_m;
    double worst = 0;
    for (std::size_t i = 0; i < a.scenes; ++i) {
        const std::uint64_t s = scene_seed(a.seed, "equiv", i);
        const TokenSet tokens = voxelize(generate_scene(s, sc), model.config.grid);
        double diff = 0;
        try {
            diff = check_equivalence(tokens, model, ForwardOptions{});
        } catch (const EquivalenceError& e) {
            std::cout << "scene seed " << s << ": " << e.what() << '\n';
            return kFailed;
        }
        worst = std::max(worst, diff);
        if (!(diff < kEquivalenceTolerance)) {
            std::cout << "scene seed " << s << ": max abs diff " << fmt_num(diff) << " exceeds tolerance\n";
            return kFailed;
        }
    }
    std::cout << "max abs diff " << fmt_num(worst) << " over " << a.scenes << " scenes\n";
    return kOk;
}

struct GradcheckArgs {
    std::string u_list = "0.04,0.02,0.01,0.005";
    std::size_t seeds = 10;
    std::uint64_t seed = 1;
    std::string out = "out";
    bool zero_residual = false;
    double target_scale = PseudoGradConfig{}.target_scale;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const auto us = parse_doubles(a.u_list, "--u-list");
    std::vector<double> distinct = us;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2) throw UsageError("--u-list needs at least two distinct values; the slope is undefined");
    for (double u : distinct)
        if (!(u > 0.0 && u < 0.1)) throw UsageError("--u-list values must lie in (0, 0.1)");
    if (a.seeds == 0) throw UsageError("--seeds must be >= 1");

    PseudoGradConfig cfg;
    cfg.zero_residual = a.zero_residual;
    cfg.target_scale = a.target_scale;
    std::vector<PseudoGradRow> rows;
    for (std::size_t i = 0; i < a.seeds; ++i) {
        const auto part = pseudo_grad_experiment(make_reduced_problem(a.seed + i, cfg), us);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    {
        auto os = open_out(a.out, "pseudo_grad.csv");
        write_pseudo_grad_csv(os, rows);
    }
    if (rows.empty()) {
        std::cout << "no halted tokens were sampled\n";
        return kFailed;
    }
    if (a.zero_residual) {
        double worst = 0;
        for (const auto& r : rows) worst = std::max(worst, r.abs_err);
        std::cout << "max abs_err " << fmt_num(worst) << '\n';
        return worst < 1e-8 ? kOk : kFailed;
    }
    const PseudoGradSummary s = summarize(rows);
    for (std::size_t i = 0; i < s.u.size(); ++i)
        std::cout << "u " << fmt_num(s.u[i]) << " median abs_err " << fmt_num(s.median_err[i]) << '\n';
    std::cout << "log-log slope " << fmt_num(s.slope) << '\n';
    const bool ok = s.slope >= 0.8 && s.median_err.front() < s.median_err.back();
    return ok ? kOk : kFailed;
}

struct SweepArgs {
    std::string config;
    std::string u_grid = "off,0.005,0.02,0.05,0.2";
    std::string out = "out";
    std::optional<std::uint64_t> seed;
};

int cmd_sweep(const SweepArgs& a) {
    const TrainConfig cfg = resolve_config(a.config, a.seed);
    std::vector<SweepPoint> grid;
    try {
        grid = parse_u_grid(a.u_grid);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto rows = run_sweep(cfg, grid, [](int epoch, double mean) {
        std::cerr << "base epoch " << epoch << " mean total loss " << fmt_num(mean) << '\n';
    });
    auto os = open_out(a.out, "sweep.csv");
    write_sweep_csv(os, rows);
    for (const auto& r : rows)
        std::cout << (r.halting ? "u " + fmt_num(r.u) : std::string("halting off")) << " speedup " << fmt_num(r.speedup)
                  << " loss " << fmt_num(r.total_loss) << '\n';
    return kOk;
}

struct VizArgs {
    std::string checkpoint;
    std::string scene;
    std::string out = "out";
    std::optional<double> u;
    std::string bounds;
};

int cmd_viz(const VizArgs& a) {
    const Model model = load_checkpoint(a.checkpoint);
    Scene scene;
    try {
        scene = load_scene(a.scene);
    } catch (const SceneFormatError& e) {
        throw UsageError(std::string("scene file: ") + e.what());
    }
    ForwardOptions opts;
    if (a.u) opts.schedule.u = *a.u;
    if (!a.bounds.empty()) opts.schedule.bounds = parse_bounds(a.bounds);

    const std::size_t modules = model.config.halt_layers.size();
    auto os = open_out(a.out, "viz.txt");
    os << "cell_x cell_y halt_layer";
    for (std::size_t m = 1; m <= modules; ++m) os << " score_" << m;
    os << '\n';
    const TokenSet tokens = voxelize(scene, model.config.grid);
    if (tokens.size() == 0) return kOk;
    const InferPass pass = infer_forward(tokens, model, opts);
    const int survivors = model.config.layers.n_layers + 1;
    const auto& stages = pass.trace.record.stages;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int layer = pass.trace.halt_layer[i];
        os << tokens.grid_coords[i][0] << ' ' << tokens.grid_coords[i][1] << ' ' << (layer == survivors ? 0 : layer);
        for (std::size_t m = 0; m < stages.size(); ++m) {
            // a module only scores tokens that reached it
            const bool reached = m == 0 || stages[m - 1].cumulative[i];
            os << ' ' << (reached ? fmt_num(stages[m].scores[i]) : std::string("nan"));
        }
        os << '\n';
    }
    return kOk;
}

struct SceneArgs {
    std::uint64_t seed = kGoldenSceneSeed;
    std::string config;
    std::string out = "out";
};

int cmd_scene(const SceneArgs& a) {
    const SceneConfig sc = a.config.empty() ? SceneConfig{} : load_config(a.config).scene;
    const Scene scene = generate_scene(a.seed, sc);
    fs::create_directories(a.out);
    save_scene(fs::path(a.out) / "scene.txt", scene);
    std::cout << scene.boxes.size() << " boxes\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token halting for sparse regional attention over voxelized scenes"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint plus CSVs");
    train_cmd->add_option("--config", train_args.config, "Config file of key = value lines")->required();
    train_cmd->add_option("--out", train_args.out, "Output directory");
    train_cmd->add_option("--seed", train_args.seed, "Overrides the config seed");
    train_cmd->add_flag("--uniform-sparsity", train_args.uniform_sparsity, "Penalize the mean score instead");
    train_cmd->add_flag("--no-recycle", train_args.no_recycle, "Drop halted tokens from the BEV map");

    EquivArgs equiv_args;
    auto* equiv_cmd = app.add_subcommand("equiv", "Check that training and inference passes agree");
    equiv_cmd->add_option("--checkpoint", equiv_args.checkpoint, "Checkpoint file")->required();
    equiv_cmd->add_option("--scenes", equiv_args.scenes, "Number of random scenes");
    equiv_cmd->add_option("--seed", equiv_args.seed, "Scene seed");

    GradcheckArgs grad_args;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Compare pseudo-gradients with brute-force loss changes");
    grad_cmd->add_option("--u-list", grad_args.u_list, "Comma-separated thresholds");
    grad_cmd->add_option("--seeds", grad_args.seeds, "Number of random reduced problems");
    grad_cmd->add_option("--seed", grad_args.seed, "First problem seed");
    grad_cmd->add_option("--out", grad_args.out, "Output directory");
    grad_cmd->add_option("--target-scale", grad_args.target_scale, "Std of the random target");
    grad_cmd->add_flag("--zero-residual", grad_args.zero_residual, "Zero the value projection and MLP output");

    SweepArgs sweep_args;
    auto* sweep_cmd = app.add_subcommand("sweep", "Sparsity versus speedup sweep over thresholds");
    sweep_cmd->add_option("--config", sweep_args.config, "Config file of key = value lines")->required();
    sweep_cmd->add_option("--u-grid", sweep_args.u_grid, "Comma-separated thresholds; 'off' disables halting");
    sweep_cmd->add_option("--out", sweep_args.out, "Output directory");
    sweep_cmd->add_option("--seed", sweep_args.seed, "Overrides the config seed");

    VizArgs viz_args;
    auto* viz_cmd = app.add_subcommand("viz", "Dump per-cell halt layers and scores");
    viz_cmd->add_option("--checkpoint", viz_args.checkpoint, "Checkpoint file")->required();
    viz_cmd->add_option("--scene", viz_args.scene, "Scene file")->required();
    viz_cmd->add_option("--out", viz_args.out, "Output directory");
    viz_cmd->add_option("--u", viz_args.u, "Score threshold");
    viz_cmd->add_option("--bounds", viz_args.bounds, "Halt-fraction bounds per module, lo:hi,lo:hi");

    SceneArgs scene_args;
    auto* scene_cmd = app.add_subcommand("scene", "Write a generated scene file for viz");
    scene_cmd->add_option("--seed", scene_args.seed, "Scene seed");
    scene_cmd->add_option("--config", scene_args.config, "Config file whose scene.* keys apply");
    scene_cmd->add_option("--out", scene_args.out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train_args);
        if (*equiv_cmd) return cmd_equiv(equiv_args);
        if (*grad_cmd) return cmd_gradcheck(grad_args);
        if (*sweep_cmd) return cmd_sweep(sweep_args);
        if (*viz_cmd) return cmd_viz(viz_args);
        if (*scene_cmd) return cmd_scene(scene_args);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    }
    return kUsage;
}
