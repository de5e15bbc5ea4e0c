#include "tokenhalt/trainer.hpp"

#include "tokenhalt/util.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

namespace tokenhalt {

ConfigError::ConfigError(const std::string& key, const std::string& detail)
    : std::runtime_error(key.empty() ? "config: " + detail : "config key '" + key + "': " + detail), key_(key) {}

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
    if (scenes_per_epoch < 1) throw ConfigError("train.scenes_per_epoch", "must be >= 1");
    if (!(lr_start > 0.0)) throw ConfigError("train.lr_start", "must be > 0");
    if (!(lr_start < lr_peak)) throw ConfigError("train.lr_peak", "must exceed train.lr_start");
    if (!(lr_floor >= 0.0 && lr_floor <= lr_peak)) throw ConfigError("train.lr_floor", "must lie in [0, lr_peak]");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
        throw ConfigError("train.warmup_fraction", "must lie in (0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
    if (!(grad_clip_norm > 0.0)) throw ConfigError("train.grad_clip_norm", "must be > 0");
    if (!(schedule.u >= 0.0 && schedule.u <= 1.0)) throw ConfigError("halt.u", "must lie in [0, 1]");
    for (std::size_t m = 0; m < schedule.bounds.size(); ++m) {
        const auto [lo, hi] = schedule.bounds[m];
        if (!(lo >= 0.0 && lo <= hi && hi <= 1.0))
            throw ConfigError("halt.alpha_lo_" + std::to_string(m + 1),
                              "bounds must satisfy 0 <= alpha_lo <= alpha_hi <= 1");
    }
    if (scene.extent_m != model.grid.extent_m) throw ConfigError("scene.extent_m", "must match the grid extent");
    if (sweep_finetune_steps < 0) throw ConfigError("sweep.finetune_steps", "must be >= 0");
    if (sweep_eval_scenes < 1) throw ConfigError("sweep.eval_scenes", "must be >= 1");
    try {
        model.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("model", e.what());
    }
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    T v{};
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc() || r.ptr != text.data() + text.size())
        throw ConfigError(key, "cannot parse '" + text + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key, "expected true or false, got '" + text + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, ',')) out.push_back(parse_value<int>(key, trim(part)));
    if (out.empty()) throw ConfigError(key, "empty list");
    return out;
}

void set_bound(TrainConfig& c, std::size_t module, int side, double v) {
    if (c.schedule.bounds.size() <= module) c.schedule.bounds.resize(module + 1, c.schedule.bounds.back());
    c.schedule.bounds[module][static_cast<std::size_t>(side)] = v;
}

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto dbl = [](double TrainConfig::*field) {
            return [field](TrainConfig& c, const std::string& k, const std::string& v) {
                c.*field = parse_value<double>(k, v);
            };
        };
        auto integer = [](int TrainConfig::*field) {
            return [field](TrainConfig& c, const std::string& k, const std::string& v) {
                c.*field = parse_value<int>(k, v);
            };
        };
        t["seed"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.seed = parse_value<std::uint64_t>(k, v);
        };
        t["train.epochs"] = integer(&TrainConfig::epochs);
        t["train.scenes_per_epoch"] = integer(&TrainConfig::scenes_per_epoch);
        t["train.lr_start"] = dbl(&TrainConfig::lr_start);
        t["train.lr_peak"] = dbl(&TrainConfig::lr_peak);
        t["train.lr_floor"] = dbl(&TrainConfig::lr_floor);
        t["train.warmup_fraction"] = dbl(&TrainConfig::warmup_fraction);
        t["train.weight_decay"] = dbl(&TrainConfig::weight_decay);
        t["train.grad_clip_norm"] = dbl(&TrainConfig::grad_clip_norm);
        t["train.augment"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.augment = parse_bool(k, v);
        };
        t["train.uniform_sparsity"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.uniform_sparsity = parse_bool(k, v);
        };
        t["train.recycle"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.recycle = parse_bool(k, v);
        };
        t["loss.lambda_box"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.lambda.box = parse_value<double>(k, v);
        };
        t["loss.lambda_heat"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.lambda.heat = parse_value<double>(k, v);
        };
        t["loss.lambda_sparse"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.lambda.sparse = parse_value<double>(k, v);
        };
        t["halt.u"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.schedule.u = parse_value<double>(k, v);
        };
        for (std::size_t m = 0; m < 4; ++m)
            for (int side = 0; side < 2; ++side) {
                const std::string key = std::string(side ? "halt.alpha_hi_" : "halt.alpha_lo_") + std::to_string(m + 1);
                t[key] = [m, side](TrainConfig& c, const std::string& k, const std::string& v) {
                    set_bound(c, m, side, parse_value<double>(k, v));
                };
            }
        t["halt.module1_channels"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.module1_channels = parse_value<std::size_t>(k, v);
        };
        t["model.d_model"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.layers.d_model = parse_value<int>(k, v);
        };
        t["model.heads"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.layers.heads = parse_value<int>(k, v);
        };
        t["model.d_ff"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.layers.d_ff = parse_value<int>(k, v);
        };
        t["model.pe_hidden"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.layers.pe_hidden = parse_value<int>(k, v);
        };
        t["model.layers"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.layers.n_layers = parse_value<int>(k, v);
        };
        t["model.region_size"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.layers.region_size = parse_value<int>(k, v);
        };
        t["model.halt_layers"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.halt_layers = parse_int_list(k, v);
        };
        t["model.head_hidden"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.head_hidden = parse_value<std::size_t>(k, v);
        };
        t["scene.n_objects"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.scene.n_objects = parse_value<int>(k, v);
        };
        t["scene.n_background_clusters"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.scene.n_background_clusters = parse_value<int>(k, v);
        };
        t["scene.n_ground_points"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.scene.n_ground_points = parse_value<int>(k, v);
        };
        t["scene.extent_m"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.scene.extent_m = c.model.grid.extent_m = parse_value<double>(k, v);
        };
        t["scene.voxel_m"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.grid.voxel_m = parse_value<double>(k, v);
        };
        t["sweep.finetune_steps"] = integer(&TrainConfig::sweep_finetune_steps);
        t["sweep.eval_scenes"] = integer(&TrainConfig::sweep_eval_scenes);
        return t;
    }();
    return table;
}

}  // namespace

TrainConfig parse_config(std::istream& is) {
    TrainConfig c;
    std::map<std::string, int> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(line, "line " + std::to_string(line_no) + " is not of the form key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError(key, "unknown key");
        if (seen.count(key)) throw ConfigError(key, "repeated on line " + std::to_string(line_no));
        seen[key] = line_no;
        if (value.empty()) throw ConfigError(key, "missing value");
        it->second(c, key, value);
    }
    c.validate();
    return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("", "cannot open " + path.string());
    return parse_config(is);
}

double lr_at(const TrainConfig& c, std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return c.lr_peak;
    const std::size_t last = total_steps - 1;
    const auto warm = static_cast<std::size_t>(std::llround(c.warmup_fraction * static_cast<double>(last)));
    if (step <= warm) {
        if (warm == 0) return c.lr_peak;
        return c.lr_start + (c.lr_peak - c.lr_start) * static_cast<double>(step) / static_cast<double>(warm);
    }
    const double p = static_cast<double>(std::min(step, last) - warm) / static_cast<double>(last - warm);
    return c.lr_floor + (c.lr_peak - c.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

double clip_grad_norm(ParamStore& params, double max_norm) {
    double sq = 0;
    for (auto& e : params.entries())
        if (e.var.has_grad())
            for (double g : e.var.node()->grad.vec()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const double scale = max_norm / norm;
        for (auto& e : params.entries())
            if (e.var.has_grad())
                for (double& g : e.var.node()->grad.vec()) g *= scale;
    }
    return norm;
}

AdamW::AdamW(ParamStore& params, double weight_decay, double beta1, double beta2, double eps)
    : params_(params), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : params_.entries()) {
        m_.emplace_back(e.var.shape());
        v_.emplace_back(e.var.shape());
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& entries = params_.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
        auto& var = entries[p].var;
        Tensor& w = var.mutable_value();
        const bool decay = w.shape().size() >= 2;
        const bool has = var.has_grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = has ? var.node()->grad[i] : 0.0;
            m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g;
            v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g * g;
            if (decay) w[i] -= lr * weight_decay_ * w[i];
            w[i] -= lr * (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + eps_);
        }
    }
}

std::vector<std::uint8_t> classify_tokens_fg_bg(const TokenSet& tokens, const std::vector<BBox>& boxes,
                                                const GridSpec& grid) {
    std::vector<std::uint8_t> fg(tokens.size(), 0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const double x = grid.cell_center(tokens.grid_coords[i][0]);
        const double y = grid.cell_center(tokens.grid_coords[i][1]);
        for (const auto& b : boxes)
            if (in_footprint(b, x, y)) {
                fg[i] = 1;
                break;
            }
    }
    return fg;
}

Sample make_sample(const Scene& scene, const GridSpec& grid) {
    Sample s;
    s.boxes = scene.boxes;
    s.tokens = voxelize(scene, grid);
    s.heatmap = build_heatmap(scene.boxes, grid);
    s.targets = token_targets(s.heatmap, s.tokens.grid_coords);
    s.fg = classify_tokens_fg_bg(s.tokens, scene.boxes, grid);
    return s;
}

std::uint64_t scene_seed(std::uint64_t seed, std::string_view split, std::size_t index) {
    return Rng::stream(seed, std::string("scenes.") + std::string(split), index).next();
}

double KeepCounts::fg_ratio() const {
    return fg_total ? static_cast<double>(fg_kept) / static_cast<double>(fg_total) : std::nan("");
}
double KeepCounts::bg_ratio() const {
    return bg_total ? static_cast<double>(bg_kept) / static_cast<double>(bg_total) : std::nan("");
}
double KeepCounts::sparsity() const {
    return total ? 1.0 - static_cast<double>(kept) / static_cast<double>(total) : 0.0;
}

StepResult run_step(const Sample& sample, const Model& model, const TrainConfig& config, bool backward) {
    ForwardOptions opts;
    opts.schedule = config.schedule;
    opts.recycle = config.recycle;
    TrainPass pass = train_forward(sample.tokens, model, opts);
    const HeadOutput head = detect_head(pass.bev, model.head);
    const ad::Var l_heat = loss_heatmap(head.center_logits, sample.heatmap);
    const ad::Var l_box = loss_box(head.box_params, sample.boxes, sample.heatmap, model.config.grid);
    const ad::Var l_sparse = config.uniform_sparsity ? loss_sparsity_uniform(pass.sparsity)
                                                     : loss_sparsity(pass.sparsity, sample.targets);
    const LossBreakdown loss = total_loss(l_box, l_heat, l_sparse, config.lambda);

    StepResult r;
    r.metrics.l_box = l_box.value().item();
    r.metrics.l_heat = l_heat.value().item();
    r.metrics.l_sparse = l_sparse.value().item();
    r.metrics.total = loss.total.value().item();
    if (backward && std::isfinite(r.metrics.total)) ad::backward(loss.total);

    for (const auto& st : pass.trace.record.stages) {
        KeepCounts k;
        k.layer = st.layer;
        for (std::size_t i = 0; i < st.cumulative.size(); ++i) {
            const bool kept = st.cumulative[i];
            k.kept += kept;
            ++k.total;
            if (sample.fg[i]) {
                ++k.fg_total;
                k.fg_kept += kept;
            } else {
                ++k.bg_total;
                k.bg_kept += kept;
            }
        }
        r.keep.push_back(k);
    }
    r.trace = std::move(pass.trace);
    return r;
}

namespace {

std::string format_row(const MetricsRow& r) {
    return "l_box=" + fmt_num(r.l_box) + " l_heat=" + fmt_num(r.l_heat) + " l_sparse=" + fmt_num(r.l_sparse) +
           " total=" + fmt_num(r.total);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng::stream(seed, "order", epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

}  // namespace

TrainingError::TrainingError(std::size_t step, const MetricsRow& row)
    : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + format_row(row)), step_(step) {}

TrainingError::TrainingError(std::size_t step, const std::string& detail)
    : std::runtime_error("non-finite value at step " + std::to_string(step) + ": " + detail), step_(step) {}

TrainResult train(const TrainConfig& config, const ProgressFn& progress) {
    config.validate();
    Model model(config.model, config.seed);
    const auto steps = static_cast<std::size_t>(config.epochs) * static_cast<std::size_t>(config.scenes_per_epoch);
    return train_from(std::move(model), config, steps, progress);
}

TrainResult train_from(Model model, const TrainConfig& config, std::size_t steps, const ProgressFn& progress) {
    config.validate();
    const auto n_scenes = static_cast<std::size_t>(config.scenes_per_epoch);
    std::vector<Scene> scenes;
    std::vector<Sample> samples;
    scenes.reserve(n_scenes);
    samples.reserve(n_scenes);
    for (std::size_t i = 0; i < n_scenes; ++i) {
        scenes.push_back(generate_scene(scene_seed(config.seed, "train", i), config.scene));
        samples.push_back(make_sample(scenes.back(), config.model.grid));
    }

    TrainResult result{std::move(model), {}, {}, 0, 0, {}};
    Model& m = result.model;
    AdamW opt(m.params, config.weight_decay);
    const std::size_t n_modules = m.config.halt_layers.size();
    std::vector<KeepCounts> epoch_keep(n_modules);
    double epoch_sum = 0;
    std::size_t epoch_steps = 0;
    std::vector<std::size_t> order;

    for (std::size_t step = 0; step < steps; ++step) {
        const std::size_t epoch = step / n_scenes;
        const std::size_t at = step % n_scenes;
        if (at == 0) {
            order = epoch_order(config.seed, epoch, n_scenes);
            epoch_keep.assign(n_modules, KeepCounts{});
            epoch_sum = 0;
            epoch_steps = 0;
        }
        const std::size_t idx = order[at];
        Sample augmented;
        if (config.augment) {
            Rng aug = Rng::stream(config.seed, "augment", step);
            augmented = make_sample(augment_scene(scenes[idx], aug), config.model.grid);
        }
        const Sample& sample = config.augment ? augmented : samples[idx];

        m.params.zero_grad();
        StepResult r;
        try {
            r = run_step(sample, m, config, true);
        } catch (const NumericError& e) {
            throw TrainingError(step, e.what());
        }
        r.metrics.step = step;
        if (!std::isfinite(r.metrics.total) || !std::isfinite(r.metrics.l_box) || !std::isfinite(r.metrics.l_heat) ||
            !std::isfinite(r.metrics.l_sparse))
            throw TrainingError(step, r.metrics);
        clip_grad_norm(m.params, config.grad_clip_norm);
        opt.step(lr_at(config, step, steps));

        result.metrics.push_back(r.metrics);
        for (std::size_t k = 0; k < r.keep.size(); ++k) {
            const auto& kc = r.keep[k];
            result.sparsity.push_back({step, kc.layer, kc.fg_ratio(), kc.bg_ratio(), kc.sparsity()});
            auto& acc = epoch_keep[k];
            acc.layer = kc.layer;
            acc.fg_kept += kc.fg_kept;
            acc.fg_total += kc.fg_total;
            acc.bg_kept += kc.bg_kept;
            acc.bg_total += kc.bg_total;
            acc.kept += kc.kept;
            acc.total += kc.total;
        }
        epoch_sum += r.metrics.total;
        ++epoch_steps;

        if (at + 1 == n_scenes || step + 1 == steps) {
            const double mean = epoch_sum / static_cast<double>(epoch_steps);
            if (epoch == 0) result.first_epoch_total = mean;
            result.final_total = mean;
            result.final_keep = epoch_keep;
            if (progress) progress(static_cast<int>(epoch), mean);
        }
    }
    m.params.zero_grad();
    return result;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << "step,l_box,l_heat,l_sparse,total\n";
    for (const auto& r : rows)
        os << r.step << ',' << fmt_num(r.l_box) << ',' << fmt_num(r.l_heat) << ',' << fmt_num(r.l_sparse) << ','
           << fmt_num(r.total) << '\n';
}

void write_sparsity_csv(std::ostream& os, const std::vector<SparsityRow>& rows) {
    os << "step,layer,fg_keep,bg_keep,sparsity\n";
    for (const auto& r : rows)
        os << r.step << ',' << r.layer << ',' << fmt_num(r.fg_keep) << ',' << fmt_num(r.bg_keep) << ','
           << fmt_num(r.sparsity) << '\n';
}

}  // namespace tokenhalt
