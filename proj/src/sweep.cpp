#include "tokenhalt/sweep.hpp"

#include "tokenhalt/util.hpp"

#include <algorithm>
#include <charconv>
#include <ostream>
#include <sstream>

namespace tokenhalt {

std::vector<SweepPoint> parse_u_grid(const std::string& text) {
    std::vector<SweepPoint> out;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, ',')) {
        if (part == "off") {
            out.push_back({});
            continue;
        }
        double v = 0;
        const auto r = std::from_chars(part.data(), part.data() + part.size(), v);
        if (r.ec != std::errc() || r.ptr != part.data() + part.size() || !(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("bad threshold '" + part + "' in u grid");
        out.push_back({v});
    }
    if (out.empty()) throw std::invalid_argument("u grid is empty");
    return out;
}

std::vector<SweepRow> run_sweep(const TrainConfig& config, std::span<const SweepPoint> grid, const ProgressFn& progress) {
    config.validate();
    const TrainResult base = train(config, progress);

    std::vector<Sample> eval;
    for (int i = 0; i < config.sweep_eval_scenes; ++i)
        eval.push_back(make_sample(generate_scene(scene_seed(config.seed, "eval", static_cast<std::size_t>(i)), config.scene),
                                   config.model.grid));

    std::vector<SweepRow> rows;
    for (const auto& point : grid) {
        TrainConfig cfg = config;
        if (point.u)
            cfg.schedule.u = *point.u;
        else
            cfg.schedule = HaltSchedule::disabled();
        Model model = base.model.clone();
        if (cfg.sweep_finetune_steps > 0)
            model = train_from(std::move(model), cfg, static_cast<std::size_t>(cfg.sweep_finetune_steps)).model;

        SweepRow row;
        row.u = cfg.schedule.u;
        row.halting = point.u.has_value();
        const std::size_t modules = model.config.halt_layers.size();
        for (std::size_t m = 0; m < modules; ++m) row.bounds.push_back(cfg.schedule.bounds_for(m));
        row.keep.assign(modules, KeepCounts{});
        double loss_sum = 0;
        for (const auto& sample : eval) {
            const StepResult r = run_step(sample, model, cfg, false);
            loss_sum += r.metrics.total;
            for (std::size_t m = 0; m < r.keep.size(); ++m) {
                auto& acc = row.keep[m];
                const auto& k = r.keep[m];
                acc.layer = k.layer;
                acc.fg_kept += k.fg_kept;
                acc.fg_total += k.fg_total;
                acc.bg_kept += k.bg_kept;
                acc.bg_total += k.bg_total;
                acc.kept += k.kept;
                acc.total += k.total;
            }
            const FlopReport f = flop_count(r.trace, model.config);
            row.dense_flops += f.dense;
            row.observed_flops += f.observed;
        }
        row.total_loss = loss_sum / static_cast<double>(eval.size());
        row.speedup = row.observed_flops
                          ? static_cast<double>(row.dense_flops) / static_cast<double>(row.observed_flops)
                          : 1.0;
        rows.push_back(std::move(row));
    }
    std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.speedup < b.speedup; });
    return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    const std::size_t modules = rows.empty() ? 0 : rows.front().keep.size();
    os << "u,halting";
    for (std::size_t m = 1; m <= modules; ++m) os << ",alpha_lo_" << m << ",alpha_hi_" << m;
    for (std::size_t m = 1; m <= modules; ++m) os << ",sparsity_" << m << ",fg_keep_" << m << ",bg_keep_" << m;
    os << ",dense_flops,observed_flops,speedup,total_loss\n";
    for (const auto& r : rows) {
        os << fmt_num(r.u) << ',' << (r.halting ? "on" : "off");
        for (const auto& b : r.bounds) os << ',' << fmt_num(b[0]) << ',' << fmt_num(b[1]);
        for (const auto& k : r.keep)
            os << ',' << fmt_num(k.sparsity()) << ',' << fmt_num(k.fg_ratio()) << ',' << fmt_num(k.bg_ratio());
        os << ',' << r.dense_flops << ',' << r.observed_flops << ',' << fmt_num(r.speedup) << ','
           << fmt_num(r.total_loss) << '\n';
    }
}

}  // namespace tokenhalt
