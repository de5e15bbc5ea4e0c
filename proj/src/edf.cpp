#include "tokenhalt/edf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace tokenhalt {

std::array<double, 2> HaltSchedule::bounds_for(std::size_t module) const {
    if (bounds.empty()) return {0.0, 1.0};
    return bounds[std::min(module, bounds.size() - 1)];
}

HaltSchedule HaltSchedule::disabled() {
    HaltSchedule s;
    s.u = 0.0;
    s.bounds = {{0.0, 1.0}};
    return s;
}

EquivalenceError::EquivalenceError(int layer, std::size_t token, const std::string& detail)
    : std::runtime_error("halt record mismatch at layer " + std::to_string(layer) + ", token " + std::to_string(token) +
                         ": " + detail),
      layer_(layer),
      token_(token) {}

namespace {

ad::Var embed(const TokenSet& tokens, const Model& model) {
    return ad::add_bias(ad::matmul(ad::constant(tokens.raw), model.embed_w), model.embed_b);
}

std::vector<std::size_t> group_sizes(const RegionGroups& groups) {
    std::vector<std::size_t> out;
    out.reserve(groups.members.size());
    for (const auto& g : groups.members) out.push_back(g.size());
    return out;
}

std::vector<std::size_t> active_group_sizes(const RegionGroups& groups, const std::vector<std::uint8_t>& active) {
    std::vector<std::size_t> out;
    for (const auto& g : groups.members) {
        std::size_t n = 0;
        for (auto i : g) n += active[i];
        if (n) out.push_back(n);
    }
    return out;
}

std::size_t count_on(const std::vector<std::uint8_t>& v) {
    return static_cast<std::size_t>(std::count(v.begin(), v.end(), std::uint8_t{1}));
}

Tensor as_tensor(const std::vector<std::uint8_t>& mask) {
    Tensor t(Shape{mask.size()});
    for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask[i] ? 1.0 : 0.0;
    return t;
}

std::vector<std::array<int, 2>> pick_coords(const TokenSet& tokens, const std::vector<std::uint32_t>& idx) {
    std::vector<std::array<int, 2>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(tokens.grid_coords[i]);
    return out;
}

BevMap make_map(const Tensor& grid_features, std::size_t side, std::span<const std::uint32_t> cells,
                const std::vector<int>& halt_layer, const std::vector<std::uint8_t>& included) {
    BevMap map;
    map.side = side;
    map.features = grid_features;
    map.provenance.assign(side * side, 0);
    for (std::size_t i = 0; i < cells.size(); ++i)
        if (included[i]) map.provenance[cells[i]] = halt_layer[i];
    return map;
}

// Full-set region layouts for the plain and shifted groupings.
struct FullLayouts {
    RegionLayout plain, shifted;
    FullLayouts(const TokenSet& tokens, int region_size)
        : plain(make_layout(tokens.grid_coords, region_size, false)),
          shifted(make_layout(tokens.grid_coords, region_size, true)) {}
    const RegionLayout& at(int layer) const { return LayerSpec::shifted(layer) ? shifted : plain; }
};

}  // namespace

TrainPass train_forward(const TokenSet& tokens, const Model& model, const ForwardOptions& options) {
    const auto& cfg = model.config;
    const int L = cfg.layers.n_layers;
    const std::size_t N = tokens.size();
    const auto side = static_cast<std::size_t>(cfg.grid.cells_per_side());
    const auto cells = tokens.cells(cfg.grid);
    const FullLayouts full(tokens, cfg.layers.region_size);

    TrainPass out;
    PassTrace& trace = out.trace;
    trace.n_tokens = N;
    trace.halt_layer.assign(N, L + 1);

    ad::Var f = embed(tokens, model);
    std::vector<std::uint8_t> keep(N, 1);
    ad::Var cum = ad::constant(Tensor(Shape{N}, 1.0));
    ad::Var scores;
    ad::Var bev_tokens = ad::constant(Tensor(Shape{N, static_cast<std::size_t>(cfg.layers.d_model)}));

    for (int l = 1; l <= L; ++l) {
        LayerCost observed{l, 0, {}, -1, 0};
        LayerCost dense{l, N, group_sizes(full.at(l).groups), -1, 0};
        const int m = cfg.module_at(l);
        if (m >= 0) {
            const std::vector<std::uint8_t> active = keep;
            ad::Var s;
            if (m == 0) {
                const bool all_active = count_on(active) == N;
                const ad::Var input = all_active ? f : ad::scale_rows(f, ad::constant(as_tensor(active)));
                const auto dh = score_module_dense(input, cells, side, model.dense_halt);
                f = fuse_latent(f, dh.latent, model.dense_halt.fusion);
                s = dh.scores;
            } else {
                s = score_module_mlp(f, model.mlp_halts[static_cast<std::size_t>(m - 1)]);
            }
            const auto bounds = options.schedule.bounds_for(static_cast<std::size_t>(m));
            const auto thr = threshold(s.value().vec(), options.schedule.u, bounds[0], bounds[1], active);
            const ad::Var k = options.straight_through ? ste_apply(s, thr.mask) : ad::constant(as_tensor(thr.mask));
            const ad::Var cum_next = ad::mul(cum, k);

            HaltStage stage;
            stage.layer = l;
            stage.scores = s.value().vec();
            stage.mask = thr.mask;
            stage.threshold = thr.threshold;
            for (std::size_t i = 0; i < N; ++i) {
                if (active[i] && !thr.mask[i]) trace.halt_layer[i] = l;
                keep[i] = active[i] && thr.mask[i];
            }
            stage.cumulative = keep;
            trace.record.stages.push_back(std::move(stage));
            out.sparsity.push_back({s, active});

            // telescoping term (k_{0:l-1} - k_{0:l}) f_l
            if (options.recycle) bev_tokens = ad::add(bev_tokens, ad::scale_rows(f, ad::sub(cum, cum_next)));
            cum = cum_next;
            scores = s;
            observed.module = dense.module = m;
            observed.module_tokens = count_on(active);
            dense.module_tokens = N;
        }
        trace.features.push_back(f.value());
        trace.rows.emplace_back();

        observed.tokens = count_on(keep);
        observed.region_sizes = active_group_sizes(full.at(l).groups, keep);
        trace.observed.push_back(std::move(observed));
        trace.dense.push_back(std::move(dense));

        if (scores) {
            const ad::Var weights = ad::mul(scores, cum);
            f = attention_layer(f, &weights, model.layers[static_cast<std::size_t>(l - 1)], full.at(l), cfg.layers);
        } else {
            f = attention_layer(f, nullptr, model.layers[static_cast<std::size_t>(l - 1)], full.at(l), cfg.layers);
        }
    }
    trace.features.push_back(f.value());
    trace.rows.emplace_back();
    bev_tokens = ad::add(bev_tokens, ad::scale_rows(f, cum));

    out.bev_tokens = bev_tokens;
    out.bev = ad::scatter_to_grid(bev_tokens, cells, side, side);
    std::vector<std::uint8_t> included(N, 1);
    if (!options.recycle) included = keep;
    out.map = make_map(out.bev.value(), side, cells, trace.halt_layer, included);
    return out;
}

InferPass infer_forward(const TokenSet& tokens, const Model& model, const ForwardOptions& options) {
    const auto& cfg = model.config;
    const int L = cfg.layers.n_layers;
    const std::size_t N = tokens.size();
    const auto D = static_cast<std::size_t>(cfg.layers.d_model);
    const auto side = static_cast<std::size_t>(cfg.grid.cells_per_side());
    const auto cells = tokens.cells(cfg.grid);
    const FullLayouts full(tokens, cfg.layers.region_size);

    InferPass out;
    PassTrace& trace = out.trace;
    trace.n_tokens = N;
    trace.halt_layer.assign(N, L + 1);

    std::vector<std::uint32_t> idx(N);
    for (std::size_t i = 0; i < N; ++i) idx[i] = static_cast<std::uint32_t>(i);
    ad::Var f = embed(tokens, model);
    std::vector<double> scores;  // aligned with idx once a module has run
    bool scored = false;
    Tensor bev_rows(Shape{N, D});
    std::vector<std::uint8_t> included(N, 0);

    auto write_rows = [&](const Tensor& feats, std::size_t row, std::uint32_t token, int layer) {
        trace.halt_layer[token] = layer;
        if (!options.recycle && layer <= L) return;
        included[token] = 1;
        std::copy_n(&feats[row * D], D, &bev_rows[token * D]);
    };

    for (int l = 1; l <= L; ++l) {
        LayerCost observed{l, 0, {}, -1, 0};
        LayerCost dense{l, N, group_sizes(full.at(l).groups), -1, 0};
        const int m = cfg.module_at(l);
        if (m >= 0) {
            ad::Var s;
            if (m == 0) {
                std::vector<std::uint32_t> sub_cells;
                sub_cells.reserve(idx.size());
                for (auto i : idx) sub_cells.push_back(cells[i]);
                const auto dh = score_module_dense(f, sub_cells, side, model.dense_halt);
                f = fuse_latent(f, dh.latent, model.dense_halt.fusion);
                s = dh.scores;
            } else {
                s = score_module_mlp(f, model.mlp_halts[static_cast<std::size_t>(m - 1)]);
            }
            const auto bounds = options.schedule.bounds_for(static_cast<std::size_t>(m));
            const std::vector<std::uint8_t> all(idx.size(), 1);
            const auto thr = threshold(s.value().vec(), options.schedule.u, bounds[0], bounds[1], all);

            HaltStage stage;
            stage.layer = l;
            stage.scores.assign(N, 0.0);
            stage.mask.assign(N, 0);
            stage.threshold = thr.threshold;
            std::vector<std::uint32_t> survivors;
            for (std::size_t r = 0; r < idx.size(); ++r) {
                stage.scores[idx[r]] = s.value()[r];
                stage.mask[idx[r]] = thr.mask[r];
                if (thr.mask[r]) survivors.push_back(idx[r]);
            }
            if (options.tamper_survivors) options.tamper_survivors(l, survivors);

            // rows of the current compacted set, by token id
            std::vector<std::int64_t> row_of(N, -1);
            for (std::size_t r = 0; r < idx.size(); ++r) row_of[idx[r]] = static_cast<std::int64_t>(r);
            std::vector<std::uint8_t> survives(idx.size(), 0);
            std::vector<std::uint32_t> keep_rows;
            for (auto t : survivors) {
                if (t >= N || row_of[t] < 0) throw std::logic_error("survivor list names an inactive token");
                keep_rows.push_back(static_cast<std::uint32_t>(row_of[t]));
                survives[static_cast<std::size_t>(row_of[t])] = 1;
            }
            for (std::size_t r = 0; r < idx.size(); ++r)
                if (!survives[r]) write_rows(f.value(), r, idx[r], l);

            stage.cumulative.assign(N, 0);
            for (auto t : survivors) stage.cumulative[t] = 1;
            trace.record.stages.push_back(std::move(stage));

            observed.module = dense.module = m;
            observed.module_tokens = idx.size();
            dense.module_tokens = N;

            std::vector<double> next_scores;
            next_scores.reserve(keep_rows.size());
            for (auto r : keep_rows) next_scores.push_back(s.value()[r]);
            // record the set entering the module so halted rows stay in the trace
            trace.features.push_back(f.value());
            trace.rows.push_back(idx);
            f = ad::gather_rows(f, keep_rows);
            idx = std::move(survivors);
            scores = std::move(next_scores);
            scored = true;
        } else {
            trace.features.push_back(f.value());
            trace.rows.push_back(idx);
        }

        const RegionLayout layout = make_layout(pick_coords(tokens, idx), cfg.layers.region_size, LayerSpec::shifted(l));
        observed.tokens = idx.size();
        observed.region_sizes = group_sizes(layout.groups);
        trace.observed.push_back(std::move(observed));
        trace.dense.push_back(std::move(dense));

        const auto& weights = model.layers[static_cast<std::size_t>(l - 1)];
        if (scored) {
            const ad::Var w = ad::constant(Tensor(Shape{scores.size()}, scores));
            f = attention_layer(f, &w, weights, layout, cfg.layers);
        } else {
            f = attention_layer(f, nullptr, weights, layout, cfg.layers);
        }
    }
    trace.features.push_back(f.value());
    trace.rows.push_back(idx);
    for (std::size_t r = 0; r < idx.size(); ++r) write_rows(f.value(), r, idx[r], L + 1);

    const Tensor grid = ad::scatter_to_grid(ad::constant(bev_rows), cells, side, side).value();
    out.map = make_map(grid, side, cells, trace.halt_layer, included);
    return out;
}

void compare_records(const HaltRecord& train, const HaltRecord& infer) {
    if (train.stages.size() != infer.stages.size())
        throw EquivalenceError(0, 0, "stage count " + std::to_string(train.stages.size()) + " vs " +
                                         std::to_string(infer.stages.size()));
    for (std::size_t s = 0; s < train.stages.size(); ++s) {
        const auto& a = train.stages[s];
        const auto& b = infer.stages[s];
        const int layer = a.layer;
        if (a.layer != b.layer) throw EquivalenceError(layer, 0, "stage layers differ");
        if (a.mask.size() != b.mask.size()) throw EquivalenceError(layer, 0, "token counts differ");
        const std::vector<std::uint8_t>* active = s > 0 ? &train.stages[s - 1].cumulative : nullptr;
        for (std::size_t i = 0; i < a.mask.size(); ++i) {
            if (a.mask[i] != b.mask[i]) throw EquivalenceError(layer, i, "keep mask differs");
            if (a.cumulative[i] != b.cumulative[i]) throw EquivalenceError(layer, i, "cumulative mask differs");
            const bool live = !active || (*active)[i];
            if (live && a.scores[i] != b.scores[i]) throw EquivalenceError(layer, i, "score differs");
        }
        if (a.threshold != b.threshold && !(std::isnan(a.threshold) && std::isnan(b.threshold)))
            throw EquivalenceError(layer, 0, "threshold differs");
    }
}

double check_equivalence(const TokenSet& tokens, const Model& model, const ForwardOptions& options) {
    ForwardOptions train_opts = options;
    train_opts.tamper_survivors = nullptr;
    const TrainPass t = train_forward(tokens, model, train_opts);
    const InferPass i = infer_forward(tokens, model, options);
    compare_records(t.trace.record, i.trace.record);
    return max_abs_diff(t.map.features, i.map.features);
}

Tensor assemble_bev_tokens(const PassTrace& trace, std::size_t d_model) {
    const std::size_t N = trace.n_tokens;
    Tensor out(Shape{N, d_model});
    const std::size_t layers = trace.features.size();  // L + 1
    for (std::size_t l = 1; l <= layers; ++l) {
        const Tensor& f = trace.features[l - 1];
        const auto& rows = trace.rows[l - 1];
        for (std::size_t r = 0; r < f.dim(0); ++r) {
            const std::size_t token = rows.empty() ? r : rows[r];
            if (static_cast<std::size_t>(trace.halt_layer[token]) != l) continue;
            std::copy_n(&f[r * d_model], d_model, &out[token * d_model]);
        }
    }
    return out;
}

std::uint64_t attention_layer_flops(const ModelConfig& config, std::size_t tokens,
                                    std::span<const std::size_t> region_sizes) {
    const std::uint64_t D = static_cast<std::uint64_t>(config.layers.d_model);
    const std::uint64_t F = static_cast<std::uint64_t>(config.layers.d_ff);
    const std::uint64_t P = static_cast<std::uint64_t>(config.layers.pe_hidden);
    const std::uint64_t H = static_cast<std::uint64_t>(config.layers.heads);
    std::uint64_t total = tokens * (3 * D * D + 2 * P + P * D + 2 * D * F);
    for (auto r : region_sizes) total += static_cast<std::uint64_t>(r) * r * (2 * D + 4 * H);
    return total;
}

std::uint64_t dense_module_flops(const ModelConfig& config, std::size_t tokens) {
    const std::uint64_t side = static_cast<std::uint64_t>(config.grid.cells_per_side());
    const std::uint64_t D = static_cast<std::uint64_t>(config.layers.d_model);
    const std::uint64_t in = std::min<std::uint64_t>(D, kHaltInputCap);
    const std::uint64_t c = config.module1_channels;
    const std::uint64_t s2 = (side - 1) / 2 + 1;
    const std::uint64_t s3 = (s2 - 1) / 2 + 1;
    auto conv = [](std::uint64_t cin, std::uint64_t cout, std::uint64_t out_side) {
        return 9 * cin * cout * out_side * out_side;
    };
    const std::uint64_t convs = conv(in, c, side) + conv(c, 2 * c, s2) + conv(2 * c, 4 * c, s3) +
                                conv(6 * c, 2 * c, s2) + conv(3 * c, c, side);
    return convs + tokens * (c + c * D);
}

std::uint64_t linear_module_flops(const ModelConfig& config, std::size_t tokens) {
    return tokens * std::min<std::uint64_t>(static_cast<std::uint64_t>(config.layers.d_model), kHaltInputCap);
}

FlopReport flop_count(const PassTrace& trace, const ModelConfig& config) {
    FlopReport report;
    const std::uint64_t embed = trace.n_tokens * kRawFeatures * static_cast<std::uint64_t>(config.layers.d_model);
    auto add_pass = [&](const std::string& name, const std::vector<LayerCost>& costs) {
        std::uint64_t total = embed;
        report.rows.push_back({name, 0, trace.n_tokens, embed});
        for (const auto& c : costs) {
            std::uint64_t flops = attention_layer_flops(config, c.tokens, c.region_sizes);
            if (c.module == 0) flops += dense_module_flops(config, c.module_tokens);
            if (c.module > 0) flops += linear_module_flops(config, c.module_tokens);
            report.rows.push_back({name, c.layer, c.tokens, flops});
            total += flops;
        }
        return total;
    };
    report.dense = add_pass("dense", trace.dense);
    report.observed = add_pass("observed", trace.observed);
    report.speedup = report.observed > 0 ? static_cast<double>(report.dense) / static_cast<double>(report.observed) : 1.0;
    return report;
}

void write_flops_csv(std::ostream& os, const FlopReport& report) {
    os << "pass,layer,tokens,flops\n";
    for (const auto& r : report.rows) os << r.pass << ',' << r.layer << ',' << r.tokens << ',' << r.flops << '\n';
}

}  // namespace tokenhalt
