#include "tokenhalt/pseudo_grad.hpp"

#include "tokenhalt/halting.hpp"
#include "tokenhalt/util.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>

namespace tokenhalt {

ReducedProblem make_reduced_problem(std::uint64_t seed, const PseudoGradConfig& config) {
    config.spec.validate();
    const auto side = static_cast<std::uint64_t>(config.grid_side);
    if (config.tokens == 0 || config.tokens > side * side)
        throw std::invalid_argument("reduced problem needs between 1 and grid_side^2 tokens");
    ReducedProblem p;
    p.spec = config.spec;
    Rng rng = Rng::stream(seed, "pseudo_grad");
    p.weights = AttentionLayerWeights::create(p.store, "layer", p.spec, rng);
    if (config.zero_residual) {
        p.weights.w_v.mutable_value().fill(0.0);
        p.weights.mlp_w2.mutable_value().fill(0.0);
        p.weights.mlp_b2.mutable_value().fill(0.0);
    }

    std::set<std::array<int, 2>> taken;
    std::vector<std::array<int, 2>> coords;
    while (coords.size() < config.tokens) {
        const std::array<int, 2> c{static_cast<int>(rng.below(side)), static_cast<int>(rng.below(side))};
        if (taken.insert(c).second) coords.push_back(c);
    }
    std::sort(coords.begin(), coords.end(), [](const auto& a, const auto& b) {
        return std::tie(a[1], a[0]) < std::tie(b[1], b[0]);
    });
    p.layout = make_layout(coords, p.spec.region_size, false);

    const auto D = static_cast<std::size_t>(p.spec.d_model);
    p.features = Tensor(Shape{config.tokens, D});
    for (auto& v : p.features.vec()) v = rng.normal();
    p.target = Tensor(Shape{config.tokens, D});
    for (auto& v : p.target.vec()) v = config.target_scale * rng.normal();
    p.halted.assign(config.tokens, 0);
    p.kept_scores.assign(config.tokens, 0.0);
    for (std::size_t i = 0; i < config.tokens; ++i) {
        p.halted[i] = rng.uniform() < config.halted_fraction;
        p.kept_scores[i] = rng.uniform(0.1, 1.0);
    }
    return p;
}

namespace {

ad::Var reduced_loss(const ReducedProblem& p, const ad::Var& scores, const ad::Var& keep) {
    const ad::Var f = ad::constant(p.features);
    const ad::Var w = ad::mul(scores, keep);
    const ad::Var out = attention_layer(f, &w, p.weights, p.layout, p.spec);
    const ad::Var q = ad::add(ad::scale_rows(f, ad::affine(keep, -1.0, 1.0)), ad::scale_rows(out, keep));
    return ad::affine(ad::sum(ad::square(ad::sub(q, ad::constant(p.target)))), 0.5);
}

Tensor mask_tensor(const std::vector<std::uint8_t>& m) {
    Tensor t(Shape{m.size()});
    for (std::size_t i = 0; i < m.size(); ++i) t[i] = m[i];
    return t;
}

}  // namespace

std::vector<PseudoGradRow> pseudo_grad_experiment(const ReducedProblem& p, std::span<const double> u_list) {
    const std::size_t N = p.features.dim(0);
    std::vector<PseudoGradRow> rows;
    for (double u : u_list) {
        if (!(u > 0.0 && u < 0.1)) throw std::invalid_argument("pseudo-gradient u must lie in (0, 0.1)");
        Tensor s(Shape{N});
        std::vector<std::uint8_t> keep(N);
        for (std::size_t i = 0; i < N; ++i) {
            s[i] = p.halted[i] ? 0.9 * u : p.kept_scores[i];
            keep[i] = s[i] >= u;
        }
        // one straight-through backward gives every token's pseudo-gradient
        const ad::Var sv = ad::parameter(s);
        const ad::Var k = ste_apply(sv, keep);
        const ad::Var loss = reduced_loss(p, sv, k);
        ad::backward(loss);
        const Tensor grad = sv.grad();
        const double base = loss.value().item();

        for (std::size_t i = 0; i < N; ++i) {
            if (keep[i]) continue;
            auto flipped = keep;
            flipped[i] = 1;
            const double moved =
                reduced_loss(p, ad::constant(s), ad::constant(mask_tensor(flipped))).value().item();
            PseudoGradRow r;
            r.u = u;
            r.token = i;
            r.delta = moved - base;
            r.grad = grad[i];
            r.abs_err = std::abs(r.delta - r.grad);
            rows.push_back(r);
        }
    }
    return rows;
}

PseudoGradSummary summarize(std::span<const PseudoGradRow> rows) {
    std::map<double, std::vector<double>> by_u;
    for (const auto& r : rows) by_u[r.u].push_back(r.abs_err);
    if (by_u.size() < 2) throw std::invalid_argument("slope needs at least two distinct u values");
    PseudoGradSummary s;
    for (auto& [u, errs] : by_u) {
        s.u.push_back(u);
        s.median_err.push_back(median(errs));
    }
    std::vector<double> x, y;
    for (std::size_t i = 0; i < s.u.size(); ++i) {
        x.push_back(std::log(s.u[i]));
        y.push_back(std::log(std::max(s.median_err[i], 1e-300)));
    }
    s.slope = fit_slope(x, y);
    return s;
}

void write_pseudo_grad_csv(std::ostream& os, std::span<const PseudoGradRow> rows) {
    os << "u,token_index,delta,grad,abs_err\n";
    for (const auto& r : rows)
        os << fmt_num(r.u) << ',' << r.token << ',' << fmt_num(r.delta) << ',' << fmt_num(r.grad) << ','
           << fmt_num(r.abs_err) << '\n';
}

}  // namespace tokenhalt
