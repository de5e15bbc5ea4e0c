#include "tokenhalt/losses.hpp"

#include "tokenhalt/params.hpp"

#include <cmath>
#include <stdexcept>

namespace tokenhalt {

HeadWeights HeadWeights::create(ParamStore& store, const std::string& prefix, std::size_t d_model, std::size_t hidden,
                                Rng& rng) {
    HeadWeights w;
    w.conv1_w = store.add(prefix + ".conv1.w", init_normal({hidden, d_model, 3, 3}, d_model * 9, rng, std::sqrt(2.0)));
    w.conv1_b = store.add(prefix + ".conv1.b", Tensor(Shape{hidden}));
    w.conv2_w = store.add(prefix + ".conv2.w", init_normal({hidden, hidden, 3, 3}, hidden * 9, rng, std::sqrt(2.0)));
    w.conv2_b = store.add(prefix + ".conv2.b", Tensor(Shape{hidden}));
    w.center_w = store.add(prefix + ".center.w", init_normal({hidden, 1}, hidden, rng, 0.1));
    w.center_b = store.add(prefix + ".center.b", Tensor(Shape{1}, kCenterBiasInit));
    w.box_w = store.add(prefix + ".box.w", init_normal({hidden, kBoxParams}, hidden, rng, 0.1));
    w.box_b = store.add(prefix + ".box.b", Tensor(Shape{kBoxParams}));
    return w;
}

HeadOutput detect_head(const ad::Var& bev, const HeadWeights& w) {
    if (bev.shape().size() != 3) throw ShapeError("detect_head", "bev " + shape_str(bev.shape()) + " is not [D,H,W]");
    const std::size_t cells = bev.shape()[1] * bev.shape()[2];
    const auto h1 = ad::relu(ad::conv2d(bev, w.conv1_w, w.conv1_b, 1));
    const auto h2 = ad::relu(ad::conv2d(h1, w.conv2_w, w.conv2_b, 1));
    // 1x1 heads as matmuls over [cells, hidden]
    const auto per_cell = ad::transpose(ad::reshape(h2, {h2.shape()[0], cells}));
    HeadOutput out;
    out.center_logits = ad::reshape(ad::add_bias(ad::matmul(per_cell, w.center_w), w.center_b), {cells});
    out.box_params = ad::add_bias(ad::matmul(per_cell, w.box_w), w.box_b);
    return out;
}

ad::Var focal_terms(const ad::Var& p, std::span<const double> targets, const FocalParams& fp) {
    if (fp.alpha != 2.0) throw std::invalid_argument("focal loss supports alpha = 2 only");
    if (p.size() != targets.size())
        throw ShapeError("focal", "predictions " + shape_str(p.shape()) + " vs " + std::to_string(targets.size()) + " targets");
    const std::size_t n = targets.size();
    Tensor pos(Shape{n}), neg(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] >= 1.0 - fp.eps)
            pos[i] = 1.0;
        else
            neg[i] = std::pow(1.0 - targets[i], fp.gamma);
    }
    const auto pc = ad::clamp(ad::reshape(p, {n}), fp.eps, 1.0 - fp.eps);
    const auto one_minus = ad::affine(pc, -1.0, 1.0);
    const auto pos_part = ad::mul(ad::mul(ad::constant(pos), ad::square(one_minus)), ad::log(pc));
    const auto neg_part = ad::mul(ad::mul(ad::constant(neg), ad::square(pc)), ad::log(one_minus));
    return ad::affine(ad::add(pos_part, neg_part), -1.0);
}

ad::Var loss_heatmap(const ad::Var& center_logits, const Heatmap& heatmap, const FocalParams& fp) {
    std::size_t centers = 0;
    for (double m : heatmap.values) centers += m >= 1.0 - fp.eps;
    const auto terms = focal_terms(ad::sigmoid(center_logits), heatmap.values, fp);
    return ad::affine(ad::sum(terms), 1.0 / static_cast<double>(std::max<std::size_t>(centers, 1)));
}

ad::Var loss_box(const ad::Var& box_params, const std::vector<BBox>& boxes, const Heatmap& heatmap,
                 const GridSpec& grid, const FocalParams& fp) {
    std::vector<std::uint32_t> cells;
    std::vector<double> targets;
    for (std::size_t c = 0; c < heatmap.values.size(); ++c) {
        if (heatmap.values[c] < 1.0 - fp.eps) continue;
        const int ix = static_cast<int>(c % static_cast<std::size_t>(heatmap.width));
        const int iy = static_cast<int>(c / static_cast<std::size_t>(heatmap.width));
        // the first box whose center cell this is owns the target
        const BBox* owner = nullptr;
        for (const auto& b : boxes)
            if (grid.cell_of(b.lx) == ix && grid.cell_of(b.ly) == iy) {
                owner = &b;
                break;
            }
        if (!owner) continue;
        cells.push_back(static_cast<std::uint32_t>(c));
        const auto enc = encode_box(*owner, grid);
        targets.insert(targets.end(), enc.begin(), enc.end());
    }
    if (cells.empty()) return ad::constant(Tensor::scalar(0.0));
    const auto picked = ad::gather_rows(box_params, cells);
    const auto diff = ad::sub(picked, ad::constant(Tensor(Shape{cells.size(), kBoxParams}, std::move(targets))));
    return ad::mean(ad::abs(diff));
}

ad::Var loss_sparsity(std::span<const SparsityTerm> terms, std::span<const double> token_targets,
                      const FocalParams& fp) {
    ad::Var total = ad::constant(Tensor::scalar(0.0));
    for (const auto& t : terms) {
        std::vector<std::uint32_t> live;
        std::vector<double> m;
        for (std::size_t i = 0; i < t.active.size(); ++i)
            if (t.active[i]) {
                live.push_back(static_cast<std::uint32_t>(i));
                m.push_back(token_targets[i]);
            }
        if (live.empty()) continue;
        const auto s = ad::reshape(ad::gather_rows(ad::reshape(t.scores, {t.scores.size(), 1}), live), {live.size()});
        const auto layer = ad::affine(ad::sum(focal_terms(s, m, fp)), 1.0 / static_cast<double>(live.size()));
        total = ad::add(total, layer);
    }
    return total;
}

ad::Var loss_sparsity_uniform(std::span<const SparsityTerm> terms) {
    ad::Var total = ad::constant(Tensor::scalar(0.0));
    for (const auto& t : terms) {
        Tensor w(Shape{t.active.size()});
        std::size_t live = 0;
        for (std::size_t i = 0; i < t.active.size(); ++i) live += t.active[i];
        if (live == 0) continue;
        for (std::size_t i = 0; i < t.active.size(); ++i) w[i] = t.active[i] ? 1.0 / static_cast<double>(live) : 0.0;
        total = ad::add(total, ad::sum(ad::mul(t.scores, ad::constant(w))));
    }
    return total;
}

LossBreakdown total_loss(const ad::Var& l_box, const ad::Var& l_heat, const ad::Var& l_sparse, const LossWeights& w) {
    LossBreakdown b{l_box, l_heat, l_sparse, {}};
    b.total = ad::add(ad::add(ad::affine(l_box, w.box), ad::affine(l_heat, w.heat)), ad::affine(l_sparse, w.sparse));
    return b;
}

std::vector<double> token_targets(const Heatmap& heatmap, std::span<const std::array<int, 2>> coords) {
    std::vector<double> out;
    out.reserve(coords.size());
    for (const auto& c : coords) out.push_back(heatmap.at(c[0], c[1]));
    return out;
}

}  // namespace tokenhalt
