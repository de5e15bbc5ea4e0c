#include "tokenhalt/halting.hpp"

#include "tokenhalt/params.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tokenhalt {

namespace {

ad::Var conv_weight(ParamStore& store, const std::string& name, std::size_t cout, std::size_t cin, Rng& rng) {
    return store.add(name, init_normal({cout, cin, 3, 3}, cin * 9, rng, std::sqrt(2.0)));
}

}  // namespace

DenseHaltWeights DenseHaltWeights::create(ParamStore& store, const std::string& prefix, std::size_t d_model,
                                          std::size_t channels, Rng& rng) {
    if (channels == 0) throw std::invalid_argument("halt.module1_channels must be >= 1");
    DenseHaltWeights w;
    w.in_features = std::min(d_model, kHaltInputCap);
    w.channels = channels;
    const std::size_t c = channels;
    w.enc1_w = conv_weight(store, prefix + ".enc1.w", c, w.in_features, rng);
    w.enc1_b = store.add(prefix + ".enc1.b", Tensor(Shape{c}));
    w.enc2_w = conv_weight(store, prefix + ".enc2.w", 2 * c, c, rng);
    w.enc2_b = store.add(prefix + ".enc2.b", Tensor(Shape{2 * c}));
    w.enc3_w = conv_weight(store, prefix + ".enc3.w", 4 * c, 2 * c, rng);
    w.enc3_b = store.add(prefix + ".enc3.b", Tensor(Shape{4 * c}));
    w.dec2_w = conv_weight(store, prefix + ".dec2.w", 2 * c, 6 * c, rng);
    w.dec2_b = store.add(prefix + ".dec2.b", Tensor(Shape{2 * c}));
    w.dec1_w = conv_weight(store, prefix + ".dec1.w", c, 3 * c, rng);
    w.dec1_b = store.add(prefix + ".dec1.b", Tensor(Shape{c}));
    w.score_ln_gamma = store.add(prefix + ".score.ln.gamma", Tensor(Shape{c}, 1.0));
    w.score_ln_beta = store.add(prefix + ".score.ln.beta", Tensor(Shape{c}));
    w.score_w = store.add(prefix + ".score.w", init_normal({c, 1}, c, rng, 0.1));
    w.score_b = store.add(prefix + ".score.b", Tensor(Shape{1}));
    w.fusion.weight = store.add(prefix + ".fuse.w", init_normal({c, d_model}, c, rng, 0.1));
    w.fusion.bias = store.add(prefix + ".fuse.b", Tensor(Shape{d_model}));
    return w;
}

MlpHaltWeights MlpHaltWeights::create(ParamStore& store, const std::string& prefix, std::size_t d_model, Rng& rng) {
    MlpHaltWeights w;
    w.in_features = std::min(d_model, kHaltInputCap);
    w.weight = store.add(prefix + ".w", init_normal({w.in_features, 1}, w.in_features, rng, 0.1));
    w.bias = store.add(prefix + ".b", Tensor(Shape{1}));
    return w;
}

namespace {

ad::Var leading_features(const ad::Var& tokens, std::size_t count) {
    if (tokens.shape().size() != 2 || tokens.shape()[1] < count)
        throw ShapeError("halt_input", "tokens " + shape_str(tokens.shape()) + " need " + std::to_string(count) + " features");
    return tokens.shape()[1] == count ? tokens : ad::slice_cols(tokens, 0, count);
}

ad::Var flatten_scores(const ad::Var& logits) { return ad::reshape(ad::sigmoid(logits), {logits.shape()[0]}); }

}  // namespace

DenseHaltOutput score_module_dense(const ad::Var& tokens, std::span<const std::uint32_t> cells, std::size_t grid_side,
                                   const DenseHaltWeights& w) {
    const auto x = ad::scatter_to_grid(leading_features(tokens, w.in_features), cells, grid_side, grid_side);
    const auto e1 = ad::relu(ad::conv2d(x, w.enc1_w, w.enc1_b, 1));
    const auto e2 = ad::relu(ad::conv2d(e1, w.enc2_w, w.enc2_b, 2));
    const auto e3 = ad::relu(ad::conv2d(e2, w.enc3_w, w.enc3_b, 2));
    const auto up3 = ad::upsample_nearest(e3, e2.shape()[1], e2.shape()[2]);
    const auto d2 = ad::relu(ad::conv2d(ad::concat({up3, e2}, 0), w.dec2_w, w.dec2_b, 1));
    const auto up2 = ad::upsample_nearest(d2, e1.shape()[1], e1.shape()[2]);
    const auto d1 = ad::relu(ad::conv2d(ad::concat({up2, e1}, 0), w.dec1_w, w.dec1_b, 1));
    DenseHaltOutput out;
    out.latent = ad::gather_from_grid(d1, cells);
    // the latent also feeds the fusion path, so its scale drifts with the task
    // losses; normalizing keeps the score logits from saturating
    const auto normed = ad::layer_norm(out.latent, w.score_ln_gamma, w.score_ln_beta);
    out.scores = flatten_scores(ad::add_bias(ad::matmul(normed, w.score_w), w.score_b));
    return out;
}

ad::Var score_module_mlp(const ad::Var& tokens, const MlpHaltWeights& w) {
    const auto x = leading_features(tokens, w.in_features);
    return flatten_scores(ad::add_bias(ad::matmul(x, w.weight), w.bias));
}

ad::Var fuse_latent(const ad::Var& tokens, const ad::Var& latent, const FusionWeights& w) {
    return ad::add(tokens, ad::add_bias(ad::matmul(latent, w.weight), w.bias));
}

double quantile(std::span<const double> sorted, double alpha) {
    const double n = static_cast<double>(sorted.size());
    // the small slack keeps alpha * n from rounding up past an exact integer
    const double pos = std::ceil(alpha * n - 1e-9);
    if (pos >= n) return std::numeric_limits<double>::infinity();
    return sorted[static_cast<std::size_t>(std::max(pos, 0.0))];
}

ThresholdResult threshold(std::span<const double> scores, double u, double alpha_lo, double alpha_hi,
                          std::span<const std::uint8_t> active) {
    if (!(alpha_lo >= 0.0 && alpha_lo <= alpha_hi && alpha_hi <= 1.0))
        throw std::invalid_argument("threshold bounds must satisfy 0 <= alpha_lo <= alpha_hi <= 1");
    if (active.size() != scores.size()) throw std::invalid_argument("threshold: active mask size differs from scores");
    std::vector<double> live;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (active[i]) live.push_back(scores[i]);
    ThresholdResult r;
    r.mask.assign(scores.size(), 0);
    if (live.empty()) {
        r.threshold = u;
        return r;
    }
    std::sort(live.begin(), live.end());
    r.threshold = std::clamp(u, quantile(live, alpha_lo), quantile(live, alpha_hi));
    for (std::size_t i = 0; i < scores.size(); ++i) r.mask[i] = active[i] && scores[i] >= r.threshold;
    return r;
}

ad::Var ste_apply(const ad::Var& scores, std::span<const std::uint8_t> mask) {
    if (mask.size() != scores.size())
        throw ShapeError("ste", "mask of " + std::to_string(mask.size()) + " for scores " + shape_str(scores.shape()));
    Tensor values(scores.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) values[i] = mask[i] ? 1.0 : 0.0;
    return ad::custom(
        "ste", {scores}, [values](std::span<const Tensor>) { return values; },
        [](const Tensor& upstream, std::span<const Tensor>) { return std::vector<Tensor>{upstream}; });
}

}  // namespace tokenhalt
