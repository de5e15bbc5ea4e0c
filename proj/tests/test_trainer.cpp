#include "tokenhalt/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace tokenhalt;

namespace {

TrainConfig tiny_config() {
    std::istringstream is(R"(
        seed = 3
        train.epochs = 1
        train.scenes_per_epoch = 3
        scene.extent_m = 12
        scene.n_objects = 1
        scene.n_background_clusters = 1
        scene.n_ground_points = 120
        model.d_model = 8
        model.heads = 2
        model.d_ff = 16
        model.pe_hidden = 4
        model.layers = 2
        model.halt_layers = 1, 2
        model.head_hidden = 4
        halt.module1_channels = 2
    )");
    return parse_config(is);
}

TrainConfig parse(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

std::string config_error_key(const std::string& text) {
    try {
        parse(text);
    } catch (const ConfigError& e) {
        return e.key();
    }
    return "<none>";
}

bool inside_rotated_rect(const BBox& b, double x, double y) {
    const double dx = x - b.lx, dy = y - b.ly;
    const double along = dx * std::cos(b.alpha) + dy * std::sin(b.alpha);
    const double across = -dx * std::sin(b.alpha) + dy * std::cos(b.alpha);
    return std::abs(along) <= b.wx / 2 && std::abs(across) <= b.wy / 2;
}

}  // namespace

TEST_CASE("config file sets keys and keeps defaults elsewhere") {
    const TrainConfig c = parse("seed = 9  # comment\n\ntrain.lr_peak = 0.003\nhalt.alpha_hi_2 = 0.97\nmodel.halt_layers = 1,2\n");
    CHECK(c.seed == 9);
    CHECK(c.lr_peak == 0.003);
    CHECK(c.schedule.bounds.at(1)[1] == 0.97);
    CHECK(c.model.halt_layers == std::vector<int>{1, 2});
    CHECK(c.epochs == TrainConfig{}.epochs);
    CHECK(c.grad_clip_norm == 10.0);
}

TEST_CASE("config errors name the offending key") {
    CHECK(config_error_key("train.epoch = 3\n") == "train.epoch");
    CHECK(config_error_key("seed = 1\nseed = 2\n") == "seed");
    CHECK(config_error_key("train.lr_peak = fast\n") == "train.lr_peak");
    CHECK(config_error_key("train.augment = maybe\n") == "train.augment");
    CHECK(config_error_key("train.warmup_fraction = 1.5\n") == "train.warmup_fraction");
    CHECK(config_error_key("train.lr_start = 0.01\ntrain.lr_peak = 0.001\n") == "train.lr_peak");
    CHECK(config_error_key("scene.extent_m = 20\n") == "<none>");
    try {
        parse("halt.u =\n");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()) == "config key 'halt.u': missing value");
    }
    CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("learning rate warms up to the peak then anneals to the floor") {
    TrainConfig c;
    const std::size_t total = 600;
    const auto warm = static_cast<std::size_t>(std::llround(c.warmup_fraction * (total - 1)));
    CHECK(lr_at(c, 0, total) == c.lr_start);
    CHECK(lr_at(c, warm, total) == c.lr_peak);
    CHECK(lr_at(c, total - 1, total) == doctest::Approx(c.lr_floor).epsilon(1e-12));
    CHECK(lr_at(c, warm / 2, total) < c.lr_peak);
    for (std::size_t s = warm; s + 1 < total; ++s) CHECK(lr_at(c, s + 1, total) <= lr_at(c, s, total));
}

TEST_CASE("gradient clipping bounds the global norm") {
    ParamStore store;
    const auto a = store.add("a", Tensor(Shape{2}));
    const auto b = store.add("b", Tensor(Shape{1}));
    ad::backward(ad::sum(ad::add(ad::affine(a, 3.0), ad::affine(ad::concat({b, b}, 0), 2.0))));
    // grads: a = (3, 3), b = 4
    CHECK(clip_grad_norm(store, 100.0) == doctest::Approx(std::sqrt(34.0)));
    CHECK(a.grad()[0] == 3.0);
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(std::sqrt(34.0)));
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(1.0));
    CHECK(b.grad()[0] == doctest::Approx(4.0 / std::sqrt(34.0)));
}

TEST_CASE("first AdamW step moves each weight by about lr against its gradient") {
    ParamStore store;
    Tensor m0(Shape{2, 2}, 1.0);
    const auto m = store.add("m", m0);
    const auto v = store.add("v", Tensor(Shape{2}, 1.0));
    ad::backward(ad::add(ad::sum(ad::affine(m, 0.5)), ad::sum(ad::affine(v, -2.0))));
    AdamW opt(store, 0.1);
    opt.step(0.01);
    // matrices decay first, vectors do not
    CHECK(m.value()[0] == doctest::Approx(1.0 - 0.01 * 0.1 - 0.01).epsilon(1e-9));
    CHECK(v.value()[0] == doctest::Approx(1.0 + 0.01).epsilon(1e-9));
}

TEST_CASE("foreground flags match a rotated-rectangle oracle") {
    const GridSpec grid;
    const Scene scene = generate_scene(7, SceneConfig{});
    const TokenSet tokens = voxelize(scene, grid);
    const auto fg = classify_tokens_fg_bg(tokens, scene.boxes, grid);
    std::size_t expected = 0, got = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const double x = grid.cell_center(tokens.grid_coords[i][0]);
        const double y = grid.cell_center(tokens.grid_coords[i][1]);
        bool inside = false;
        for (const auto& b : scene.boxes) inside = inside || inside_rotated_rect(b, x, y);
        CHECK(static_cast<bool>(fg[i]) == inside);
        expected += inside;
        got += fg[i];
    }
    CHECK(got == expected);
    CHECK(got > 0);

    // every box center cell that holds a token is foreground
    for (const auto& b : scene.boxes)
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens.grid_coords[i][0] == grid.cell_of(b.lx) && tokens.grid_coords[i][1] == grid.cell_of(b.ly) &&
                inside_rotated_rect(b, grid.cell_center(grid.cell_of(b.lx)), grid.cell_center(grid.cell_of(b.ly))))
                CHECK(fg[i] == 1);

    const auto none = classify_tokens_fg_bg(tokens, {}, grid);
    CHECK(std::count(none.begin(), none.end(), 1) == 0);
}

TEST_CASE("zero epochs return the initial weights") {
    TrainConfig c = tiny_config();
    c.epochs = 0;
    const TrainResult r = train(c);
    const Model init(c.model, c.seed);
    CHECK(r.metrics.empty());
    const auto& a = r.model.params.entries();
    const auto& b = init.params.entries();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i].var.value(), b[i].var.value()) == 0.0);
}

TEST_CASE("training is reproducible and reports one sparsity row per module and step") {
    const TrainConfig c = tiny_config();
    const auto run = [&] {
        const TrainResult r = train(c);
        std::ostringstream metrics, sparsity;
        write_metrics_csv(metrics, r.metrics);
        write_sparsity_csv(sparsity, r.sparsity);
        return std::pair{metrics.str(), sparsity.str()};
    };
    const auto first = run();
    const auto second = run();
    CHECK(first == second);
    CHECK(first.first.rfind("step,l_box,l_heat,l_sparse,total\n0,", 0) == 0);
    CHECK(first.second.rfind("step,layer,fg_keep,bg_keep,sparsity\n0,1,", 0) == 0);
    CHECK(std::count(first.second.begin(), first.second.end(), '\n') == 1 + 3 * 2);
}

TEST_CASE("one small step on the total loss lowers it") {
    TrainConfig c = tiny_config();
    int failures = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Model model(c.model, seed);
        const Sample sample =
            make_sample(generate_scene(scene_seed(seed, "smoke", 0), c.scene), c.model.grid);
        model.params.zero_grad();
        const double before = run_step(sample, model, c, true).metrics.total;
        double sq = 0;
        for (auto& e : model.params.entries())
            if (e.var.has_grad()) {
                const Tensor g = e.var.grad();
                for (double v : g.vec()) sq += v * v;
            }
        const double lr = 1e-4 / std::max(std::sqrt(sq), 1e-12);
        for (auto& e : model.params.entries())
            if (e.var.has_grad()) {
                const Tensor g = e.var.grad();
                Tensor& w = e.var.mutable_value();
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
            }
        model.params.zero_grad();
        const double after = run_step(sample, model, c, false).metrics.total;
        failures += !(after < before);
    }
    CHECK(failures <= 2);
}

TEST_CASE("a non-finite loss aborts with the step and components") {
    TrainConfig c = tiny_config();
    Model model(c.model, c.seed);
    model.head.center_b.mutable_value()[0] = std::nan("");
    try {
        train_from(std::move(model), c, 1);
        FAIL("expected a training error");
    } catch (const TrainingError& e) {
        CHECK(e.step() == 0);
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
}
