#include "tokenhalt/sweep.hpp"

#include <doctest.h>

#include <sstream>

using namespace tokenhalt;

namespace {

TrainConfig tiny_config() {
    std::istringstream is(R"(
        seed = 5
        train.epochs = 1
        train.scenes_per_epoch = 2
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
        sweep.finetune_steps = 1
        sweep.eval_scenes = 2
    )");
    return parse_config(is);
}

}  // namespace

TEST_CASE("u grid parsing") {
    const auto g = parse_u_grid("off,0.005,0.2");
    REQUIRE(g.size() == 3);
    CHECK(!g[0].u);
    CHECK(*g[1].u == 0.005);
    CHECK(*g[2].u == 0.2);
    CHECK_THROWS_AS(parse_u_grid(""), std::invalid_argument);
    CHECK_THROWS_AS(parse_u_grid("0.1,x"), std::invalid_argument);
    CHECK_THROWS_AS(parse_u_grid("1.5"), std::invalid_argument);
}

TEST_CASE("sweep rows are sorted by speedup and reproducible") {
    const TrainConfig c = tiny_config();
    const auto grid = parse_u_grid("0.9,off,0.01");
    const auto rows = run_sweep(c, grid);
    REQUIRE(rows.size() == 3);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i - 1].speedup <= rows[i].speedup);
    // the disabled point runs everything dense
    const auto off = std::find_if(rows.begin(), rows.end(), [](const SweepRow& r) { return !r.halting; });
    REQUIRE(off != rows.end());
    CHECK(off->speedup == 1.0);
    CHECK(off->dense_flops == off->observed_flops);
    for (const auto& r : rows) CHECK(r.keep.size() == 2);

    std::ostringstream a, b;
    write_sweep_csv(a, rows);
    write_sweep_csv(b, run_sweep(c, grid));
    CHECK(a.str() == b.str());
    CHECK(a.str().rfind("u,halting,alpha_lo_1,alpha_hi_1,alpha_lo_2,alpha_hi_2,", 0) == 0);
}
