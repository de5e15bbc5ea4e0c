#include "tokenhalt/scene.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

using namespace tokenhalt;

namespace {

SceneConfig golden_config() {
    SceneConfig c;
    c.n_objects = 3;
    c.n_background_clusters = 2;
    c.extent_m = 40.0;
    return c;
}

int points_in_box(const Scene& s, const BBox& b) {
    int n = 0;
    for (const auto& p : s.points)
        if (in_footprint(b, p.x, p.y) && std::abs(p.z - b.lz) <= b.wz / 2) ++n;
    return n;
}

}  // namespace

TEST_CASE("empty scene has only ground points") {
    SceneConfig c = golden_config();
    c.n_objects = 0;
    c.n_background_clusters = 0;
    const Scene s = generate_scene(7, c);
    CHECK(s.boxes.empty());
    CHECK(!s.points.empty());
    for (const auto& p : s.points) CHECK(p.z < 0.2);
}

TEST_CASE("scene generation is deterministic") {
    const Scene a = generate_scene(7, golden_config());
    const Scene b = generate_scene(7, golden_config());
    std::ostringstream sa, sb;
    write_scene(sa, a);
    write_scene(sb, b);
    CHECK(sa.str() == sb.str());
}

TEST_CASE("golden scene point counts") {
    const Scene s = generate_scene(7, golden_config());
    REQUIRE(s.boxes.size() == 3);
    std::vector<int> counts;
    for (const auto& b : s.boxes) {
        counts.push_back(points_in_box(s, b));
        CHECK(counts.back() >= 20);
    }
    // frozen from the first verified run
    CHECK(counts == std::vector<int>{127, 180, 165});
    CHECK(s.points.size() == 1313);
}

TEST_CASE("scene invariants hold over many seeds") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Scene s = generate_scene(seed, golden_config());
        for (const auto& p : s.points) {
            CHECK(p.x >= -20.0);
            CHECK(p.x < 20.0);
            CHECK(p.y >= -20.0);
            CHECK(p.y < 20.0);
        }
        for (const auto& b : s.boxes) {
            CHECK(b.wx > 0);
            CHECK(b.wy > 0);
            CHECK(b.wz > 0);
            CHECK(b.alpha >= -M_PI);
            CHECK(b.alpha < M_PI);
        }
    }
}

TEST_CASE("scene file round trip is bit exact") {
    const Scene s = generate_scene(11, golden_config());
    std::stringstream ss;
    write_scene(ss, s);
    const Scene r = read_scene(ss);
    REQUIRE(r.points.size() == s.points.size());
    REQUIRE(r.boxes.size() == s.boxes.size());
    for (std::size_t i = 0; i < s.points.size(); ++i) {
        CHECK(r.points[i].x == s.points[i].x);
        CHECK(r.points[i].y == s.points[i].y);
        CHECK(r.points[i].z == s.points[i].z);
        CHECK(r.points[i].intensity == s.points[i].intensity);
        CHECK(r.points[i].elongation == s.points[i].elongation);
    }
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
        CHECK(r.boxes[i].alpha == s.boxes[i].alpha);
        CHECK(r.boxes[i].class_id == s.boxes[i].class_id);
    }
}

TEST_CASE("malformed scene files are rejected") {
    std::istringstream bad("scene 1 40\npoints 2\n0 0 0 0 0\n");
    CHECK_THROWS_AS(read_scene(bad), SceneFormatError);
    std::istringstream junk("scene 1 40\npoints 1\n0 0 zero 0 0\nboxes 0\n");
    CHECK_THROWS_AS(read_scene(junk), SceneFormatError);
}

TEST_CASE("voxelize basics") {
    const GridSpec grid{40.0, 0.5};
    Scene s;
    s.points.push_back({grid.cell_center(10), grid.cell_center(20), 0.0, 0.5, 0.5});
    TokenSet t = voxelize(s, grid);
    REQUIRE(t.size() == 1);
    CHECK(t.raw.at(0, 0) == 0.0);
    CHECK(t.raw.at(0, 1) == 0.0);
    CHECK(t.raw.at(0, 2) == 0.0);
    CHECK(t.grid_coords[0] == std::array<int, 2>{10, 20});

    s.points.push_back({grid.cell_center(10) + 0.1, grid.cell_center(20) - 0.1, 0.5, 0.1, 0.2});
    t = voxelize(s, grid);
    REQUIRE(t.size() == 1);
    CHECK(t.n_points[0] == 2);

    const TokenSet empty = voxelize(Scene{}, grid);
    CHECK(empty.size() == 0);
}

TEST_CASE("voxelize token count matches brute-force occupancy") {
    const GridSpec grid{40.0, 0.5};
    const Scene s = generate_scene(7, golden_config());
    std::set<std::pair<int, int>> occupied;
    for (const auto& p : s.points) {
        const int ix = static_cast<int>(std::floor((p.x + 20.0) / 0.5));
        const int iy = static_cast<int>(std::floor((p.y + 20.0) / 0.5));
        occupied.insert({ix, iy});
    }
    const TokenSet t = voxelize(s, grid);
    CHECK(t.size() == occupied.size());
    std::set<std::array<int, 2>> unique(t.grid_coords.begin(), t.grid_coords.end());
    CHECK(unique.size() == t.size());
}

TEST_CASE("voxelize is permutation invariant") {
    const GridSpec grid{40.0, 0.5};
    Scene s = generate_scene(3, golden_config());
    const TokenSet a = voxelize(s, grid);
    Rng rng(9);
    for (std::size_t i = s.points.size(); i > 1; --i) std::swap(s.points[i - 1], s.points[rng.below(i)]);
    const TokenSet b = voxelize(s, grid);
    CHECK(a.grid_coords == b.grid_coords);
    CHECK(a.raw.vec() == b.raw.vec());
}

TEST_CASE("voxel size must divide the extent") {
    CHECK_THROWS(GridSpec{40.0, 0.3}.cells_per_side());
}

TEST_CASE("region assignment arithmetic") {
    CHECK(region_cell({5, 9}, 4, false) == std::array<int, 2>{1, 2});
    CHECK(region_cell({5, 9}, 4, true) == std::array<int, 2>{1, 2});
    TokenSet t;
    t.grid_coords = {{0, 0}, {3, 1}, {2, 3}, {1, 2}};
    assign_regions(t, 4);
    CHECK(std::set<int>(t.region_id.begin(), t.region_id.end()).size() == 1);
    CHECK(t.shifted_region_id.size() == t.size());
}

TEST_CASE("heatmap values") {
    const GridSpec grid{40.0, 0.5};
    BBox b;
    b.lx = grid.cell_center(40);
    b.ly = grid.cell_center(40);
    b.wx = 6.0;
    b.wy = 6.0;
    b.wz = 1.5;
    const Heatmap hm = build_heatmap({b}, grid);
    CHECK(hm.at(40, 40) == 1.0);
    // sigma = 0.25 * 6 * sqrt(2); a cell at distance sigma * sqrt(2) = 3 m lies 6 cells away
    const double sigma = 0.25 * std::hypot(6.0, 6.0);
    CHECK(std::abs(sigma * std::sqrt(2.0) - 3.0) < 1e-12);
    CHECK(hm.at(40, 40 - 6) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(hm.at(0, 0) == 0.0);
    for (double v : hm.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    // monotone along a ray inside the footprint
    for (int dx = 0; dx < 5; ++dx) CHECK(hm.at(40 + dx, 40) >= hm.at(40 + dx + 1, 40));
}

TEST_CASE("heatmap is exactly one only at box centers") {
    const GridSpec grid{40.0, 0.5};
    const Scene s = generate_scene(7, golden_config());
    const Heatmap hm = build_heatmap(s.boxes, grid);
    int ones = 0;
    for (double v : hm.values) ones += v == 1.0;
    CHECK(ones == static_cast<int>(s.boxes.size()));
    for (int iy = 0; iy < hm.width; ++iy)
        for (int ix = 0; ix < hm.width; ++ix) {
            bool inside = false;
            for (const auto& b : s.boxes) inside = inside || in_footprint(b, grid.cell_center(ix), grid.cell_center(iy));
            if (!inside && hm.at(ix, iy) > 0) {
                // only the center cell may sit outside a thin footprint
                bool center = false;
                for (const auto& b : s.boxes) center = center || (grid.cell_of(b.lx) == ix && grid.cell_of(b.ly) == iy);
                CHECK(center);
            }
        }
}
