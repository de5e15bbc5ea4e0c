#include "tokenhalt/model.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

using namespace tokenhalt;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("tokenhalt_test_" + name);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    os << s;
}

ModelConfig small_config() {
    ModelConfig c;
    c.layers.d_model = 8;
    c.layers.heads = 2;
    c.layers.d_ff = 16;
    c.layers.pe_hidden = 4;
    c.layers.n_layers = 3;
    c.halt_layers = {1, 2, 3};
    c.module1_channels = 2;
    c.head_hidden = 4;
    return c;
}

}  // namespace

TEST_CASE("model parameters are named by role and seeded") {
    const Model a(small_config(), 5);
    const Model b(small_config(), 5);
    const Model c(small_config(), 6);
    CHECK(a.params.contains("embed.w"));
    CHECK(a.params.contains("layer3.w_q"));
    CHECK(a.params.contains("halt1.enc1.w"));
    CHECK(a.params.contains("halt3.w"));
    CHECK(a.params.contains("head.center.b"));
    CHECK(a.mlp_halts.size() == 2);
    CHECK(max_abs_diff(a.embed_w.value(), b.embed_w.value()) == 0.0);
    CHECK(max_abs_diff(a.embed_w.value(), c.embed_w.value()) > 0.0);
}

TEST_CASE("model config validation") {
    ModelConfig c = small_config();
    c.halt_layers = {};
    CHECK_THROWS_AS(Model(c, 1), std::invalid_argument);
    c.halt_layers = {2, 1};
    CHECK_THROWS_AS(Model(c, 1), std::invalid_argument);
    c.halt_layers = {4};
    CHECK_THROWS_AS(Model(c, 1), std::invalid_argument);
    CHECK(small_config().module_at(2) == 1);
    CHECK(ModelConfig{}.module_at(2) == -1);
}

TEST_CASE("clone copies values into independent storage") {
    Model a(small_config(), 3);
    Model b = a.clone();
    CHECK(max_abs_diff(a.layers[0].w_q.value(), b.layers[0].w_q.value()) == 0.0);
    b.layers[0].w_q.mutable_value()[0] += 1.0;
    CHECK(max_abs_diff(a.layers[0].w_q.value(), b.layers[0].w_q.value()) == 1.0);
}

TEST_CASE("checkpoint round trip is bit exact") {
    const Model a(small_config(), 9);
    const auto path = temp_file("roundtrip.ckpt");
    save_checkpoint(path, a);
    const Model b = load_checkpoint(path);
    CHECK(b.config.halt_layers == a.config.halt_layers);
    CHECK(b.config.layers.d_model == 8);
    const auto& ea = a.params.entries();
    const auto& eb = b.params.entries();
    REQUIRE(ea.size() == eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) {
        CHECK(ea[i].name == eb[i].name);
        CHECK(max_abs_diff(ea[i].var.value(), eb[i].var.value()) == 0.0);
    }
    // saving the loaded model reproduces the file
    const auto again = temp_file("roundtrip2.ckpt");
    save_checkpoint(again, b);
    CHECK(slurp(path) == slurp(again));
    std::filesystem::remove(path);
    std::filesystem::remove(again);
}

TEST_CASE("corrupted checkpoints are rejected") {
    const Model a(small_config(), 9);
    const auto path = temp_file("corrupt.ckpt");
    save_checkpoint(path, a);
    const std::string good = slurp(path);

    SUBCASE("flipped value byte") {
        std::string bad = good;
        bad[bad.size() - 20] ^= 0x5a;
        spit(path, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), CheckpointError);
    }
    SUBCASE("truncated values") {
        spit(path, good.substr(0, good.size() - 8));
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), CheckpointError);
    }
    SUBCASE("trailing bytes") {
        spit(path, good + "x");
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("trailing"), CheckpointError);
    }
    SUBCASE("wrong magic") {
        spit(path, "not a checkpoint\n");
        CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    }
    SUBCASE("manifest shape mismatch") {
        std::string bad = good;
        const auto at = bad.find("embed.w 2 6 8");
        REQUIRE(at != std::string::npos);
        bad.replace(at, 13, "embed.w 2 6 9");
        spit(path, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("embed.w"), CheckpointError);
    }
    SUBCASE("missing file") {
        std::filesystem::remove(path);
        CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    }
    std::filesystem::remove(path);
}
