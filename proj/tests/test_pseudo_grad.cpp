#include "tokenhalt/pseudo_grad.hpp"
#include "tokenhalt/util.hpp"

#include <doctest.h>

#include <sstream>

using namespace tokenhalt;

TEST_CASE("pseudo-gradient is exact when the layer is the identity") {
    PseudoGradConfig cfg;
    cfg.zero_residual = true;
    const auto p = make_reduced_problem(3, cfg);
    const std::vector<double> us{0.02, 0.005};
    const auto rows = pseudo_grad_experiment(p, us);
    REQUIRE(!rows.empty());
    for (const auto& r : rows) CHECK(r.abs_err < 1e-8);
}

TEST_CASE("pseudo-gradient error shrinks linearly with the threshold") {
    PseudoGradConfig cfg;
    std::vector<PseudoGradRow> rows;
    const std::vector<double> us{0.04, 0.02, 0.01, 0.005};
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto r = pseudo_grad_experiment(make_reduced_problem(seed, cfg), us);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    const auto s = summarize(rows);
    REQUIRE(s.u.size() == 4);
    CHECK(s.slope >= 0.8);
    // u sorted ascending: 0.005, 0.01, 0.02, 0.04
    const double ratio = s.median_err[1] / s.median_err[2];
    CHECK(ratio >= 0.25);
    CHECK(ratio <= 1.0);
}

TEST_CASE("pseudo-gradient rows only cover halted tokens and write a csv") {
    PseudoGradConfig cfg;
    cfg.tokens = 20;
    const auto p = make_reduced_problem(1, cfg);
    const std::vector<double> us{0.01};
    const auto rows = pseudo_grad_experiment(p, us);
    std::size_t halted = 0;
    for (auto h : p.halted) halted += h;
    CHECK(rows.size() == halted);
    for (const auto& r : rows) CHECK(p.halted[r.token]);
    std::ostringstream os;
    write_pseudo_grad_csv(os, rows);
    CHECK(os.str().rfind("u,token_index,delta,grad,abs_err\n", 0) == 0);
    CHECK_THROWS_AS(summarize(rows), std::invalid_argument);
    const std::vector<double> bad{0.5};
    CHECK_THROWS_AS(pseudo_grad_experiment(p, bad), std::invalid_argument);
}

TEST_CASE("numeric helpers") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS(median({}));
    const std::vector<double> x{0, 1, 2}, y{1, 3, 5};
    CHECK(fit_slope(x, y) == doctest::Approx(2.0));
    CHECK(fmt_num(0.1) == "0.1");
    CHECK(fmt_num(1e-300) == "1e-300");
}
