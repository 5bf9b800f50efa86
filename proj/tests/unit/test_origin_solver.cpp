#include <doctest.h>

#include <vector>

#include "cart/error.hpp"
#include "cart/origin_solver.hpp"
#include "cart/rng.hpp"
#include "support.hpp"

using namespace cart;

namespace {

// Direct pairwise sum, independent of the library's expansion.
double oracle_simmin(const Matrix &origin, const std::vector<Matrix> &layers) {
    double s = 0.0;
    for (std::size_t i = 0; i < layers.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            s += ((layers[i] - origin).array() * (layers[j] - origin).array()).sum();
    return s;
}

std::vector<Matrix> shared_plus_low_rank(Rng &rng, int tasks) {
    const Matrix shared = 2.0 * rng.gaussian(8, 3) * rng.gaussian(3, 7);
    std::vector<Matrix> out;
    for (int t = 0; t < tasks; ++t) out.push_back(shared + rng.gaussian(8, 1) * rng.gaussian(1, 7));
    return out;
}

} // namespace

TEST_CASE("origin modes") {
    CHECK(OriginMode::parse("mean").kind() == OriginMode::Kind::Mean);
    CHECK(OriginMode::parse("pretrained").name() == "pretrained");
    const auto rm = OriginMode::parse("rankmin", 50, 0.2);
    CHECK(rm.kind() == OriginMode::Kind::RankMin);
    CHECK(rm.steps() == 50);
    CHECK(*rm.step_size() == 0.2);
    CHECK_THROWS_AS(OriginMode::parse("median"), Error);
    CHECK_THROWS_AS(OriginMode::rank_min(0), Error);
    CHECK_THROWS_AS(OriginMode::rank_min(10, -1.0), Error);
}

TEST_CASE("mean origin and SimMin objective") {
    Rng rng(1, "simmin");
    std::vector<Matrix> layers;
    for (int t = 0; t < 4; ++t) layers.push_back(rng.gaussian(5, 3));
    const Matrix mean = mean_origin(layers);
    CHECK((mean - (layers[0] + layers[1] + layers[2] + layers[3]) / 4.0).norm() < 1e-14);

    const double at_mean = simmin_objective(mean, layers);
    CHECK(at_mean == doctest::Approx(oracle_simmin(mean, layers)).epsilon(1e-12));
    // Centered task vectors sum to zero, so 2 * objective = -sum of squared norms.
    double sq = 0.0;
    for (const auto &l : layers) sq += (l - mean).squaredNorm();
    CHECK(2.0 * at_mean == doctest::Approx(-sq).epsilon(1e-12));

    for (int p = 0; p < 50; ++p) {
        const Matrix other = mean + rng.gaussian(5, 3);
        CHECK(simmin_objective(other, layers) >= at_mean);
        CHECK(simmin_objective(other, layers) == doctest::Approx(oracle_simmin(other, layers)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(mean_origin(std::vector<Matrix>{}), Error);
    CHECK_THROWS_AS(simmin_objective(mean, std::vector<Matrix>{layers[0]}), Error);
}

TEST_CASE("objectives") {
    Rng rng(2, "obj");
    const std::vector<Matrix> layers{rng.gaussian(3, 3), rng.gaussian(3, 3), rng.gaussian(3, 3)};
    const Matrix o = rng.gaussian(3, 3);
    double nuc = 0.0, fip = 0.0;
    for (const auto &l : layers) nuc += nuclear_norm(l - o);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < i; ++j) fip += std::abs(frobenius_inner(layers[i] - o, layers[j] - o));
    CHECK(nuclear_objective(o, layers) == doctest::Approx(nuc));
    CHECK(fip_abs_sum(o, layers) == doctest::Approx(fip));
}

TEST_CASE("RankMin descends from the mean") {
    Rng rng(3, "rankmin");
    const auto layers = shared_plus_low_rank(rng, 4);
    const auto res = rankmin_origin(layers, 200);
    REQUIRE(res.trace.records.size() == 201);
    CHECK(res.trace.records.front().step == 0);
    CHECK(res.initial_objective == doctest::Approx(nuclear_objective(mean_origin(layers), layers)));
    CHECK(res.best_objective <= res.initial_objective);
    CHECK(res.best_objective == doctest::Approx(nuclear_objective(res.origin, layers)));
    for (const auto &rec : res.trace.records) CHECK(rec.nuclear_sum >= res.best_objective - 1e-12);
    CHECK(res.best_objective < 0.9 * res.initial_objective);
    const auto csv = res.trace.to_csv();
    CHECK(csv.rfind("step,nuclear_sum,fip_abs_sum\n", 0) == 0);
}

TEST_CASE("RankMin degenerate cases") {
    Rng rng(4, "rankmin.degenerate");
    const std::vector<Matrix> one{rng.gaussian(3, 3)};
    const auto single = rankmin_origin(one, 10);
    CHECK(single.origin == one[0]);
    CHECK(single.best_objective == doctest::Approx(0.0));
    // Two tasks: the mean already minimizes ||A - o||_* + ||B - o||_*.
    const std::vector<Matrix> two{rng.gaussian(4, 3), rng.gaussian(4, 3)};
    const auto r2 = rankmin_origin(two, 100);
    CHECK(r2.best_objective <= r2.initial_objective);
    CHECK(r2.best_objective == doctest::Approx(nuclear_norm(two[0] - two[1])).epsilon(1e-9));
    // A huge step diverges.
    CHECK_THROWS_AS(rankmin_origin(shared_plus_low_rank(rng, 3), 50, 1e6), Error);
}

TEST_CASE("select_origin per mode") {
    TensorMap pre;
    const auto fam = test::random_family(5, 3, &pre);
    const auto mean = select_origin(OriginMode::mean(), {}, fam);
    for (const auto &[name, t] : mean.origin.entries)
        for (std::size_t i = 0; i < t.values.size(); ++i)
            CHECK(t.values[i] == doctest::Approx((fam[0].entries.at(name).values[i] + fam[1].entries.at(name).values[i] +
                                                  fam[2].entries.at(name).values[i]) / 3.0));
    CHECK(mean.traces.empty());

    const auto p = select_origin(OriginMode::pretrained(), pre, fam);
    CHECK(p.origin == pre);
    CHECK_THROWS_AS(select_origin(OriginMode::pretrained(), {}, fam), Error);

    const auto rm = select_origin(OriginMode::rank_min(20), pre, fam);
    CHECK(rm.traces.size() == 2);
    CHECK(rm.traces.count("a.weight") == 1);
    CHECK(rm.origin.entries.at("a.bias") == mean.origin.entries.at("a.bias"));
    CHECK(rm.origin.entries.at("row") == mean.origin.entries.at("row"));

    TensorMap bad = fam[1];
    bad.entries.erase("row");
    std::vector<TensorMap> mixed{fam[0], bad};
    CHECK_THROWS_AS(select_origin(OriginMode::mean(), {}, mixed), Error);
}
