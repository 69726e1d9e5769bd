#include <gtest/gtest.h>

#include <cmath>

#include "cct/conformal.hpp"
#include "cct/random.hpp"

using namespace cct;

TEST(ConformalIndex, KnownValues) {
    EXPECT_EQ(conformal_index(50, 0.05), 49u);   // ceil(48.45)
    EXPECT_EQ(conformal_index(9, 0.1), 9u);      // 0.9 * 10 lands on an integer
    EXPECT_EQ(conformal_index(19, 0.05), 19u);   // 0.95 * 20
    EXPECT_EQ(conformal_index(2, 0.4), 2u);      // ceil(1.8)
    EXPECT_EQ(conformal_index(10, 0.05), 11u);   // exceeds N
    EXPECT_EQ(conformal_index(540, 0.05), 514u); // ceil(513.95)
}

TEST(ConformalIndex, RejectsAlphaOutsideOpenUnitInterval) {
    EXPECT_THROW(conformal_index(10, 0.0), InvalidAlpha);
    EXPECT_THROW(conformal_index(10, 1.0), InvalidAlpha);
    EXPECT_THROW(conformal_index(10, -0.1), InvalidAlpha);
    EXPECT_THROW(calibrate({}, 0.05), InsufficientCalibrationData);
}

TEST(Calibrate, ReturnsOrderStatisticAndFlagsUnbounded) {
    const auto c = calibrate({5.0, 1.0, 4.0, 2.0, 3.0}, 0.4);  // j = ceil(0.6 * 6) = 4
    EXPECT_EQ(c.quantile_index, 4u);
    EXPECT_DOUBLE_EQ(c.quantile_value, 4.0);
    EXPECT_FALSE(c.unbounded());
    const auto u = calibrate({1.0, 2.0, 3.0}, 0.05);
    EXPECT_TRUE(u.unbounded());
    EXPECT_TRUE(std::isinf(u.quantile_value));
    EXPECT_NE(calibration_summary(u).find("unbounded"), std::string::npos);
}

TEST(Calibrate, InfiniteScoresSortLast) {
    const auto c = calibrate({kInf, 1.0, 2.0, 3.0}, 0.45);  // j = ceil(0.55 * 5) = 3
    EXPECT_DOUBLE_EQ(c.quantile_value, 3.0);
    EXPECT_TRUE(std::isinf(c.scores.back()));
}

TEST(Calibrate, JsonRoundTripIsBitExact) {
    CounterRng rng(1);
    std::vector<double> s;
    for (int i = 0; i < 30; ++i) s.push_back(rng.normal());
    const auto c = calibrate(s, 0.1);
    const auto back = calibration_from_json(nlohmann::json::parse(to_json(c).dump()));
    EXPECT_EQ(back.quantile_value, c.quantile_value);
    EXPECT_EQ(back.scores, c.scores);
}

TEST(Coverage, MonteCarloCoverageWithinFiniteSampleBand) {
    // exchangeable scores: P(test <= q) = j / (N + 1), which lies in [1 - alpha, 1 - alpha + 1/(N + 1))
    const std::size_t n = 50, reps = 4000;
    const double alpha = 0.05;
    double hits = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
        CounterRng rng = CounterRng::stream(7, "coverage", r);
        std::vector<double> s(n);
        for (auto& v : s) v = rng.uniform();
        const auto c = calibrate(s, alpha);
        hits += rng.uniform() <= c.quantile_value;
    }
    const double cov = hits / reps;
    const double exact = static_cast<double>(conformal_index(n, alpha)) / static_cast<double>(n + 1);
    const double se = std::sqrt(exact * (1 - exact) / reps);
    EXPECT_NEAR(cov, exact, 3.0 * se);
    EXPECT_GE(exact, 1 - alpha);
    EXPECT_LT(exact, 1 - alpha + 1.0 / (n + 1));
}

TEST(Coverage, EmpiricalCoverageCountsTies) {
    EXPECT_DOUBLE_EQ(empirical_coverage({1.0, 2.0, 3.0, 4.0}, 2.0), 0.5);
    EXPECT_DOUBLE_EQ(empirical_coverage({}, 2.0), 0.0);
}

TEST(TwoStep, SplitsInGivenOrder) {
    std::vector<double> s = {1, 2, 3, 4, 5, 10, 20, 30, 40, 50};
    const auto t = two_step_calibrate(s, 0.2, 0.5);  // j = ceil(0.8 * 6) = 5
    EXPECT_EQ(t.first_size, 5u);
    EXPECT_DOUBLE_EQ(t.tube.quantile_value, 5.0);
    EXPECT_DOUBLE_EQ(t.tracking.quantile_value, 50.0);
    EXPECT_THROW(two_step_calibrate({1.0}, 0.2, 0.5), InsufficientCalibrationData);
    EXPECT_THROW(two_step_split(10, 1.0), ConfigError);
}

TEST(Scores, SupOfResidualOverGrid) {
    const auto pair = make_benchmark_3d();
    const auto rec = integrate_open_loop(pair.perturbed, Vector::Constant(3, 0.4), [](double t) { return Vector::Constant(2, t); },
                                         0.3, 0.01);
    double sup = 0.0;
    for (const auto& z : rec.uncertainties) sup = std::max(sup, z.norm());
    EXPECT_DOUBLE_EQ(nonconformity_score(rec, nullptr, pair.perturbed, pair.nominal), sup);
}
