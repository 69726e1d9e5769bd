#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cct/tube.hpp"

using namespace cct;

namespace {

Matrix random_spd(CounterRng& rng, Eigen::Index n, double floor = 0.2) {
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    return a * a.transpose() + floor * Matrix::Identity(n, n);
}

// Point on the boundary {xi : xi^T M xi = r^2} in direction d.
Vector boundary_point(const Matrix& m, const Vector& d, double r) { return d * (r / std::sqrt(d.dot(m * d))); }

}  // namespace

TEST(Radius, ScalesWithUpperBoundQuantileAndRate) {
    Matrix m(2, 2);
    m << 4.0, 0.0, 0.0, 1.0;
    const auto metric = ContractionMetric::constant(m, 0.5);
    EXPECT_DOUBLE_EQ(tube_radius(metric, 3.0), 2.0 * 3.0 / 0.5);
    EXPECT_TRUE(std::isinf(tube_radius(metric, kInf)));
    EXPECT_THROW(tube_radius(metric.with_rate(0.0), 1.0), Error);
}

TEST(Envelope, StartsAtInitialDistanceAndSettlesOnRadius) {
    const auto metric = ContractionMetric::constant(Matrix::Identity(2, 2) * 4.0, 2.0);
    const auto e = make_envelope(1.0, metric, 0.5);
    EXPECT_DOUBLE_EQ(e.c2, 2.0 * 0.5 / 2.0);
    EXPECT_DOUBLE_EQ(envelope_at(e, 0.0), 1.0);
    EXPECT_NEAR(envelope_at(e, 50.0), e.c2, 1e-12);
    EXPECT_NEAR(envelope_at(e, 0.3), (1.0 - 0.5) * std::exp(-0.6) + 0.5, 1e-15);
}

TEST(Containment, WholeTrajectoryRule) {
    const auto metric = ContractionMetric::constant(Matrix::Identity(1, 1), 1.0);
    TrajectoryRecord ref;
    ref.dt = 1.0;
    ref.times = {0.0, 1.0, 2.0};
    ref.states = {Vector::Zero(1), Vector::Zero(1), Vector::Zero(1)};
    ref.inputs = {Vector::Zero(1), Vector::Zero(1), Vector::Zero(1)};
    const auto tube = make_tube(ref, metric, calibrate({0.5, 0.5, 0.5, 0.5}, 0.4));  // radius 0.5
    TrajectoryRecord in = ref, out = ref;
    in.states = {Vector::Constant(1, 0.4), Vector::Constant(1, -0.5), Vector::Constant(1, 0.1)};
    out.states = {Vector::Constant(1, 0.4), Vector::Constant(1, 0.51), Vector::Constant(1, 0.1)};
    const auto a = rollout_containment(tube, in), b = rollout_containment(tube, out);
    EXPECT_TRUE(a.contained);
    EXPECT_DOUBLE_EQ(a.sup_distance, 0.5);
    EXPECT_FALSE(b.contained);
    const auto rep = containment_experiment({tube, tube}, {in, out}, 0.5);
    EXPECT_EQ(rep.contained, 1u);
    EXPECT_DOUBLE_EQ(rep.fraction(), 0.5);
    EXPECT_THROW(containment_experiment({tube}, {in, out}, 0.5), DimensionMismatch);
}

TEST(Tightening, StateMarginIsExactExtentOfMetricBall) {
    // oracle: max of xi_i over the ellipsoid boundary by dense sampling
    CounterRng rng(12);
    const Matrix m = random_spd(rng, 3);
    const auto metric = ContractionMetric::constant(m, 1.0);
    const double r = 0.7;
    const auto ext = metric_ball_extent(metric, r);
    std::vector<double> sampled(3, 0.0);
    for (int s = 0; s < 200000; ++s) {
        const Vector p = boundary_point(m, rng.normal_vector(3), r);
        for (int i = 0; i < 3; ++i) sampled[static_cast<std::size_t>(i)] = std::max(sampled[static_cast<std::size_t>(i)], std::abs(p[i]));
    }
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_LE(sampled[i], ext[i] * (1 + 1e-12));
        EXPECT_GT(sampled[i], 0.99 * ext[i]);
    }
    const auto t = tighten_state_box(Box::uniform(3, -1.0, 1.0), r, metric);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(t.box.axes[i].hi, 1.0 - ext[i]);
}

TEST(Tightening, EmptyWhenTubeIsWiderThanBox) {
    const auto metric = ContractionMetric::constant(Matrix::Identity(2, 2), 1.0);
    EXPECT_TRUE(tighten_state_box(Box::uniform(2, -1.0, 1.0), 1.5, metric).empty);
    EXPECT_THROW(tighten_state_box(Box::uniform(2, -1.0, 1.0), kInf, metric), Error);
}

TEST(Tightening, InputMarginCoversFeedbackOnSampledCrossSections) {
    const auto pair = make_benchmark_3d();
    Matrix m(3, 3);
    m << 6.41, 0.036, 2.05, 0.036, 4.50, -0.151, 2.05, -0.151, 1.78;
    const auto metric = ContractionMetric::constant(m, 1.55);
    std::vector<std::pair<Vector, Vector>> anchors;
    CounterRng rng(13);
    for (int i = 0; i < 4; ++i) anchors.emplace_back(rng.uniform_in(Box::uniform(3, -1.0, 1.0)), rng.uniform_in(Box::uniform(2, -0.3, 0.3)));
    const double r = 0.2;
    const auto t = tighten_input_box(pair.nominal.input_box, anchors, r, metric, pair.nominal, 400, 1, {0.01, 0.02});
    // with enough samples per anchor the 10% inflation covers fresh draws from another stream
    double worst = 0.0;
    for (const auto& [xb, ub] : anchors) {
        for (int s = 0; s < 200; ++s) {
            const Vector xi = xb + boundary_point(m, rng.normal_vector(3), r * std::pow(rng.uniform(), 1.0 / 3.0));
            const Vector k = min_norm_feedback(metric, pair.nominal, xi, xb, ub);
            for (int i = 0; i < 2; ++i)
                worst = std::max(worst, std::abs(k[i]) / (t.margins[static_cast<std::size_t>(i)] - 0.01 * (i + 1)));
        }
    }
    EXPECT_LE(worst, 1.0);
    EXPECT_FALSE(t.empty);
    EXPECT_NEAR(t.box.axes[1].hi, 1.5 - t.margins[1], 1e-15);
}

TEST(Schur, InteriorSamplesProjectInsideAndBoundaryTouches) {
    CounterRng rng(14);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix m = random_spd(rng, 6);
        const double r = 0.8;
        const Eigen::Index i = trial % 5, j = 5;
        const Eigen::Matrix2d s = schur_projection(m, i, j);
        const Eigen::LLT<Matrix> llt(m);
        for (int n = 0; n < 2000; ++n) {
            const Vector xi = r * llt.matrixU().solve(rng.unit_ball(6));
            ASSERT_LE(xi.dot(m * xi), r * r * (1 + 1e-12));
            const Eigen::Vector2d p(xi[i], xi[j]);
            EXPECT_LE(p.dot(s * p), r * r * (1 + 1e-10));
        }
        // planar boundary point lifted by minimizing xi^T M xi over the complementary coordinates
        std::vector<Eigen::Index> rest;
        for (Eigen::Index k = 0; k < 6; ++k)
            if (k != i && k != j) rest.push_back(k);
        Matrix mcc(4, 4), mcp(4, 2);
        for (int a = 0; a < 4; ++a) {
            mcp(a, 0) = m(rest[static_cast<std::size_t>(a)], i);
            mcp(a, 1) = m(rest[static_cast<std::size_t>(a)], j);
            for (int b = 0; b < 4; ++b) mcc(a, b) = m(rest[static_cast<std::size_t>(a)], rest[static_cast<std::size_t>(b)]);
        }
        for (int n = 0; n < 50; ++n) {
            Eigen::Vector2d dir = rng.normal_vector(2);
            const Eigen::Vector2d p = dir * (r / std::sqrt(dir.dot(s * dir)));
            const Vector c = -mcc.ldlt().solve(mcp * p);
            Vector xi(6);
            xi[i] = p[0];
            xi[j] = p[1];
            for (int a = 0; a < 4; ++a) xi[rest[static_cast<std::size_t>(a)]] = c[a];
            EXPECT_NEAR(xi.dot(m * xi), r * r, 1e-6);
        }
    }
}

TEST(Schur, TwoDimensionalMetricProjectsToItself) {
    Matrix m(2, 2);
    m << 2.0, 0.3, 0.3, 1.0;
    const Eigen::Matrix2d s = schur_projection(m, 0, 1);
    EXPECT_LT((Matrix(s) - m).norm(), 1e-15);
    EXPECT_THROW(schur_projection(m, 0, 0), DimensionMismatch);
}

TEST(Schur, SingularComplementRaises) {
    Matrix m = Matrix::Identity(3, 3);
    m(2, 2) = 0.0;
    EXPECT_THROW(schur_projection(m, 0, 1), SingularBlock);
}

TEST(Ellipses, CsvHeaderAndRows) {
    const auto metric = ContractionMetric::constant(Matrix::Identity(3, 3) * 2.0, 1.0);
    TrajectoryRecord ref;
    ref.dt = 0.5;
    ref.times = {0.0, 0.5};
    ref.states = {Vector::Zero(3), Vector::Ones(3)};
    ref.inputs = {Vector::Zero(1), Vector::Zero(1)};
    PRCITube tube;
    tube.reference = ref;
    tube.metric = metric;
    tube.radius = 0.25;
    const auto es = project_tube_2d(tube, 0, 2);
    ASSERT_EQ(es.size(), 2u);
    EXPECT_TRUE(es[1].contains(Eigen::Vector2d(1.0, 1.0)));
    EXPECT_NEAR(es[0].max_extent(), 0.25 / std::sqrt(2.0), 1e-15);
    std::ostringstream os;
    write_ellipse_csv(os, es);
    EXPECT_EQ(os.str(), "t,center_i,center_j,a11,a12,a22,radius\n0,0,0,2,0,2,0.25\n0.5,1,1,2,0,2,0.25\n");
}
