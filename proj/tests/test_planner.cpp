#include <gtest/gtest.h>

#include <cmath>

#include "cct/planner.hpp"

using namespace cct;

namespace {

DynamicalSystem double_integrator() {
    Matrix a(2, 2), b(2, 1);
    a << 0, 1, 0, 0;
    b << 0, 1;
    return make_linear_system(a, b, "double_integrator");
}

// Unconstrained double-integrator planning is a dense least-squares problem: with piecewise-linear
// inputs the exact flow is cubic per step, so x_N = Phi x0 + G u with G from hat-function integrals.
std::pair<Vector, double> dense_qp_oracle(const Vector& x0, const Vector& goal, double horizon, double dt, double w1,
                                          double goal_weight) {
    const auto n = static_cast<Eigen::Index>(std::llround(horizon / dt));
    Matrix g(2, n + 1);
    for (Eigen::Index k = 0; k <= n; ++k) {
        const double tk = static_cast<double>(k) * dt;
        double area, moment;  // int hat_k, int (T - s) hat_k
        if (k == 0) {
            area = dt / 2;
            moment = dt / 2 * (horizon - dt / 3);
        } else if (k == n) {
            area = dt / 2;
            moment = dt * dt / 6;
        } else {
            area = dt;
            moment = dt * (horizon - tk);
        }
        g(0, k) = moment;
        g(1, k) = area;
    }
    Vector free(2);
    free << x0[0] + x0[1] * horizon, x0[1];
    // minimize dt w1 |u|^2 + goal_weight |free + G u - goal|^2
    const Matrix h = dt * w1 * Matrix::Identity(n + 1, n + 1) + goal_weight * g.transpose() * g;
    const Vector rhs = goal_weight * g.transpose() * (goal - free);
    const Vector u = h.ldlt().solve(rhs);
    const Vector e = free + g * u - goal;
    return {u, dt * w1 * u.squaredNorm() + goal_weight * e.squaredNorm()};
}

PlanProblem di_problem(const DynamicalSystem& sys) {
    PlanProblem p;
    p.nominal = &sys;
    p.horizon = 0.5;
    p.dt = 0.01;
    p.start = Vector::Zero(2);
    p.goal = (Vector(2) << 1.0, 0.0).finished();
    p.state_box = Box::unbounded(2);
    p.input_box = Box::unbounded(1);
    p.w1 = 0.5;
    p.w2 = 1.0;
    p.goal_weight = 20.0;
    return p;
}

}  // namespace

TEST(Planner, DoubleIntegratorMatchesDenseQp) {
    const auto sys = double_integrator();
    const auto p = di_problem(sys);
    const auto [u_star, c_star] = dense_qp_oracle(p.start, p.goal, p.horizon, p.dt, p.w1, p.goal_weight);
    PlanOptions opt;
    opt.max_iterations = 2000;
    opt.tolerance = 1e-15;
    const auto r = plan(p, std::nullopt, opt);
    EXPECT_NEAR(r.cost, c_star, 1e-7 * c_star);
    ASSERT_EQ(r.signal.knots.size(), static_cast<std::size_t>(u_star.size()));
    double err = 0.0;
    for (std::size_t k = 0; k < r.signal.knots.size(); ++k)
        err = std::max(err, std::abs(r.signal.knots[k][0] - u_star[static_cast<Eigen::Index>(k)]));
    EXPECT_LT(err, 1e-3 * u_star.cwiseAbs().maxCoeff());
    EXPECT_TRUE(r.feasible());
    // cost history is non-increasing
    for (std::size_t i = 1; i < r.cost_history.size(); ++i) EXPECT_LE(r.cost_history[i], r.cost_history[i - 1] + 1e-12);
}

TEST(Planner, AdjointGradientMatchesFiniteDifferences) {
    // 3D benchmark with boxes, an obstacle, compensation and coarse knots
    const auto pair = make_benchmark_3d();
    CounterRng rng(21);
    auto comp = UncertaintyPredictor::linear_features(3, 2, 2);
    for (Eigen::Index i = 0; i < comp.theta().size(); ++i) comp.theta()[i] = 0.05 * rng.normal();
    PlanProblem p;
    p.nominal = &pair.nominal;
    p.horizon = 0.3;
    p.dt = 0.01;
    p.start = (Vector(3) << 0.1, -0.1, 0.05).finished();
    p.goal = (Vector(3) << 0.5, 0.4, 0.2).finished();
    p.state_box = Box::uniform(3, -2.0, 2.0);
    p.input_box = Box::uniform(2, -1.5, 1.5);
    p.obstacles = {EllipseObstacle::axis_aligned(0, 1, Eigen::Vector2d(0.6, -0.3), 0.2, 0.1)};
    p.barrier_weight = 0.05;
    p.compensation = std::make_shared<const UncertaintyPredictor>(comp);
    for (std::size_t stride : {std::size_t{1}, std::size_t{7}}) {
        p.knot_stride = stride;
        const ShootingPlanner sp(p);
        std::vector<Vector> z(sp.decision_knots());
        for (auto& v : z) v = 0.3 * rng.normal_vector(2);
        const auto ev = sp.evaluate(sp.expand(z));
        ASSERT_TRUE(std::isfinite(ev.cost));
        const auto g = sp.contract(sp.gradient(sp.expand(z), ev));
        ASSERT_EQ(g.size(), z.size());
        const double h = 1e-6;
        for (std::size_t j = 0; j < z.size(); j += std::max<std::size_t>(1, z.size() / 6)) {
            for (Eigen::Index c = 0; c < 2; ++c) {
                auto zp = z, zm = z;
                zp[j][c] += h;
                zm[j][c] -= h;
                const double fd = (sp.evaluate(sp.expand(zp)).cost - sp.evaluate(sp.expand(zm)).cost) / (2 * h);
                EXPECT_NEAR(g[j][c], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "stride " << stride << " knot " << j;
            }
        }
    }
}

TEST(Planner, ExpandAndContractAreAdjoint) {
    const auto sys = double_integrator();
    auto p = di_problem(sys);
    p.knot_stride = 8;
    const ShootingPlanner sp(p);
    CounterRng rng(22);
    std::vector<Vector> z(sp.decision_knots()), w(sp.knots());
    for (auto& v : z) v = rng.normal_vector(1);
    for (auto& v : w) v = rng.normal_vector(1);
    const auto ez = sp.expand(z);
    const auto cw = sp.contract(w);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) lhs += ez[k].dot(w[k]);
    for (std::size_t j = 0; j < z.size(); ++j) rhs += z[j].dot(cw[j]);
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(lhs)));
    EXPECT_EQ(ez.front(), z.front());
}

TEST(Planner, AvoidsObstacleAndRespectsTightenedSets) {
    const auto sys = double_integrator();
    auto p = di_problem(sys);
    p.horizon = 1.0;
    p.goal = (Vector(2) << 1.0, 0.0).finished();
    p.input_box = Box::uniform(1, -8.0, 8.0);
    p.state_box = Box({{-0.2, 1.2}, {-0.2, 3.0}});
    // in the (position, velocity) plane the obstacle forbids creeping past x = 0.5
    p.obstacles = {EllipseObstacle::axis_aligned(0, 1, Eigen::Vector2d(0.5, 0.0), 0.1, 0.5)};
    p.knot_stride = 5;
    // constant acceleration passes above the obstacle and starts feasible
    p.initial_input = Vector::Constant(1, 2.0);
    const auto r = plan(p);
    EXPECT_TRUE(r.feasible());
    EXPECT_GT(r.min_obstacle_clearance, 0.0);
    for (const auto& x : r.reference.states) EXPECT_TRUE(p.state_box.contains(x));
    for (const auto& u : r.applied_inputs) EXPECT_TRUE(p.input_box.contains(u));
}

TEST(Planner, InfeasibleStartsRaise) {
    const auto sys = double_integrator();
    auto p = di_problem(sys);
    p.state_box = Box::uniform(2, 0.5, 1.0);
    EXPECT_THROW(plan(p), InfeasiblePlan);
    p = di_problem(sys);
    p.obstacles = {EllipseObstacle::axis_aligned(0, 1, Eigen::Vector2d(0.0, 0.0), 0.1, 0.1)};
    EXPECT_THROW(plan(p), InfeasiblePlan);
    p = di_problem(sys);
    p.input_box = Box({{1.0, -1.0}});
    EXPECT_THROW(plan(p), InfeasiblePlan);
}

TEST(Obstacles, InflationGrowsSemiAxes) {
    const auto o = EllipseObstacle::axis_aligned(0, 1, Eigen::Vector2d(1.0, 2.0), 0.5, 0.25);
    const auto big = o.inflated(0.1);
    Vector x = Vector::Zero(2);
    x << 1.0 + 0.6, 2.0;
    EXPECT_NEAR(big.level(x), 1.0, 1e-12);
    x << 1.0, 2.0 + 0.35;
    EXPECT_NEAR(big.level(x), 1.0, 1e-12);
    EXPECT_NEAR(o.level(x), 0.35 * 0.35 / 0.0625, 1e-12);
}

TEST(EndToEnd, TrackingAPlannedReferenceStaysInTube) {
    const auto pair = make_benchmark_3d();
    Matrix m(3, 3);
    m << 6.41, 0.036, 2.05, 0.036, 4.50, -0.151, 2.05, -0.151, 1.78;
    const auto metric = ContractionMetric::constant(m, 1.55);
    auto pred = std::make_shared<const UncertaintyPredictor>(UncertaintyPredictor::zero(3, 2));
    PlanProblem p;
    p.nominal = &pair.nominal;
    p.horizon = 1.0;
    p.start = Vector::Zero(3);
    p.goal = (Vector(3) << 0.3, 0.3, 0.1).finished();
    p.state_box = Box::uniform(3, -2.0, 2.0);
    p.input_box = Box::uniform(2, -1.0, 1.0);
    p.knot_stride = 10;
    const auto r = plan(p);
    // |zeta| stays well below 2 near the origin, so this quantile must contain the rollout
    const auto cal = calibrate(std::vector<double>(20, 2.0), 0.05);
    const auto rep = end_to_end_run(pair.perturbed, pair.nominal, r, metric, pred, cal, {p.start},
                                    pair.nominal.state_box, pair.nominal.input_box, {}, {}, 1);
    ASSERT_EQ(rep.rollouts.size(), 1u);
    EXPECT_TRUE(rep.rollouts[0].contained);
    EXPECT_TRUE(rep.rollouts[0].state_ok);
    EXPECT_DOUBLE_EQ(rep.violation_fraction(), 0.0);
    const auto j = plan_manifest(p, r);
    EXPECT_EQ(j.at("knot_stride").get<std::size_t>(), 10u);
}
