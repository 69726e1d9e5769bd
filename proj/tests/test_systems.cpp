#include <gtest/gtest.h>

#include <cmath>

#include "cct/random.hpp"
#include "cct/systems.hpp"

using namespace cct;

namespace {

// Harmonic oscillator x'' = -x: exact flow is a rotation.
DynamicalSystem oscillator() {
    Matrix a(2, 2), b(2, 1);
    a << 0, 1, -1, 0;
    b << 0, 1;
    return make_linear_system(a, b, "oscillator");
}

double rk4_error(double dt) {
    const auto sys = oscillator();
    Vector x0(2);
    x0 << 1.0, 0.0;
    const double t = 2.0;
    const auto rec = integrate_open_loop(sys, x0, [](double) { return Vector::Zero(1); }, t, dt);
    Vector exact(2);
    exact << std::cos(t), -std::sin(t);
    return (rec.states.back() - exact).norm();
}

}  // namespace

TEST(Integrator, FourthOrderConvergence) {
    const double e1 = rk4_error(0.04), e2 = rk4_error(0.02), e3 = rk4_error(0.01);
    const double order1 = std::log2(e1 / e2), order2 = std::log2(e2 / e3);
    EXPECT_NEAR(order1, 4.0, 0.15);
    EXPECT_NEAR(order2, 4.0, 0.15);
}

TEST(Integrator, ExactForCubicSolutions) {
    // double integrator with a linear-in-time input: solution is cubic, RK4 is exact
    Matrix a(2, 2), b(2, 1);
    a << 0, 1, 0, 0;
    b << 0, 1;
    const auto sys = make_linear_system(a, b);
    PiecewiseLinearSignal sig{1.0, {Vector::Constant(1, 0.0), Vector::Constant(1, 1.0)}};
    const auto rec = integrate_open_loop(sys, Vector::Zero(2), sig, 1.0, 0.1);
    EXPECT_NEAR(rec.states.back()[0], 1.0 / 6.0, 1e-14);
    EXPECT_NEAR(rec.states.back()[1], 0.5, 1e-14);
}

TEST(Integrator, RecordsGridAndUncertainty) {
    const auto pair = make_benchmark_3d();
    Vector x0(3);
    x0 << 0.5, -0.2, 0.1;
    const auto rec = integrate_open_loop(pair.perturbed, x0, [](double) { return Vector::Constant(2, 0.3); }, 0.5, 0.01);
    ASSERT_EQ(rec.size(), 51u);
    EXPECT_NO_THROW(rec.validate());
    ASSERT_TRUE(rec.has_uncertainties());
    EXPECT_DOUBLE_EQ(rec.times.back(), 0.5);
    for (std::size_t k = 0; k < rec.size(); k += 10)
        EXPECT_LT((rec.uncertainties[k] - pair.perturbed.zeta(rec.states[k], rec.inputs[k])).norm(), 1e-15);
}

TEST(Integrator, DivergenceRaisesWithTime) {
    DynamicalSystem s;
    s.name = "blowup";
    s.state_dim = 1;
    s.input_dim = 1;
    s.drift = [](const Vector& x) -> Vector { return x.array().square(); };
    s.actuation = [](const Vector&) -> Matrix { return Matrix::Zero(1, 1); };
    s.state_box = Box::unbounded(1);
    // x' = x^2 from x0 = 10 blows up at t = 0.1
    try {
        integrate_open_loop(s, Vector::Constant(1, 10.0), [](double) { return Vector::Zero(1); }, 1.0, 0.001);
        FAIL() << "expected NonFiniteState";
    } catch (const NonFiniteState& e) {
        EXPECT_GT(e.time(), 0.09);
        EXPECT_LT(e.time(), 0.2);
    }
}

TEST(Integrator, RejectsBadArguments) {
    const auto sys = oscillator();
    auto zero = [](double) { return Vector::Zero(1); };
    EXPECT_THROW(integrate_open_loop(sys, Vector::Zero(2), zero, 1.0, 0.0), Error);
    EXPECT_THROW(integrate_open_loop(sys, Vector::Zero(2), zero, 0.001, 0.01), Error);
    EXPECT_THROW(integrate_open_loop(sys, Vector::Zero(3), zero, 1.0, 0.01), DimensionMismatch);
}

TEST(Benchmark3d, PerturbedMatchesDirectTruePlant) {
    const auto pair = make_benchmark_3d();
    CounterRng rng(9);
    for (int i = 0; i < 50; ++i) {
        const Vector x = rng.uniform_in(pair.nominal.state_box);
        const Vector u = rng.uniform_in(pair.nominal.input_box);
        EXPECT_LT((pair.perturbed.dynamics(x, u) - pair.direct.dynamics(x, u)).norm(), 1e-10);
    }
}

TEST(Benchmark3d, AnalyticJacobiansMatchFiniteDifferences) {
    const auto pair = make_benchmark_3d();
    CounterRng rng(10);
    for (const auto* sys : {&pair.nominal, &pair.direct}) {
        for (int i = 0; i < 20; ++i) {
            const Vector x = rng.uniform_in(Box::uniform(3, -3.0, 3.0));
            const Matrix fd = jacobian_fd(sys->drift, x);
            EXPECT_LT((sys->drift_jacobian(x) - fd).norm(), 1e-7);
        }
    }
}

TEST(Vtol, HoverIsAnEquilibrium) {
    const auto s = make_benchmark_vtol();
    const double hover = s.parameter("mass") * s.parameter("gravity") / 2.0;
    Vector x = Vector::Zero(6);
    x[0] = 3.0;
    x[1] = -2.0;
    EXPECT_LT(s.nominal_dynamics(x, Vector::Constant(2, hover)).norm(), 1e-12);
    CounterRng rng(4);
    for (int i = 0; i < 20; ++i) {
        const Vector z = rng.uniform_in(s.state_box);
        EXPECT_LT((s.drift_jacobian(z) - jacobian_fd(s.drift, z)).norm(), 1e-6);
    }
}

TEST(Vtol, UncertaintyEntersThroughInputChannels) {
    const auto s = make_benchmark_vtol();
    const Matrix b = s.actuation(Vector::Zero(6));
    const Matrix proj = b * pseudo_inverse(b);
    CounterRng rng(8);
    for (int i = 0; i < 20; ++i) {
        const Vector x = rng.uniform_in(s.state_box), u = rng.uniform_in(s.input_box);
        const Vector z = s.zeta(x, u);
        EXPECT_LT((proj * z - z).norm(), 1e-10 * std::max(1.0, z.norm()));
    }
}

TEST(Signals, PiecewiseLinearInterpolatesAndHolds) {
    PiecewiseLinearSignal s{0.5, {Vector::Constant(1, 0.0), Vector::Constant(1, 2.0), Vector::Constant(1, -2.0)}};
    EXPECT_DOUBLE_EQ(s(-1.0)[0], 0.0);
    EXPECT_DOUBLE_EQ(s(0.25)[0], 1.0);
    EXPECT_DOUBLE_EQ(s(0.75)[0], 0.0);
    EXPECT_DOUBLE_EQ(s(5.0)[0], -2.0);
}

TEST(Reference, HermiteStateIsExactOnGridAndAccurateBetween) {
    const auto sys = oscillator();
    Vector x0(2);
    x0 << 1.0, 0.0;
    const auto rec = integrate_open_loop(sys, x0, [](double) { return Vector::Zero(1); }, 1.0, 0.01);
    const Reference ref(rec, sys);
    EXPECT_LT((ref.state(0.3) - rec.states[30]).norm(), 1e-14);
    const double t = 0.305;
    Vector exact(2);
    exact << std::cos(t), -std::sin(t);
    EXPECT_LT((ref.state(t) - exact).norm(), 1e-9);
    // linear interpolation would be off by O(dt^2)
    EXPECT_GT((rec.state_at(t) - exact).norm(), 1e-7);
}
