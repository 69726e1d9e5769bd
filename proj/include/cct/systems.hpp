#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cct/core.hpp"

namespace cct {

/// Perturbed control-affine plant  xdot = f(x) + B(x) u + zeta(x, u).
/// An empty `uncertainty` means the nominal model.
struct DynamicalSystem {
    std::string name;
    Eigen::Index state_dim = 0;
    Eigen::Index input_dim = 0;
    std::function<Vector(const Vector&)> drift;
    std::function<Matrix(const Vector&)> actuation;
    std::function<Vector(const Vector&, const Vector&)> uncertainty;
    /// Optional analytic df/dx; finite differences are used when absent.
    std::function<Matrix(const Vector&)> drift_jacobian;
    /// B does not depend on x (lets d(f + B u)/dx reduce to df/dx).
    bool constant_actuation = false;
    Box state_box;
    Box input_box;
    std::vector<std::pair<std::string, double>> parameters;

    bool has_uncertainty() const { return static_cast<bool>(uncertainty); }

    Vector zeta(const Vector& x, const Vector& u) const {
        return has_uncertainty() ? uncertainty(x, u) : Vector::Zero(state_dim);
    }

    Vector nominal_dynamics(const Vector& x, const Vector& u) const {
        return drift(x) + actuation(x) * u;
    }

    Vector dynamics(const Vector& x, const Vector& u) const {
        Vector dx = nominal_dynamics(x, u);
        if (has_uncertainty()) dx += uncertainty(x, u);
        return dx;
    }

    /// d(f(x) + B(x) u)/dx.
    Matrix nominal_jacobian(const Vector& x, const Vector& u) const {
        if (drift_jacobian && constant_actuation) return drift_jacobian(x);
        return jacobian_fd([&](const Vector& z) -> Vector { return nominal_dynamics(z, u); }, x);
    }

    /// Same plant with the uncertainty removed.
    DynamicalSystem nominal() const {
        DynamicalSystem s = *this;
        s.uncertainty = nullptr;
        return s;
    }

    double parameter(const std::string& key) const {
        for (const auto& [k, v] : parameters)
            if (k == key) return v;
        throw Error("unknown system parameter '" + key + "'");
    }

    void check_dims(const Vector& x, const Vector& u) const {
        if (x.size() != state_dim || u.size() != input_dim)
            throw DimensionMismatch("system '" + name + "': expected (x, u) of sizes (" +
                                    std::to_string(state_dim) + ", " + std::to_string(input_dim) +
                                    ")");
    }
};

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

struct Benchmark3dParams {
    double theta1 = 0.4, theta2 = 0.2, theta3 = 0.1;
    double dtheta1 = 0.0, dtheta2 = 0.02, dtheta3 = -0.01;
    /// Actuation of the true plant; defaults to the mismatched matrix of the benchmark.
    Matrix true_actuation = (Matrix(3, 2) << 0, 0, 0.5, 0, 1, 0.5).finished();
};

struct BenchmarkPair {
    DynamicalSystem nominal;
    /// Nominal f, B plus the additive uncertainty zeta = f_true - f_nom.
    DynamicalSystem perturbed;
    /// True plant written directly with its own drift and actuation.
    DynamicalSystem direct;
};

namespace detail {

inline Vector drift_3d_raw(const Vector& x, double th1) {
    Vector f(3);
    f << x[2] - th1 * x[0], x[0] * x[0] - x[1], std::tanh(x[1]);
    return f;
}

inline Vector phi_3d(const Vector& x, double th2, double th3) {
    Vector p(2);
    p << th2 * x[2] + th3 * x[0] * x[0], th2 * x[1] + th3 * x[0] * x[0];
    return p;
}

}  // namespace detail

inline BenchmarkPair make_benchmark_3d(const Benchmark3dParams& p = {}) {
    const Matrix b_nom = (Matrix(3, 2) << 0, 0, 1, 0, 1, 1).finished();
    const Matrix b_true = p.true_actuation;
    const double t1 = p.theta1, t2 = p.theta2, t3 = p.theta3;
    const double r1 = p.theta1 + p.dtheta1, r2 = p.theta2 + p.dtheta2, r3 = p.theta3 + p.dtheta3;

    DynamicalSystem nom;
    nom.name = "threeD";
    nom.state_dim = 3;
    nom.input_dim = 2;
    // xdot = f0(x) + B (u - phi(x)) regrouped as drift f0 - B phi plus actuation B.
    nom.drift = [=](const Vector& x) -> Vector {
        return detail::drift_3d_raw(x, t1) - b_nom * detail::phi_3d(x, t2, t3);
    };
    nom.actuation = [=](const Vector&) -> Matrix { return b_nom; };
    nom.constant_actuation = true;
    nom.drift_jacobian = [=](const Vector& x) -> Matrix {
        Matrix j(3, 3), jp(2, 3);
        const double sech = 1.0 / std::cosh(x[1]);
        j << -t1, 0, 1, 2 * x[0], -1, 0, 0, sech * sech, 0;
        jp << 2 * t3 * x[0], 0, t2, 2 * t3 * x[0], t2, 0;
        return j - b_nom * jp;
    };
    nom.state_box = Box::uniform(3, -15.0, 15.0);
    nom.input_box = Box::uniform(2, -1.5, 1.5);
    nom.parameters = {{"theta1", t1}, {"theta2", t2}, {"theta3", t3},
                      {"dtheta1", p.dtheta1}, {"dtheta2", p.dtheta2}, {"dtheta3", p.dtheta3}};

    DynamicalSystem direct = nom;
    direct.drift = [=](const Vector& x) -> Vector {
        return detail::drift_3d_raw(x, r1) - b_true * detail::phi_3d(x, r2, r3);
    };
    direct.actuation = [=](const Vector&) -> Matrix { return b_true; };
    direct.drift_jacobian = [=](const Vector& x) -> Matrix {
        Matrix j(3, 3), jp(2, 3);
        const double sech = 1.0 / std::cosh(x[1]);
        j << -r1, 0, 1, 2 * x[0], -1, 0, 0, sech * sech, 0;
        jp << 2 * r3 * x[0], 0, r2, 2 * r3 * x[0], r2, 0;
        return j - b_true * jp;
    };

    DynamicalSystem pert = nom;
    pert.uncertainty = [=](const Vector& x, const Vector& u) -> Vector {
        const Vector f_true = detail::drift_3d_raw(x, r1) + b_true * (u - detail::phi_3d(x, r2, r3));
        const Vector f_nom = detail::drift_3d_raw(x, t1) + b_nom * (u - detail::phi_3d(x, t2, t3));
        return f_true - f_nom;
    };
    return {std::move(nom), std::move(pert), std::move(direct)};
}

struct VtolParams {
    double mass = 0.486;
    double inertia = 0.00383;
    double gravity = 9.81;
    double arm = 0.25;
    double k_z = 0.04;
    double k_phidot = 0.05;
};

/// Input-channel disturbance [-k_z |v| + k_phidot |u|, k_phidot |u|] of the VTOL model.
inline Vector vtol_input_uncertainty(const Vector& x, const Vector& u, const VtolParams& p = {}) {
    const double v = std::hypot(x[3], x[4]);
    const double un = u.norm();
    Vector z(2);
    z << -p.k_z * v + p.k_phidot * un, p.k_phidot * un;
    return z;
}

/// Planar VTOL, x = [p_x, p_z, phi, v_x, v_z, phidot], u = two rotor thrusts.
inline DynamicalSystem make_benchmark_vtol(const VtolParams& p = {}) {
    const double g = p.gravity;
    Matrix b = Matrix::Zero(6, 2);
    b(4, 0) = 1.0 / p.mass;
    b(4, 1) = 1.0 / p.mass;
    b(5, 0) = p.arm / p.inertia;
    b(5, 1) = -p.arm / p.inertia;

    DynamicalSystem s;
    s.name = "vtol";
    s.state_dim = 6;
    s.input_dim = 2;
    s.drift = [g](const Vector& x) -> Vector {
        const double c = std::cos(x[2]), sn = std::sin(x[2]);
        Vector f(6);
        f << x[3] * c - x[4] * sn, x[3] * sn + x[4] * c, x[5], x[4] * x[5] - g * sn,
            -x[3] * x[5] - g * c, 0.0;
        return f;
    };
    s.actuation = [b](const Vector&) -> Matrix { return b; };
    s.constant_actuation = true;
    s.drift_jacobian = [g](const Vector& x) -> Matrix {
        const double c = std::cos(x[2]), sn = std::sin(x[2]);
        Matrix j = Matrix::Zero(6, 6);
        j.row(0) << 0, 0, -x[3] * sn - x[4] * c, c, -sn, 0;
        j.row(1) << 0, 0, x[3] * c - x[4] * sn, sn, c, 0;
        j(2, 5) = 1.0;
        j.row(3) << 0, 0, -g * c, 0, x[5], x[4];
        j.row(4) << 0, 0, g * sn, -x[5], 0, -x[3];
        return j;
    };
    s.uncertainty = [b, p](const Vector& x, const Vector& u) -> Vector {
        return b * vtol_input_uncertainty(x, u, p);
    };
    const double deg60 = M_PI / 3.0;
    s.state_box = Box({{-10.0, 10.0}, {-10.0, 10.0}, {-deg60, deg60}, {-2.0, 2.0}, {-1.0, 1.0},
                       {-deg60, deg60}});
    s.input_box = Box::uniform(2, 0.0, 2.0 * p.mass * g);
    s.parameters = {{"mass", p.mass}, {"inertia", p.inertia}, {"gravity", p.gravity},
                    {"arm", p.arm},   {"k_z", p.k_z},         {"k_phidot", p.k_phidot}};
    return s;
}

/// Scalar or vector linear plant xdot = A x + B u (test and toy systems).
inline DynamicalSystem make_linear_system(const Matrix& a, const Matrix& b, std::string name = "linear") {
    DynamicalSystem s;
    s.name = std::move(name);
    s.state_dim = a.rows();
    s.input_dim = b.cols();
    s.drift = [a](const Vector& x) -> Vector { return a * x; };
    s.actuation = [b](const Vector&) -> Matrix { return b; };
    s.drift_jacobian = [a](const Vector&) -> Matrix { return a; };
    s.constant_actuation = true;
    s.state_box = Box::unbounded(static_cast<std::size_t>(a.rows()));
    s.input_box = Box::unbounded(static_cast<std::size_t>(b.cols()));
    return s;
}

// ---------------------------------------------------------------------------
// Signals and trajectories
// ---------------------------------------------------------------------------

/// Piecewise-linear input signal with uniformly spaced knots starting at t = 0;
/// held at the last knot beyond the end.
struct PiecewiseLinearSignal {
    double spacing = 1.0;
    std::vector<Vector> knots;

    Vector operator()(double t) const {
        if (knots.empty()) throw Error("empty piecewise-linear signal");
        if (knots.size() == 1 || t <= 0.0) return knots.front();
        const double s = t / spacing;
        auto k = static_cast<std::size_t>(std::floor(s));
        if (k >= knots.size() - 1) return knots.back();
        const double a = s - static_cast<double>(k);
        return (1.0 - a) * knots[k] + a * knots[k + 1];
    }
};

struct TrajectoryRecord {
    double dt = 0.0;
    std::vector<double> times;
    std::vector<Vector> states;
    std::vector<Vector> inputs;
    /// Realized zeta samples; empty for nominal records.
    std::vector<Vector> uncertainties;
    /// First grid time at which the state left the system's state box, if any.
    std::optional<double> state_box_exit;

    std::size_t size() const { return times.size(); }
    double horizon() const { return times.empty() ? 0.0 : times.back(); }
    bool has_uncertainties() const { return !uncertainties.empty(); }
    Eigen::Index state_dim() const { return states.empty() ? 0 : states.front().size(); }
    Eigen::Index input_dim() const { return inputs.empty() ? 0 : inputs.front().size(); }

    /// Throws if the sequences disagree in length or the grid is not uniform.
    void validate() const {
        const std::size_t n = times.size();
        if (states.size() != n || inputs.size() != n || (has_uncertainties() && uncertainties.size() != n))
            throw Error("trajectory record sequences have inconsistent lengths");
        for (std::size_t k = 1; k < n; ++k) {
            const double step = times[k] - times[k - 1];
            if (std::abs(step - dt) > 1e-12 * std::max(1.0, std::abs(times[k])) + 1e-12 * dt)
                throw Error("trajectory record time grid is not uniform");
        }
    }

    /// Grid cell index and fraction for time t (clamped to the horizon).
    std::pair<std::size_t, double> locate(double t) const {
        if (times.size() < 2 || t <= times.front()) return {0, 0.0};
        const double s = (t - times.front()) / dt;
        auto k = static_cast<std::size_t>(std::floor(s));
        if (k >= times.size() - 1) return {times.size() - 2, 1.0};
        return {k, s - static_cast<double>(k)};
    }

    Vector state_at(double t) const {
        if (states.size() == 1) return states.front();
        auto [k, a] = locate(t);
        return (1.0 - a) * states[k] + a * states[k + 1];
    }

    Vector input_at(double t) const {
        if (inputs.size() == 1) return inputs.front();
        auto [k, a] = locate(t);
        return (1.0 - a) * inputs[k] + a * inputs[k + 1];
    }
};

/// Reference (xbar, ubar) for tracking: inputs interpolate linearly between grid values and
/// states use cubic Hermite interpolation with nominal-dynamics slopes, so RK4 stage times
/// see a reference consistent with the nominal flow to O(dt^4).
class Reference {
public:
    Reference(TrajectoryRecord record, const DynamicalSystem& nominal)
        : record_(std::move(record)) {
        record_.validate();
        slopes_.reserve(record_.size());
        for (std::size_t k = 0; k < record_.size(); ++k)
            slopes_.push_back(nominal.nominal_dynamics(record_.states[k], record_.inputs[k]));
    }

    const TrajectoryRecord& record() const { return record_; }
    double horizon() const { return record_.horizon(); }
    double dt() const { return record_.dt; }

    Vector input(double t) const { return record_.input_at(t); }

    Vector state(double t) const {
        if (record_.size() == 1) return record_.states.front();
        auto [k, a] = record_.locate(t);
        if (a == 0.0) return record_.states[k];
        if (a == 1.0) return record_.states[k + 1];
        const double h = record_.dt;
        const double a2 = a * a, a3 = a2 * a;
        const double h00 = 2 * a3 - 3 * a2 + 1, h10 = a3 - 2 * a2 + a;
        const double h01 = -2 * a3 + 3 * a2, h11 = a3 - a2;
        return h00 * record_.states[k] + h10 * h * slopes_[k] + h01 * record_.states[k + 1] +
               h11 * h * slopes_[k + 1];
    }

private:
    TrajectoryRecord record_;
    std::vector<Vector> slopes_;
};

template <class P>
concept GridAwarePolicy = requires(P p, std::size_t k, double t, const Vector& x) {
    { p.on_grid(k, t, x) } -> std::convertible_to<Vector>;
};

/// Classical fixed-step RK4 over [0, T]. The policy is evaluated at every stage; policies that
/// expose `on_grid(k, t, x)` are notified at each grid point and their return value is the
/// recorded input. Uncertainty samples zeta(x_k, u_k) are stored when the system carries one.
template <class Policy>
TrajectoryRecord integrate(const DynamicalSystem& sys, const Vector& x0, Policy&& policy, double horizon,
                           double dt) {
    if (!(dt > 0.0)) throw Error("integrate: dt must be positive");
    if (horizon < dt * (1.0 - 1e-12)) throw Error("integrate: horizon must be at least one step");
    if (x0.size() != sys.state_dim) throw DimensionMismatch("integrate: initial state dimension");
    const auto steps = static_cast<std::size_t>(std::llround(horizon / dt));

    TrajectoryRecord rec;
    rec.dt = dt;
    rec.times.reserve(steps + 1);
    rec.states.reserve(steps + 1);
    rec.inputs.reserve(steps + 1);

    auto grid_input = [&](std::size_t k, double t, const Vector& x) -> Vector {
        if constexpr (GridAwarePolicy<std::remove_cvref_t<Policy>>)
            return policy.on_grid(k, t, x);
        else
            return policy(x, t);
    };

    Vector x = x0;
    for (std::size_t k = 0;; ++k) {
        const double t = static_cast<double>(k) * dt;
        const Vector u = grid_input(k, t, x);
        rec.times.push_back(t);
        rec.states.push_back(x);
        rec.inputs.push_back(u);
        if (sys.has_uncertainty()) rec.uncertainties.push_back(sys.uncertainty(x, u));
        if (!rec.state_box_exit && sys.state_box.dim() == static_cast<std::size_t>(x.size()) &&
            !sys.state_box.contains(x))
            rec.state_box_exit = t;
        if (k == steps) break;

        const Vector k1 = sys.dynamics(x, u);
        const Vector x2 = x + 0.5 * dt * k1;
        const Vector k2 = sys.dynamics(x2, policy(x2, t + 0.5 * dt));
        const Vector x3 = x + 0.5 * dt * k2;
        const Vector k3 = sys.dynamics(x3, policy(x3, t + 0.5 * dt));
        const Vector x4 = x + dt * k3;
        const Vector k4 = sys.dynamics(x4, policy(x4, t + dt));
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!x.allFinite()) {
            std::ostringstream os;
            os << "non-finite state in '" << sys.name << "' at t = " << t + dt;
            throw NonFiniteState(t + dt, os.str());
        }
    }
    return rec;
}

/// Open-loop integration of a time signal u(t).
template <class Signal>
TrajectoryRecord integrate_open_loop(const DynamicalSystem& sys, const Vector& x0, const Signal& signal,
                                     double horizon, double dt) {
    return integrate(
        sys, x0, [&signal](const Vector&, double t) -> Vector { return signal(t); }, horizon, dt);
}

}  // namespace cct
