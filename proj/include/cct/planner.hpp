#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <ceres/ceres.h>
#include <json.hpp>

#include "cct/control.hpp"
#include "cct/core.hpp"
#include "cct/dataset.hpp"
#include "cct/metric.hpp"
#include "cct/systems.hpp"
#include "cct/tube.hpp"

namespace cct {

/// Elliptical obstacle {p : (p - center)^T shape (p - center) <= 1} in the (i, j) coordinate plane.
struct EllipseObstacle {
    Eigen::Index i = 0, j = 1;
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
    Eigen::Matrix2d shape = Eigen::Matrix2d::Identity();

    static EllipseObstacle axis_aligned(Eigen::Index i, Eigen::Index j, Eigen::Vector2d c, double a, double b) {
        EllipseObstacle o;
        o.i = i;
        o.j = j;
        o.center = c;
        o.shape = Eigen::Vector2d(1.0 / (a * a), 1.0 / (b * b)).asDiagonal();
        return o;
    }

    Eigen::Vector2d project(const Vector& x) const { return {x[i], x[j]}; }

    /// (p - c)^T Q (p - c); above 1 means clear of the obstacle.
    double level(const Vector& x) const {
        const Eigen::Vector2d d = project(x) - center;
        return d.dot(shape * d);
    }

    /// Outer bound of the Minkowski sum with a disc of radius rho: semi-axes grow by rho.
    EllipseObstacle inflated(double rho) const {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(shape);
        Eigen::Vector2d axes = es.eigenvalues().cwiseSqrt().cwiseInverse().array() + rho;
        EllipseObstacle o = *this;
        o.shape = es.eigenvectors() * axes.cwiseAbs2().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
        return o;
    }
};

struct PlanProblem {
    const DynamicalSystem* nominal = nullptr;
    double horizon = 5.0;
    double dt = 0.01;
    Vector start;
    Vector goal;
    /// Tightened admissible sets (time invariant).
    Box state_box;
    Box input_box;
    std::vector<EllipseObstacle> obstacles;
    double w1 = 1.0;  // input effort
    double w2 = 1.0;  // performance term P
    /// Terminal goal weight inside P.
    double goal_weight = 10.0;
    /// Log-barrier multiplier inside P.
    double barrier_weight = 1e-2;
    /// Initial input guess used on every knot when no warm start is given.
    std::optional<Vector> initial_input;
    /// When set, the input constraint applies to the input the compensated tracking policy would
    /// apply along the reference, v_k = ubar_k - B^+ zeta_hat(xbar_k, v_{k-1}) with v_{-1} = 0,
    /// instead of to ubar itself.
    std::shared_ptr<const UncertaintyPredictor> compensation;
    /// Decision knots sit every `knot_stride` grid steps; grid inputs interpolate linearly between
    /// them. 1 optimizes every grid input.
    std::size_t knot_stride = 1;

    std::size_t steps() const { return static_cast<std::size_t>(std::llround(horizon / dt)); }
};

struct PlanOptions {
    int max_iterations = 500;
    /// Relative cost-change tolerance of the L-BFGS line search solver.
    double tolerance = 1e-9;
};

struct PlanResult {
    TrajectoryRecord reference;  // states from integrating the nominal system under `signal`
    PiecewiseLinearSignal signal;
    /// Inputs checked against the input box (the knots, or the compensated inputs).
    std::vector<Vector> applied_inputs;
    double cost = 0.0;
    std::vector<double> cost_history;
    int iterations = 0;
    bool converged = false;
    double max_state_violation = 0.0;
    double max_input_violation = 0.0;
    double min_obstacle_clearance = kInf;  // min over grid of level - 1

    bool feasible(double tol = 1e-6) const {
        return max_state_violation <= tol && max_input_violation <= tol && min_obstacle_clearance > 0.0;
    }
};

namespace detail {

inline double box_violation(const Box& box, const Vector& v) {
    double worst = 0.0;
    for (std::size_t i = 0; i < box.dim(); ++i) {
        const double x = v[static_cast<Eigen::Index>(i)];
        worst = std::max({worst, box.axes[i].lo - x, x - box.axes[i].hi});
    }
    return worst;
}

// -sum log of the slacks to every finite face, +inf outside; gradient accumulated into g.
inline double box_barrier(const Box& box, const Vector& v, Vector* g) {
    double c = 0.0;
    for (std::size_t i = 0; i < box.dim(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        const auto& a = box.axes[i];
        if (std::isfinite(a.lo)) {
            const double s = v[k] - a.lo;
            if (!(s > 0.0)) return kInf;
            c -= std::log(s);
            if (g) (*g)[k] -= 1.0 / s;
        }
        if (std::isfinite(a.hi)) {
            const double s = a.hi - v[k];
            if (!(s > 0.0)) return kInf;
            c -= std::log(s);
            if (g) (*g)[k] += 1.0 / s;
        }
    }
    return c;
}

struct PlanEvaluation {
    double cost = kInf;
    TrajectoryRecord record;
    std::vector<Vector> applied;
};

}  // namespace detail

class ShootingPlanner {
public:
    explicit ShootingPlanner(PlanProblem p) : p_(std::move(p)) {
        if (!p_.nominal) throw Error("plan: nominal system required");
        if (p_.state_box.empty() || p_.input_box.empty()) throw InfeasiblePlan("plan: tightened sets are empty");
        if (!p_.state_box.contains(p_.start)) throw InfeasiblePlan("plan: start lies outside the tightened state box");
        for (const auto& o : p_.obstacles)
            if (o.level(p_.start) <= 1.0) throw InfeasiblePlan("plan: start lies inside an obstacle");
        n_ = p_.steps();
        stride_ = std::max<std::size_t>(1, p_.knot_stride);
    }

    const PlanProblem& problem() const { return p_; }
    std::size_t knots() const { return n_ + 1; }

    PiecewiseLinearSignal signal(const std::vector<Vector>& u) const { return PiecewiseLinearSignal{p_.dt, u}; }

    /// Cost of one grid point: dt * (w1 |u|^2 + w2 * barrier) plus the terminal goal term. The
    /// input barrier acts on v (the applied input), the effort on the knot u.
    double stage_cost(std::size_t k, const Vector& x, const Vector& u, const Vector& v, Vector* gx, Vector* gu,
                      Vector* gv) const {
        const double mu = p_.barrier_weight;
        Vector bx = Vector::Zero(x.size()), bv = Vector::Zero(v.size());
        double bar = detail::box_barrier(p_.state_box, x, gx ? &bx : nullptr);
        bar += detail::box_barrier(p_.input_box, v, gv ? &bv : nullptr);
        for (const auto& o : p_.obstacles) {
            const double s = o.level(x) - 1.0;
            if (!(s > 0.0)) return kInf;
            bar -= std::log(s);
            if (gx) {
                const Eigen::Vector2d d = 2.0 * (o.shape * (o.project(x) - o.center)) / s;
                bx[o.i] -= d[0];
                bx[o.j] -= d[1];
            }
        }
        if (!std::isfinite(bar)) return kInf;
        const double h = p_.dt;
        double c = h * (p_.w1 * u.squaredNorm() + p_.w2 * mu * bar);
        if (gx) *gx = h * p_.w2 * mu * bx;
        if (gu) *gu = h * 2.0 * p_.w1 * u;
        if (gv) *gv = h * p_.w2 * mu * bv;
        if (k == n_) {
            const Vector e = x - p_.goal;
            c += p_.w2 * p_.goal_weight * e.squaredNorm();
            if (gx) *gx += 2.0 * p_.w2 * p_.goal_weight * e;
        }
        return c;
    }

    /// Inputs the input constraint applies to along a state sequence.
    std::vector<Vector> applied_inputs(const std::vector<Vector>& u, const std::vector<Vector>& x) const {
        if (!p_.compensation) return u;
        std::vector<Vector> v(u.size());
        Vector prev = Vector::Zero(p_.nominal->input_dim);
        for (std::size_t k = 0; k < u.size(); ++k) {
            v[k] = u[k] - pseudo_inverse(p_.nominal->actuation(x[k])) * p_.compensation->predict(x[k], prev);
            prev = v[k];
        }
        return v;
    }

    detail::PlanEvaluation evaluate(const std::vector<Vector>& u) const {
        detail::PlanEvaluation ev;
        try {
            ev.record = integrate_open_loop(*p_.nominal, p_.start, signal(u), p_.horizon, p_.dt);
        } catch (const NonFiniteState&) {
            return ev;
        }
        ev.applied = applied_inputs(u, ev.record.states);
        double c = 0.0;
        for (std::size_t k = 0; k <= n_ && std::isfinite(c); ++k)
            c += stage_cost(k, ev.record.states[k], u[k], ev.applied[k], nullptr, nullptr, nullptr);
        ev.cost = c;
        return ev;
    }

    /// Gradient of the cost with respect to every knot by reverse-mode sweeps through the RK4 steps
    /// (and through the compensation recursion when present).
    std::vector<Vector> gradient(const std::vector<Vector>& u, const detail::PlanEvaluation& ev) const {
        const DynamicalSystem& s = *p_.nominal;
        const TrajectoryRecord& rec = ev.record;
        const double h = p_.dt;
        const Eigen::Index n = s.state_dim, m = s.input_dim;
        const bool comp = static_cast<bool>(p_.compensation);
        // v_k = u_k - P_k zeta_hat(x_k, v_{k-1}): dv_k/dx_k = -P_k Jx_k, dv_k/dv_{k-1} = -P_k Ju_k.
        auto comp_jac = [&](std::size_t k, Matrix& dx, Matrix& dv) {
            const Vector prev = k == 0 ? Vector::Zero(m) : ev.applied[k - 1];
            const Matrix pinv = pseudo_inverse(s.actuation(rec.states[k]));
            const Matrix j = p_.compensation->jacobian(rec.states[k], prev);
            dx = -pinv * j.leftCols(n);
            dv = -pinv * j.rightCols(m);
        };
        std::vector<Vector> gu(n_ + 1);
        Vector gx, g, gv;
        Matrix dx, dv, dv_next;
        stage_cost(n_, rec.states[n_], u[n_], ev.applied[n_], &gx, &g, &gv);
        Vector vbar = gv;  // dJ/dv_k including later dependencies
        gu[n_] = g + vbar;
        Vector lam = gx;  // dJ/dx_{k+1}
        if (comp) {
            comp_jac(n_, dx, dv);
            lam += dx.transpose() * vbar;
            dv_next = dv;
        }
        for (std::size_t k = n_; k-- > 0;) {
            const Vector& x = rec.states[k];
            const Vector v1 = u[k], v4 = u[k + 1], v2 = 0.5 * (u[k] + u[k + 1]);
            const Vector k1 = s.nominal_dynamics(x, v1);
            const Vector x2 = x + 0.5 * h * k1;
            const Vector k2 = s.nominal_dynamics(x2, v2);
            const Vector x3 = x + 0.5 * h * k2;
            const Vector k3 = s.nominal_dynamics(x3, v2);
            const Vector x4 = x + h * k3;

            Vector kb1 = h / 6.0 * lam, kb2 = h / 3.0 * lam, kb3 = h / 3.0 * lam;
            const Vector kb4 = h / 6.0 * lam;
            Vector xb = lam;
            const Vector x4b = s.nominal_jacobian(x4, v4).transpose() * kb4;
            const Vector v4b = s.actuation(x4).transpose() * kb4;
            xb += x4b;
            kb3 += h * x4b;
            const Vector x3b = s.nominal_jacobian(x3, v2).transpose() * kb3;
            const Vector v3b = s.actuation(x3).transpose() * kb3;
            xb += x3b;
            kb2 += 0.5 * h * x3b;
            const Vector x2b = s.nominal_jacobian(x2, v2).transpose() * kb2;
            const Vector v2b = s.actuation(x2).transpose() * kb2;
            xb += x2b;
            kb1 += 0.5 * h * x2b;
            xb += s.nominal_jacobian(x, v1).transpose() * kb1;
            const Vector v1b = s.actuation(x).transpose() * kb1;

            gu[k + 1] += 0.5 * (v2b + v3b) + v4b;
            stage_cost(k, x, u[k], ev.applied[k], &gx, &g, &gv);
            if (comp) {
                vbar = gv + dv_next.transpose() * vbar;
                comp_jac(k, dx, dv);
                xb += dx.transpose() * vbar;
                dv_next = dv;
            } else {
                vbar = gv;
            }
            gu[k] = g + vbar + v1b + 0.5 * (v2b + v3b);
            lam = xb + gx;
        }
        return gu;
    }

    std::size_t decision_knots() const { return (n_ + stride_ - 1) / stride_ + 1; }

    /// Grid inputs from decision knots.
    std::vector<Vector> expand(const std::vector<Vector>& z) const {
        if (stride_ == 1) return z;
        std::vector<Vector> u(n_ + 1);
        for (std::size_t k = 0; k <= n_; ++k) {
            const std::size_t j = k / stride_;
            const double w = static_cast<double>(k % stride_) / static_cast<double>(stride_);
            u[k] = w == 0.0 ? z[j] : Vector((1.0 - w) * z[j] + w * z[j + 1]);
        }
        return u;
    }

    /// Adjoint of expand.
    std::vector<Vector> contract(const std::vector<Vector>& gu) const {
        if (stride_ == 1) return gu;
        std::vector<Vector> gz(decision_knots(), Vector::Zero(gu.front().size()));
        for (std::size_t k = 0; k <= n_; ++k) {
            const std::size_t j = k / stride_;
            const double w = static_cast<double>(k % stride_) / static_cast<double>(stride_);
            gz[j] += (1.0 - w) * gu[k];
            if (w != 0.0) gz[j + 1] += w * gu[k];
        }
        return gz;
    }

    PlanResult solve(std::optional<std::vector<Vector>> warm = std::nullopt, const PlanOptions& opt = {}) const;

private:
    PlanProblem p_;
    std::size_t n_ = 0;
    std::size_t stride_ = 1;
};

namespace detail {

// Cost and knot gradient for the line-search solver; an infeasible iterate reports failure so the
// line search backs off.
class PlanObjective : public ceres::FirstOrderFunction {
public:
    PlanObjective(const ShootingPlanner& p, std::size_t nz, std::size_t m) : p_(p), nz_(nz), m_(m) {}

    bool Evaluate(const double* params, double* cost, double* grad) const override {
        std::vector<Vector> z(nz_);
        const auto m = static_cast<Eigen::Index>(m_);
        for (std::size_t j = 0; j < nz_; ++j) z[j] = Eigen::Map<const Vector>(params + j * m_, m);
        const auto u = p_.expand(z);
        const auto ev = p_.evaluate(u);
        if (!std::isfinite(ev.cost)) return false;
        *cost = ev.cost;
        if (grad) {
            const auto g = p_.contract(p_.gradient(u, ev));
            for (std::size_t j = 0; j < nz_; ++j) Eigen::Map<Vector>(grad + j * m_, m) = g[j];
        }
        return true;
    }
    int NumParameters() const override { return static_cast<int>(nz_ * m_); }

private:
    const ShootingPlanner& p_;
    std::size_t nz_, m_;
};

class CostRecorder : public ceres::IterationCallback {
public:
    explicit CostRecorder(std::vector<double>& out) : out_(out) {}
    ceres::CallbackReturnType operator()(const ceres::IterationSummary& s) override {
        if (s.iteration > 0) out_.push_back(s.cost);
        return ceres::SOLVER_CONTINUE;
    }

private:
    std::vector<double>& out_;
};

}  // namespace detail

inline PlanResult ShootingPlanner::solve(std::optional<std::vector<Vector>> warm, const PlanOptions& opt) const {
    const auto m = static_cast<std::size_t>(p_.nominal->input_dim);
    std::vector<Vector> u;
    if (warm) {
        if (warm->size() != n_ + 1) throw DimensionMismatch("plan: warm start needs one input per grid point");
        for (std::size_t j = 0; j < decision_knots(); ++j) u.push_back((*warm)[std::min(j * stride_, n_)]);
    } else {
        Vector u0 = p_.initial_input ? *p_.initial_input : Vector::Zero(p_.nominal->input_dim);
        if (!p_.initial_input)
            for (std::size_t i = 0; i < p_.input_box.dim(); ++i) {
                const auto& a = p_.input_box.axes[i];
                const auto k = static_cast<Eigen::Index>(i);
                if (std::isfinite(a.lo) && std::isfinite(a.hi)) u0[k] = 0.5 * (a.lo + a.hi);
                else u0[k] = std::clamp(0.0, a.lo, a.hi);
            }
        u.assign(decision_knots(), u0);
    }
    const std::size_t nz = u.size();
    auto ev = evaluate(expand(u));
    if (!std::isfinite(ev.cost))
        throw InfeasiblePlan("plan: initial guess violates the tightened constraints or obstacles");

    std::vector<double> params(nz * m);
    for (std::size_t j = 0; j < nz; ++j) Eigen::Map<Vector>(params.data() + j * m, static_cast<Eigen::Index>(m)) = u[j];

    PlanResult res;
    res.cost_history.push_back(ev.cost);
    detail::CostRecorder recorder(res.cost_history);
    ceres::GradientProblem problem(new detail::PlanObjective(*this, nz, m));
    ceres::GradientProblemSolver::Options so;
    so.line_search_direction_type = ceres::LBFGS;
    so.max_num_iterations = opt.max_iterations;
    so.function_tolerance = opt.tolerance;
    so.logging_type = ceres::SILENT;
    so.callbacks.push_back(&recorder);
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(so, problem, params.data(), &summary);
    res.iterations = static_cast<int>(summary.iterations.size()) - 1;
    res.converged = summary.termination_type == ceres::CONVERGENCE;

    for (std::size_t j = 0; j < nz; ++j) u[j] = Eigen::Map<const Vector>(params.data() + j * m, static_cast<Eigen::Index>(m));
    ev = evaluate(expand(u));
    if (!std::isfinite(ev.cost)) throw InfeasiblePlan("plan: solver returned an infeasible iterate");
    res.signal = signal(expand(u));
    res.applied_inputs = ev.applied;
    res.reference = std::move(ev.record);
    res.cost = ev.cost;
    for (std::size_t k = 0; k <= n_; ++k) {
        res.max_state_violation = std::max(res.max_state_violation, detail::box_violation(p_.state_box, res.reference.states[k]));
        res.max_input_violation = std::max(res.max_input_violation, detail::box_violation(p_.input_box, res.applied_inputs[k]));
        for (const auto& o : p_.obstacles)
            res.min_obstacle_clearance = std::min(res.min_obstacle_clearance, o.level(res.reference.states[k]) - 1.0);
    }
    return res;
}

inline PlanResult plan(const PlanProblem& problem, std::optional<std::vector<Vector>> warm = std::nullopt,
                       const PlanOptions& opt = {}) {
    return ShootingPlanner(problem).solve(std::move(warm), opt);
}

inline nlohmann::json plan_manifest(const PlanProblem& p, const PlanResult& r) {
    auto box_json = [](const Box& b) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& i : b.axes) a.push_back({i.lo, i.hi});
        return a;
    };
    nlohmann::json j;
    j["horizon_s"] = p.horizon;
    j["dt_s"] = p.dt;
    j["start"] = to_std(p.start);
    j["goal"] = to_std(p.goal);
    j["w1"] = p.w1;
    j["w2"] = p.w2;
    j["goal_weight"] = p.goal_weight;
    j["barrier_weight"] = p.barrier_weight;
    j["knot_stride"] = p.knot_stride;
    j["state_box"] = box_json(p.state_box);
    j["input_box"] = box_json(p.input_box);
    nlohmann::json obs = nlohmann::json::array();
    for (const auto& o : p.obstacles)
        obs.push_back({{"plane", {o.i, o.j}},
                       {"center", {o.center[0], o.center[1]}},
                       {"shape", {o.shape(0, 0), o.shape(0, 1), o.shape(1, 1)}}});
    j["obstacles"] = obs;
    j["solver"] = {{"iterations", r.iterations},
                   {"converged", r.converged},
                   {"cost", r.cost},
                   {"max_state_violation", r.max_state_violation},
                   {"max_input_violation", r.max_input_violation},
                   {"min_obstacle_clearance", std::isfinite(r.min_obstacle_clearance)
                                                  ? nlohmann::json(r.min_obstacle_clearance)
                                                  : nlohmann::json(nullptr)}};
    return j;
}

// ---------------------------------------------------------------------------
// End-to-end tracking of a plan
// ---------------------------------------------------------------------------

struct RolloutCheck {
    double sup_distance = 0.0;
    bool contained = true;
    bool state_ok = true;  // original state box at every grid point
    bool input_ok = true;  // original input box at every grid point
    double min_clearance = kInf;
    std::vector<double> distances;
};

struct RunReport {
    double radius = 0.0;
    std::vector<RolloutCheck> rollouts;

    std::size_t count(bool RolloutCheck::*field) const {
        std::size_t c = 0;
        for (const auto& r : rollouts) c += (r.*field) ? 1 : 0;
        return c;
    }
    double contained_fraction() const { return fraction(count(&RolloutCheck::contained)); }
    /// Fraction of rollouts that left the original state or input set at some grid time.
    double violation_fraction() const {
        std::size_t v = 0;
        for (const auto& r : rollouts) v += (!r.state_ok || !r.input_ok) ? 1 : 0;
        return fraction(v);
    }
    double fraction(std::size_t c) const {
        return rollouts.empty() ? 0.0 : static_cast<double>(c) / static_cast<double>(rollouts.size());
    }
};

/// Checks one closed-loop rollout against its tube and the original sets.
inline RolloutCheck check_rollout(const TrajectoryRecord& rollout, const PRCITube& tube, const Box& state_box,
                                  const Box& input_box, const std::vector<EllipseObstacle>& obstacles = {},
                                  const GeodesicOptions& geo = {}) {
    RolloutCheck c;
    const auto rc = rollout_containment(tube, rollout, geo);
    c.sup_distance = rc.sup_distance;
    c.contained = rc.contained;
    c.distances = rc.distances;
    for (std::size_t k = 0; k < rollout.size(); ++k) {
        if (!state_box.contains(rollout.states[k])) c.state_ok = false;
        if (!input_box.contains(rollout.inputs[k])) c.input_ok = false;
        for (const auto& o : obstacles) c.min_clearance = std::min(c.min_clearance, o.level(rollout.states[k]) - 1.0);
    }
    return c;
}

/// Simulates the compensated tracking policy against sys_true around a planned reference from each
/// initial state and reports tube containment and original-constraint satisfaction.
inline RunReport end_to_end_run(const DynamicalSystem& sys_true, const DynamicalSystem& nominal, const PlanResult& plan_result,
                                const ContractionMetric& metric, std::shared_ptr<const UncertaintyPredictor> predictor,
                                const CalibrationResult& calibration, const std::vector<Vector>& initial_states,
                                const Box& state_box, const Box& input_box,
                                const std::vector<EllipseObstacle>& obstacles = {}, const PolicyOptions& popt = {},
                                std::size_t workers = default_workers()) {
    RunReport rep;
    const PRCITube tube = make_tube(plan_result.reference, metric, calibration);
    rep.radius = tube.radius;
    auto reference = std::make_shared<const Reference>(plan_result.reference, nominal);
    rep.rollouts.resize(initial_states.size());
    parallel_for(initial_states.size(), workers, [&](std::size_t i) {
        ContractingPolicy policy(nominal, metric, reference, predictor, popt);
        const auto rec = closed_loop_rollout(sys_true, policy, initial_states[i]);
        rep.rollouts[i] = check_rollout(rec, tube, state_box, input_box, obstacles, popt.geodesic);
    });
    return rep;
}

inline nlohmann::json to_json(const RunReport& r) {
    nlohmann::json j;
    j["radius"] = r.radius;
    j["N"] = r.rollouts.size();
    j["contained_fraction"] = r.contained_fraction();
    j["violation_fraction"] = r.violation_fraction();
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : r.rollouts)
        arr.push_back({{"sup_distance", c.sup_distance},
                       {"contained", c.contained},
                       {"state_ok", c.state_ok},
                       {"input_ok", c.input_ok},
                       {"min_clearance", std::isfinite(c.min_clearance) ? nlohmann::json(c.min_clearance)
                                                                        : nlohmann::json(nullptr)}});
    j["rollouts"] = arr;
    return j;
}

}  // namespace cct
