#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cct/core.hpp"
#include "cct/systems.hpp"

namespace cct {

// ---------------------------------------------------------------------------
// Contraction metric M(x)
// ---------------------------------------------------------------------------

enum class MetricParameterization { constant, polynomial };

/// One monomial term  x^exponents * coefficient  of a polynomial metric.
struct PolynomialTerm {
    std::vector<int> exponents;
    Matrix coefficient;
};

class ContractionMetric {
public:
    ContractionMetric() = default;

    /// Constant metric; the bounds are read off the eigenvalues of `m`.
    static ContractionMetric constant(const Matrix& m, double rate) {
        if (m.rows() != m.cols() || m.rows() == 0) throw DimensionMismatch("metric matrix must be square");
        ContractionMetric c;
        c.kind_ = MetricParameterization::constant;
        c.dim_ = m.rows();
        c.constant_ = symmetrize(m);
        const Vector eig = sym_eigenvalues(c.constant_);
        if (!(eig.minCoeff() > 0.0)) throw Error("constant metric must be positive definite");
        c.lower_ = eig.minCoeff();
        c.upper_ = eig.maxCoeff();
        c.rate_ = rate;
        return c;
    }

    static ContractionMetric polynomial(std::vector<PolynomialTerm> terms, double m_lower, double m_upper,
                                        double rate) {
        if (terms.empty()) throw Error("polynomial metric needs at least one term");
        ContractionMetric c;
        c.kind_ = MetricParameterization::polynomial;
        c.dim_ = terms.front().coefficient.rows();
        for (auto& t : terms) {
            if (t.coefficient.rows() != c.dim_ || t.coefficient.cols() != c.dim_ ||
                static_cast<Eigen::Index>(t.exponents.size()) != c.dim_)
                throw DimensionMismatch("polynomial metric term has inconsistent dimensions");
            t.coefficient = symmetrize(t.coefficient);
        }
        c.terms_ = std::move(terms);
        c.lower_ = m_lower;
        c.upper_ = m_upper;
        c.rate_ = rate;
        return c;
    }

    MetricParameterization parameterization() const { return kind_; }
    bool is_constant() const { return kind_ == MetricParameterization::constant; }
    Eigen::Index dim() const { return dim_; }
    double lower_bound() const { return lower_; }
    double upper_bound() const { return upper_; }
    double rate() const { return rate_; }
    const Matrix& constant_matrix() const { return constant_; }
    const std::vector<PolynomialTerm>& terms() const { return terms_; }

    ContractionMetric with_rate(double rate) const {
        ContractionMetric c = *this;
        c.rate_ = rate;
        return c;
    }

    Matrix evaluate(const Vector& x) const {
        if (is_constant()) return constant_;
        check(x);
        Matrix m = Matrix::Zero(dim_, dim_);
        for (const auto& t : terms_) m += monomial(x, t.exponents) * t.coefficient;
        return m;
    }

    /// dM/dx_k at x.
    Matrix partial(const Vector& x, Eigen::Index k) const {
        if (is_constant()) return Matrix::Zero(dim_, dim_);
        check(x);
        Matrix d = Matrix::Zero(dim_, dim_);
        for (const auto& t : terms_) {
            const int e = t.exponents[static_cast<std::size_t>(k)];
            if (e == 0) continue;
            std::vector<int> ex = t.exponents;
            ex[static_cast<std::size_t>(k)] = e - 1;
            d += static_cast<double>(e) * monomial(x, ex) * t.coefficient;
        }
        return d;
    }

    /// Directional derivative sum_k dM/dx_k p_k.
    Matrix directional(const Vector& x, const Vector& p) const {
        Matrix d = Matrix::Zero(dim_, dim_);
        if (is_constant()) return d;
        for (Eigen::Index k = 0; k < dim_; ++k)
            if (p[k] != 0.0) d += p[k] * partial(x, k);
        return d;
    }

private:
    static double monomial(const Vector& x, const std::vector<int>& ex) {
        double v = 1.0;
        for (std::size_t i = 0; i < ex.size(); ++i)
            for (int p = 0; p < ex[i]; ++p) v *= x[static_cast<Eigen::Index>(i)];
        return v;
    }

    void check(const Vector& x) const {
        if (x.size() != dim_) throw DimensionMismatch("metric evaluated at a point of the wrong dimension");
    }

    MetricParameterization kind_ = MetricParameterization::constant;
    Eigen::Index dim_ = 0;
    Matrix constant_;
    std::vector<PolynomialTerm> terms_;
    double lower_ = 0.0;
    double upper_ = 0.0;
    double rate_ = 0.0;
};

// ---------------------------------------------------------------------------
// Geodesics and Riemannian distance
// ---------------------------------------------------------------------------

/// Discrete curve gamma(mu_i), mu_i = i / K, between two states.
struct Geodesic {
    std::vector<Vector> nodes;
    double energy = 0.0;
    bool converged = true;
    int iterations = 0;
    /// Discrete energy after every accepted optimizer step (first entry is the straight line).
    std::vector<double> energy_history;

    std::size_t segments() const { return nodes.empty() ? 0 : nodes.size() - 1; }
    const Vector& endpoint_a() const { return nodes.front(); }
    const Vector& endpoint_b() const { return nodes.back(); }

    /// d gamma / d mu at mu = 0 from a one-sided second-order difference.
    Vector tangent_start() const {
        const auto k = static_cast<double>(segments());
        if (segments() < 2) return k * (nodes[1] - nodes[0]);
        return k * (-3.0 * nodes[0] + 4.0 * nodes[1] - nodes[2]) / 2.0;
    }

    /// d gamma / d mu at mu = 1.
    Vector tangent_end() const {
        const std::size_t kk = segments();
        const auto k = static_cast<double>(kk);
        if (kk < 2) return k * (nodes[1] - nodes[0]);
        return k * (3.0 * nodes[kk] - 4.0 * nodes[kk - 1] + nodes[kk - 2]) / 2.0;
    }
};

/// E = K * sum_i dc_i^T M(midpoint_i) dc_i on a node sequence.
inline double discrete_energy(const ContractionMetric& metric, const std::vector<Vector>& nodes) {
    const auto k = static_cast<double>(nodes.size() - 1);
    double e = 0.0;
    for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
        const Vector d = nodes[i + 1] - nodes[i];
        e += d.dot(metric.evaluate(0.5 * (nodes[i] + nodes[i + 1])) * d);
    }
    return k * e;
}

/// L = sum_i sqrt(dc_i^T M(midpoint_i) dc_i).
inline double discrete_length(const ContractionMetric& metric, const std::vector<Vector>& nodes) {
    double l = 0.0;
    for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
        const Vector d = nodes[i + 1] - nodes[i];
        l += std::sqrt(std::max(0.0, d.dot(metric.evaluate(0.5 * (nodes[i] + nodes[i + 1])) * d)));
    }
    return l;
}

struct GeodesicOptions {
    int segments = 16;
    int max_iterations = 500;
    /// Converged once the relative energy decrease of a step falls below this.
    double tolerance = 1e-12;
    /// Reported as non-converged only if the last decrease is still above this.
    double warn_tolerance = 1e-9;
    /// Keep the closed-form straight line for constant metrics.
    bool exact_for_constant = true;
};

struct DistanceResult {
    double distance = 0.0;
    Geodesic geodesic;
    bool converged() const { return geodesic.converged; }
};

namespace detail {

// Solves (2 tridiag(-1, 2, -1)) y = rhs column-wise in place (Thomas algorithm).
inline void solve_chain_laplacian(std::vector<Vector>& rhs) {
    const std::size_t n = rhs.size();
    if (n == 0) return;
    std::vector<double> c(n, 0.0);
    std::vector<Vector> d = rhs;
    double b = 2.0;
    c[0] = -1.0 / b;
    d[0] = d[0] / b;
    for (std::size_t i = 1; i < n; ++i) {
        const double m = 2.0 + c[i - 1];
        c[i] = -1.0 / m;
        d[i] = (d[i] + d[i - 1]) / m;
    }
    rhs[n - 1] = d[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) rhs[i] = d[i] - c[i] * rhs[i + 1];
}

}  // namespace detail

/// Minimizes the discrete energy over interior nodes by preconditioned gradient descent with an
/// Armijo line search, starting from the straight segment x -> y. Returns sqrt(energy).
inline DistanceResult riemannian_distance(const ContractionMetric& metric, const Vector& x, const Vector& y,
                                          const GeodesicOptions& opt = {}) {
    if (opt.segments < 1) throw Error("riemannian_distance: at least one segment required");
    if (x.size() != metric.dim() || y.size() != metric.dim())
        throw DimensionMismatch("riemannian_distance: endpoint dimension does not match metric");
    const auto kseg = static_cast<std::size_t>(opt.segments);
    const auto kd = static_cast<double>(opt.segments);
    const Eigen::Index n = metric.dim();

    DistanceResult out;
    Geodesic& g = out.geodesic;
    g.nodes.resize(kseg + 1);
    for (std::size_t i = 0; i <= kseg; ++i) g.nodes[i] = x + (static_cast<double>(i) / kd) * (y - x);
    g.nodes.front() = x;
    g.nodes.back() = y;

    if (metric.is_constant() && opt.exact_for_constant) {
        const Vector d = y - x;
        g.energy = d.dot(metric.constant_matrix() * d);
        g.energy_history = {g.energy};
        out.distance = std::sqrt(std::max(0.0, g.energy));
        return out;
    }

    double energy = discrete_energy(metric, g.nodes);
    g.energy_history.push_back(energy);
    if (energy == 0.0 || kseg < 2) {
        g.energy = energy;
        out.distance = std::sqrt(energy);
        return out;
    }

    double last_decrease = kInf;
    std::vector<Vector> grad(kseg - 1, Vector::Zero(n));
    std::vector<Vector> trial = g.nodes;
    for (int it = 0; it < opt.max_iterations; ++it) {
        // Gradient of K * sum dc^T M(mid) dc with respect to interior nodes.
        std::vector<Matrix> mids(kseg);
        std::vector<Vector> seg(kseg), quad(kseg);
        double scale = 0.0;
        for (std::size_t i = 0; i < kseg; ++i) {
            const Vector mid = 0.5 * (g.nodes[i] + g.nodes[i + 1]);
            seg[i] = g.nodes[i + 1] - g.nodes[i];
            mids[i] = metric.evaluate(mid);
            scale += mids[i].trace() / static_cast<double>(n);
            quad[i] = Vector::Zero(n);
            if (!metric.is_constant())
                for (Eigen::Index k = 0; k < n; ++k) quad[i][k] = seg[i].dot(metric.partial(mid, k) * seg[i]);
        }
        scale /= static_cast<double>(kseg);
        double gnorm2 = 0.0;
        for (std::size_t j = 1; j < kseg; ++j) {
            grad[j - 1] = 2.0 * kd * (mids[j - 1] * seg[j - 1] - mids[j] * seg[j]) +
                          0.5 * kd * (quad[j - 1] + quad[j]);
            gnorm2 += grad[j - 1].squaredNorm();
        }
        if (gnorm2 == 0.0) {
            last_decrease = 0.0;
            break;
        }
        // Preconditioned direction: exact Newton step for a flat metric of the same scale.
        std::vector<Vector> dir = grad;
        detail::solve_chain_laplacian(dir);
        double slope = 0.0;
        for (std::size_t j = 0; j + 1 < kseg; ++j) {
            dir[j] = -dir[j] / (kd * scale);
            slope += grad[j].dot(dir[j]);
        }
        if (!(slope < 0.0)) {
            last_decrease = 0.0;
            break;
        }
        double step = 1.0;
        double e_new = energy;
        bool accepted = false;
        for (int ls = 0; ls < 50; ++ls) {
            for (std::size_t j = 1; j < kseg; ++j) trial[j] = g.nodes[j] + step * dir[j - 1];
            e_new = discrete_energy(metric, trial);
            if (std::isfinite(e_new) && e_new <= energy + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            last_decrease = 0.0;
            break;
        }
        g.nodes.swap(trial);
        trial = g.nodes;
        last_decrease = (energy - e_new) / energy;
        energy = e_new;
        g.energy_history.push_back(energy);
        g.iterations = it + 1;
        if (last_decrease < opt.tolerance) break;
    }
    g.energy = energy;
    g.converged = last_decrease <= opt.warn_tolerance;
    out.distance = std::sqrt(std::max(0.0, energy));
    return out;
}

/// Closed-form distance for constant metrics: sqrt((x - y)^T M (x - y)).
inline double constant_metric_distance(const Matrix& m, const Vector& x, const Vector& y) {
    const Vector d = x - y;
    return std::sqrt(std::max(0.0, d.dot(m * d)));
}

// ---------------------------------------------------------------------------
// Grid verification of the contraction conditions
// ---------------------------------------------------------------------------

struct VerificationOptions {
    double kill_tolerance = 1e-6;
    double fd_step = 1e-5;
    double rank_tolerance = 1e-8;
    double bound_tolerance = 1e-10;
};

struct ConditionSummary {
    double worst_margin = kInf;
    std::size_t worst_index = 0;
    std::vector<std::size_t> violations;
    bool passed() const { return violations.empty(); }
};

struct VerificationReport {
    std::size_t points = 0;
    double rate = 0.0;
    /// min over points of min(eig_min(M) - m_lower, m_upper - eig_max(M)).
    ConditionSummary bounds;
    /// kill_tolerance minus the worst Frobenius residual of the Killing-field condition.
    ConditionSummary killing;
    /// Smallest -eig_max of the contraction matrix restricted to ker(B^T M).
    ConditionSummary contraction;
    std::vector<double> contraction_margins;

    bool passed() const { return bounds.passed() && killing.passed() && contraction.passed(); }
};

struct PointConditions {
    double bound_margin = kInf;
    double killing_residual = 0.0;
    double contraction_margin = kInf;
};

/// Evaluates the three metric conditions at a single state.
inline PointConditions contraction_conditions_at(const ContractionMetric& metric, const DynamicalSystem& sys,
                                                 const Vector& x, const VerificationOptions& opt = {}) {
    PointConditions pc;
    const Matrix m = metric.evaluate(x);
    const Vector eig = sym_eigenvalues(m);
    pc.bound_margin = std::min(eig.minCoeff() - metric.lower_bound(), metric.upper_bound() - eig.maxCoeff());

    const Matrix b = sys.actuation(x);
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
        const Matrix db =
            jacobian_fd([&](const Vector& z) -> Vector { return sys.actuation(z).col(j); }, x, opt.fd_step);
        const Matrix kill = db.transpose() * m + m * db + metric.directional(x, b.col(j));
        pc.killing_residual = std::max(pc.killing_residual, kill.norm());
    }

    const Matrix a = (sys.drift_jacobian ? sys.drift_jacobian(x) : jacobian_fd(sys.drift, x, opt.fd_step));
    const Matrix cond =
        a.transpose() * m + m * a + metric.directional(x, sys.drift(x)) + 2.0 * metric.rate() * m;
    const Matrix basis = null_space(b.transpose() * m, opt.rank_tolerance);
    if (basis.cols() > 0) pc.contraction_margin = -max_eigenvalue(basis.transpose() * cond * basis);
    return pc;
}

inline VerificationReport verify_contraction(const ContractionMetric& metric, const DynamicalSystem& sys,
                                             const std::vector<Vector>& grid, const VerificationOptions& opt = {}) {
    VerificationReport rep;
    rep.points = grid.size();
    rep.rate = metric.rate();
    auto note = [](ConditionSummary& s, std::size_t i, double margin, bool ok) {
        if (margin < s.worst_margin) {
            s.worst_margin = margin;
            s.worst_index = i;
        }
        if (!ok) s.violations.push_back(i);
    };
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const PointConditions pc = contraction_conditions_at(metric, sys, grid[i], opt);
        note(rep.bounds, i, pc.bound_margin, pc.bound_margin >= -opt.bound_tolerance);
        const double km = opt.kill_tolerance - pc.killing_residual;
        note(rep.killing, i, km, km >= 0.0);
        note(rep.contraction, i, pc.contraction_margin, pc.contraction_margin > 0.0);
        rep.contraction_margins.push_back(pc.contraction_margin);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Constant-metric synthesis with a search over the contraction rate
// ---------------------------------------------------------------------------

struct SynthesisOptions {
    /// Required relative margin min_i -eig_max(S_i) / eig_max(W) of the dual condition.
    double margin_floor = 1e-3;
    int phase1_iterations = 400;
    int phase2_iterations = 300;
    int bisection_steps = 10;
    int scan_points = 8;
    double softmin_temperature = 100.0;
    double fd_step = 1e-5;
    double kill_tolerance = 1e-6;
};

struct RateTrial {
    double rate = 0.0;
    bool feasible = false;
    double margin = -kInf;
    double condition_number = kInf;
    double objective = kInf;
    Matrix dual;  // W, normalized so its largest eigenvalue is 1
};

struct SynthesisResult {
    ContractionMetric metric;
    double objective = kInf;
    std::vector<RateTrial> trials;
};

namespace detail {

struct DualProblem {
    std::vector<Matrix> jac;    // df/dx at grid points
    std::vector<Matrix> perp;   // orthonormal basis of ker(B^T)
    std::vector<std::vector<Matrix>> dbs;  // dB_j/dx
    double rate = 0.0;
    double tau = 100.0;
    double floor = 1e-3;

    struct Eval {
        std::vector<double> margins;  // relative margins r_i
        double min_margin = kInf;
        double soft_min = kInf;
        Matrix grad_soft;             // d soft_min / dW
        double log_cond = 0.0;
        Matrix grad_log_cond;
        double barrier = 0.0;         // sum_i log(r_i - floor) / G
        Matrix grad_barrier;
        bool barrier_ok = false;
    };

    Eval evaluate(const Matrix& w, bool need_barrier) const {
        Eval e;
        const Eigen::Index n = w.rows();
        Eigen::SelfAdjointEigenSolver<Matrix> ws(w);
        const double wmax = ws.eigenvalues()(n - 1), wmin = ws.eigenvalues()(0);
        const Vector top = ws.eigenvectors().col(n - 1), bot = ws.eigenvectors().col(0);
        e.log_cond = std::log(wmax / wmin);
        e.grad_log_cond = top * top.transpose() / wmax - bot * bot.transpose() / wmin;

        const std::size_t g = jac.size();
        e.margins.resize(g);
        std::vector<Matrix> grads(g);
        for (std::size_t i = 0; i < g; ++i) {
            const Matrix& p = perp[i];
            if (p.cols() == 0) {
                e.margins[i] = kInf;
                grads[i] = Matrix::Zero(n, n);
                continue;
            }
            const Matrix aw = jac[i] * w;
            const Matrix s = p.transpose() * (aw + aw.transpose() + 2.0 * rate * w) * p;
            Eigen::SelfAdjointEigenSolver<Matrix> ss(symmetrize(s));
            const double smax = ss.eigenvalues()(s.rows() - 1);
            const Vector wv = p * ss.eigenvectors().col(s.rows() - 1);
            const Matrix gs = jac[i].transpose() * wv * wv.transpose() + wv * wv.transpose() * jac[i] +
                              2.0 * rate * wv * wv.transpose();
            e.margins[i] = -smax / wmax;
            grads[i] = -gs / wmax + (smax / (wmax * wmax)) * top * top.transpose();
        }
        e.min_margin = *std::min_element(e.margins.begin(), e.margins.end());
        if (!std::isfinite(e.min_margin)) {
            e.soft_min = e.min_margin;
            e.grad_soft = Matrix::Zero(n, n);
            e.barrier_ok = true;
            e.grad_barrier = Matrix::Zero(n, n);
            return e;
        }
        // Mean-normalized log-sum-exp soft minimum and its gradient.
        double z = 0.0;
        std::vector<double> wts(g);
        for (std::size_t i = 0; i < g; ++i) {
            wts[i] = std::exp(-tau * (e.margins[i] - e.min_margin));
            z += wts[i];
        }
        e.soft_min = e.min_margin - std::log(z / static_cast<double>(g)) / tau;
        e.grad_soft = Matrix::Zero(n, n);
        for (std::size_t i = 0; i < g; ++i) e.grad_soft += (wts[i] / z) * grads[i];

        if (need_barrier) {
            e.barrier_ok = e.min_margin > floor;
            e.grad_barrier = Matrix::Zero(n, n);
            if (e.barrier_ok) {
                for (std::size_t i = 0; i < g; ++i) {
                    const double slack = e.margins[i] - floor;
                    e.barrier += std::log(slack);
                    e.grad_barrier += grads[i] / slack;
                }
                e.barrier /= static_cast<double>(g);
                e.grad_barrier /= static_cast<double>(g);
            }
        }
        return e;
    }

    bool killing_ok(const Matrix& w, double tol) const {
        for (std::size_t i = 0; i < dbs.size(); ++i)
            for (const Matrix& db : dbs[i]) {
                const Matrix k = perp[i].transpose() * (db * w + w * db.transpose()) * perp[i];
                if (k.norm() > tol) return false;
            }
        return true;
    }
};

// W = X^{-1} with X the stabilizing CARE solution for (A + rate I, B) gives
// A W + W A^T + 2 rate W = B B^T - W W, negative on ker(B^T) at the linearization.
inline std::optional<Matrix> riccati_warm_start(const DualProblem& prob, const Matrix& a, const Matrix& b,
                                                double rate) {
    (void)prob;
    const Eigen::Index n = a.rows();
    try {
        const Matrix x = solve_care(a + rate * Matrix::Identity(n, n), b, Matrix::Identity(n, n),
                                    Matrix::Identity(b.cols(), b.cols()));
        Matrix w = symmetrize(x.inverse());
        if (!w.allFinite() || !(min_eigenvalue(w) > 0.0)) return std::nullopt;
        return Matrix(w / max_eigenvalue(w));
    } catch (const Error&) {
        return std::nullopt;
    }
}

inline Matrix lower_gradient(const Matrix& grad_w, const Matrix& l) {
    return Matrix((2.0 * grad_w * l).triangularView<Eigen::Lower>());
}

inline Matrix normalized_dual(const Matrix& l) {
    Matrix w = l * l.transpose();
    return w / max_eigenvalue(w);
}

// Gradient-ascent / descent on the Cholesky factor with a normalized step and backtracking.
template <class Objective>
Matrix descend(Matrix l, Objective&& obj, int iterations, bool (*stop)(double, double), double stop_arg) {
    auto [f, grad] = obj(l);
    double step = 0.1;
    for (int it = 0; it < iterations; ++it) {
        if (stop && stop(f, stop_arg)) break;
        const double gn = grad.norm();
        if (!(gn > 0.0) || !std::isfinite(f)) break;
        bool moved = false;
        for (int ls = 0; ls < 30; ++ls) {
            Matrix cand = l - (step * l.norm() / gn) * grad;
            auto [fc, gc] = obj(cand);
            if (std::isfinite(fc) && fc < f) {
                l = std::move(cand);
                f = fc;
                grad = std::move(gc);
                step = std::min(step * 1.5, 1.0);
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break;
    }
    return l;
}

}  // namespace detail

/// Searches constant duals W = L L^T that satisfy the projected contraction condition
/// P^T (A W + W A^T + 2 lambda W) P < 0 on every grid point, for rates in `rate_range`.
/// Feasibility is bisected; feasible rates are then scanned and the pair minimizing
/// (score / lambda)^2 * m_upper (with M scaled so m_lower = 1) is returned.
inline SynthesisResult synthesize_constant_metric(const DynamicalSystem& sys, const std::vector<Vector>& grid,
                                                  Interval rate_range, double score_hint = 1.0,
                                                  const SynthesisOptions& opt = {}) {
    if (!(rate_range.lo > 0.0) || !(rate_range.hi >= rate_range.lo))
        throw Error("synthesize_constant_metric: rate range must be positive");
    if (grid.empty()) throw Error("synthesize_constant_metric: empty grid");
    const Eigen::Index n = sys.state_dim;

    detail::DualProblem prob;
    prob.tau = opt.softmin_temperature;
    prob.floor = opt.margin_floor;
    bool varying_b = false;
    for (const Vector& x : grid) {
        prob.jac.push_back((sys.drift_jacobian ? sys.drift_jacobian(x) : jacobian_fd(sys.drift, x, opt.fd_step)));
        const Matrix b = sys.actuation(x);
        prob.perp.push_back(null_space(b.transpose()));
        std::vector<Matrix> dbs;
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            Matrix db =
                jacobian_fd([&](const Vector& z) -> Vector { return sys.actuation(z).col(j); }, x, opt.fd_step);
            if (db.norm() > 0.0) varying_b = true;
            dbs.push_back(std::move(db));
        }
        prob.dbs.push_back(std::move(dbs));
    }
    if (!varying_b) prob.dbs.clear();
    Matrix mean_jac = Matrix::Zero(n, n);
    for (const Matrix& a : prob.jac) mean_jac += a / static_cast<double>(grid.size());
    Vector center = Vector::Zero(n);
    for (const Vector& x : grid) center += x / static_cast<double>(grid.size());
    const Matrix center_b = sys.actuation(center);

    auto try_rate = [&](double rate) {
        prob.rate = rate;
        RateTrial tr;
        tr.rate = rate;
        Matrix l = Matrix::Identity(n, n);
        // Warm start from the Riccati dual of the grid-averaged linearization when it beats W = I.
        if (auto warm = detail::riccati_warm_start(prob, mean_jac, center_b, rate)) {
            if (prob.evaluate(*warm, false).min_margin > prob.evaluate(l * l.transpose(), false).min_margin)
                l = Eigen::LLT<Matrix>(*warm).matrixL();
        }
        // Phase 1: push the worst relative margin above the floor.
        auto phase1 = [&](const Matrix& lc) -> std::pair<double, Matrix> {
            const auto e = prob.evaluate(lc * lc.transpose(), false);
            return {-e.soft_min, detail::lower_gradient(-e.grad_soft, lc)};
        };
        const double target = 2.0 * opt.margin_floor;
        auto reached = +[](double f, double t) { return -f >= t; };
        l = detail::descend(l, phase1, opt.phase1_iterations, reached, target);
        auto e = prob.evaluate(l * l.transpose(), true);
        if (!(e.min_margin > opt.margin_floor)) {
            tr.margin = e.min_margin;
            return tr;
        }
        // Phase 2: shrink the condition number inside the log-barrier of the margin floor.
        for (double mu : {1e-1, 1e-2, 1e-3}) {
            auto phase2 = [&](const Matrix& lc) -> std::pair<double, Matrix> {
                const auto ev = prob.evaluate(lc * lc.transpose(), true);
                if (!ev.barrier_ok) return {kInf, Matrix::Zero(n, n)};
                return {ev.log_cond - mu * ev.barrier,
                        detail::lower_gradient(ev.grad_log_cond - mu * ev.grad_barrier, lc)};
            };
            l = detail::descend(l, phase2, opt.phase2_iterations / 3, nullptr, 0.0);
        }
        const Matrix w = detail::normalized_dual(l);
        e = prob.evaluate(w, false);
        tr.margin = e.min_margin;
        tr.condition_number = std::exp(e.log_cond);
        tr.feasible = e.min_margin > opt.margin_floor && prob.killing_ok(w, opt.kill_tolerance);
        tr.dual = w;
        if (tr.feasible) tr.objective = (score_hint / rate) * (score_hint / rate) * tr.condition_number;
        return tr;
    };

    SynthesisResult res;
    auto record = [&](RateTrial tr) {
        res.trials.push_back(std::move(tr));
        return res.trials.back().feasible;
    };

    double feasible_hi = 0.0;
    if (record(try_rate(rate_range.hi))) {
        feasible_hi = rate_range.hi;
    } else if (!record(try_rate(rate_range.lo))) {
        throw Infeasible("no contraction rate in [" + std::to_string(rate_range.lo) + ", " +
                         std::to_string(rate_range.hi) + "] admits a constant metric on the grid");
    } else {
        double lo = rate_range.lo, hi = rate_range.hi;
        for (int b = 0; b < opt.bisection_steps; ++b) {
            const double mid = 0.5 * (lo + hi);
            if (record(try_rate(mid)))
                lo = mid;
            else
                hi = mid;
        }
        feasible_hi = lo;
    }
    for (int i = 1; i < opt.scan_points; ++i) {
        const double r = rate_range.lo + (feasible_hi - rate_range.lo) * i / static_cast<double>(opt.scan_points);
        record(try_rate(r));
    }

    const RateTrial* best = nullptr;
    for (const auto& tr : res.trials)
        if (tr.feasible && (!best || tr.objective < best->objective ||
                            (tr.objective == best->objective && tr.rate > best->rate)))
            best = &tr;
    if (!best) throw Infeasible("constant-metric synthesis found no feasible rate");

    // M = W^{-1} scaled so its smallest eigenvalue is one.
    const Matrix w = best->dual;
    Matrix m = w.inverse() * max_eigenvalue(w);
    res.metric = ContractionMetric::constant(m, best->rate);
    res.objective = best->objective;
    return res;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    const auto r = static_cast<Eigen::Index>(j.size());
    const auto c = r ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        if (static_cast<Eigen::Index>(j.at(i).size()) != c) throw Error("ragged matrix in JSON");
        for (Eigen::Index k = 0; k < c; ++k) m(i, k) = j.at(i).at(k).get<double>();
    }
    return m;
}

inline nlohmann::json to_json(const ContractionMetric& m) {
    nlohmann::json j;
    j["m_lower"] = m.lower_bound();
    j["m_upper"] = m.upper_bound();
    j["lambda"] = m.rate();
    if (m.is_constant()) {
        j["parameterization"] = "constant";
        j["matrix"] = matrix_to_json(m.constant_matrix());
    } else {
        j["parameterization"] = "polynomial";
        nlohmann::json terms = nlohmann::json::array();
        for (const auto& t : m.terms())
            terms.push_back({{"exponents", t.exponents}, {"coefficient", matrix_to_json(t.coefficient)}});
        j["coefficients"] = std::move(terms);
    }
    return j;
}

inline ContractionMetric metric_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("parameterization").get<std::string>();
    const double rate = j.at("lambda").get<double>();
    if (kind == "constant") {
        ContractionMetric m = ContractionMetric::constant(matrix_from_json(j.at("matrix")), rate);
        return m;
    }
    if (kind == "polynomial") {
        std::vector<PolynomialTerm> terms;
        for (const auto& t : j.at("coefficients"))
            terms.push_back({t.at("exponents").get<std::vector<int>>(), matrix_from_json(t.at("coefficient"))});
        return ContractionMetric::polynomial(std::move(terms), j.at("m_lower").get<double>(),
                                             j.at("m_upper").get<double>(), rate);
    }
    throw Error("unknown metric parameterization '" + kind + "'");
}

inline nlohmann::json to_json(const VerificationReport& r) {
    auto summary = [](const ConditionSummary& s) {
        return nlohmann::json{{"worst_margin", std::isfinite(s.worst_margin) ? nlohmann::json(s.worst_margin)
                                                                             : nlohmann::json(nullptr)},
                              {"worst_index", s.worst_index},
                              {"violations", s.violations.size()},
                              {"passed", s.passed()}};
    };
    return {{"points", r.points},
            {"lambda", r.rate},
            {"bounds", summary(r.bounds)},
            {"killing", summary(r.killing)},
            {"contraction", summary(r.contraction)},
            {"passed", r.passed()}};
}

}  // namespace cct
