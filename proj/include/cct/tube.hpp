#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cct/conformal.hpp"
#include "cct/control.hpp"
#include "cct/core.hpp"
#include "cct/metric.hpp"
#include "cct/random.hpp"
#include "cct/systems.hpp"

namespace cct {

// ---------------------------------------------------------------------------
// Exponential envelope
// ---------------------------------------------------------------------------

struct IEBEnvelope {
    double d0 = 0.0;
    double lambda = 1.0;
    double c2 = 0.0;  // sqrt(m_upper) * s / lambda

    double c1() const { return std::abs(d0 - c2); }
};

inline double tube_radius(const ContractionMetric& metric, double quantile) {
    if (!(metric.rate() > 0.0)) throw Error("tube radius needs a positive contraction rate");
    if (std::isinf(quantile)) return kInf;
    return std::sqrt(metric.upper_bound()) * quantile / metric.rate();
}

inline IEBEnvelope make_envelope(double d0, const ContractionMetric& metric, double quantile) {
    return IEBEnvelope{d0, metric.rate(), tube_radius(metric, quantile)};
}

inline double envelope_at(const IEBEnvelope& e, double t) {
    return (e.d0 - e.c2) * std::exp(-e.lambda * t) + e.c2;
}

// ---------------------------------------------------------------------------
// PRCI tube
// ---------------------------------------------------------------------------

struct PRCITube {
    TrajectoryRecord reference;
    ContractionMetric metric;
    double radius = 0.0;
    double alpha = 0.05;
    std::string quantile_source;

    Vector center(double t) const { return reference.state_at(t); }
};

inline PRCITube make_tube(TrajectoryRecord reference, const ContractionMetric& metric, const CalibrationResult& cal,
                          std::string source = "") {
    PRCITube tube;
    tube.reference = std::move(reference);
    tube.metric = metric;
    tube.radius = tube_radius(metric, cal.quantile_value);
    tube.alpha = cal.alpha;
    tube.quantile_source = std::move(source);
    return tube;
}

struct Membership {
    bool contained = false;
    double margin = 0.0;
    double distance = 0.0;
};

inline Membership tube_contains(const PRCITube& tube, const Vector& x, double t, const GeodesicOptions& geo = {}) {
    Membership m;
    m.distance = riemannian_distance(tube.metric, tube.center(t), x, geo).distance;
    m.margin = tube.radius - m.distance;
    m.contained = m.distance <= tube.radius;
    return m;
}

struct RolloutContainment {
    bool contained = true;
    double sup_distance = 0.0;
    std::vector<double> distances;  // per grid point
};

inline RolloutContainment rollout_containment(const PRCITube& tube, const TrajectoryRecord& rollout,
                                              const GeodesicOptions& geo = {}) {
    RolloutContainment r;
    r.distances.reserve(rollout.size());
    for (std::size_t k = 0; k < rollout.size(); ++k) {
        const double d = riemannian_distance(tube.metric, tube.center(rollout.times[k]), rollout.states[k], geo).distance;
        r.distances.push_back(d);
        r.sup_distance = std::max(r.sup_distance, d);
        if (d > tube.radius) r.contained = false;
    }
    return r;
}

struct ContainmentReport {
    std::size_t n = 0;
    std::size_t contained = 0;
    double alpha = 0.0;
    double quantile = 0.0;
    double radius = 0.0;
    std::vector<double> sup_distances;

    double fraction() const { return n == 0 ? 0.0 : static_cast<double>(contained) / static_cast<double>(n); }
};

/// Whole-trajectory containment: a rollout counts only if every grid point lies in its tube.
inline ContainmentReport containment_experiment(const std::vector<PRCITube>& tubes,
                                                const std::vector<TrajectoryRecord>& rollouts, double quantile,
                                                const GeodesicOptions& geo = {}) {
    if (tubes.size() != rollouts.size()) throw DimensionMismatch("containment_experiment: one tube per rollout");
    ContainmentReport rep;
    rep.n = rollouts.size();
    rep.quantile = quantile;
    if (!tubes.empty()) {
        rep.alpha = tubes.front().alpha;
        rep.radius = tubes.front().radius;
    }
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const auto r = rollout_containment(tubes[i], rollouts[i], geo);
        rep.sup_distances.push_back(r.sup_distance);
        if (r.contained) ++rep.contained;
    }
    return rep;
}

inline nlohmann::json to_json(const ContainmentReport& r) {
    nlohmann::json j;
    j["N"] = r.n;
    j["contained"] = r.contained;
    j["fraction"] = r.fraction();
    j["alpha"] = r.alpha;
    j["quantile"] = r.quantile;
    j["radius"] = r.radius;
    return j;
}

// ---------------------------------------------------------------------------
// Constraint tightening
// ---------------------------------------------------------------------------

struct TightenedBox {
    Box box;
    bool empty = false;
    std::vector<double> margins;
};

inline TightenedBox shrink_box(const Box& box, const std::vector<double>& margins) {
    TightenedBox out;
    out.margins = margins;
    out.box = box;
    for (std::size_t i = 0; i < box.dim(); ++i) {
        out.box.axes[i].lo += margins[i];
        out.box.axes[i].hi -= margins[i];
        if (out.box.axes[i].empty()) out.empty = true;
    }
    return out;
}

/// Per-axis excursion of the metric ball of radius `radius`: exact for a constant metric
/// (radius * sqrt((M^-1)_ii)), the Euclidean outer bound radius / sqrt(m_lower) otherwise.
inline std::vector<double> metric_ball_extent(const ContractionMetric& metric, double radius) {
    std::vector<double> out(static_cast<std::size_t>(metric.dim()));
    if (metric.is_constant()) {
        const Matrix inv = metric.constant_matrix().inverse();
        for (Eigen::Index i = 0; i < metric.dim(); ++i) out[static_cast<std::size_t>(i)] = radius * std::sqrt(inv(i, i));
    } else {
        for (auto& v : out) v = radius / std::sqrt(metric.lower_bound());
    }
    return out;
}

inline TightenedBox tighten_state_box(const Box& state_box, double radius, const ContractionMetric& metric) {
    if (!std::isfinite(radius)) throw Error("tighten_state_box: radius must be finite");
    if (state_box.dim() != static_cast<std::size_t>(metric.dim()))
        throw DimensionMismatch("tighten_state_box: box and metric dimensions differ");
    return shrink_box(state_box, metric_ball_extent(metric, radius));
}

/// Sample of the metric ball {xi : (xi - c)^T M(c) (xi - c) <= r^2}; index 0 is the center and
/// later indices are uniform in the ellipsoid. The sequence depends only on (rng stream, index).
inline Vector metric_ball_sample(const Matrix& m_center, const Vector& c, double r, CounterRng& rng, std::size_t index) {
    if (index == 0) return c;
    const Eigen::LLT<Matrix> llt(m_center);
    const Vector v = rng.unit_ball(c.size());
    return c + r * llt.matrixU().solve(v);
}

/// Monte-Carlo estimate of the input margin needed so that ubar + kappa(xi, xbar) stays in the
/// input box for xi in the tube cross-sections around `anchors` (xbar, ubar). The sampled sup is
/// inflated by `inflation` and `extra` (e.g. the observed compensation magnitude) is added per axis.
/// This is an inner approximation of the exact tightened set, not a bound.
inline TightenedBox tighten_input_box(const Box& input_box, const std::vector<std::pair<Vector, Vector>>& anchors,
                                      double radius, const ContractionMetric& metric, const DynamicalSystem& nominal,
                                      std::size_t budget, std::uint64_t seed = 1, const std::vector<double>& extra = {},
                                      double inflation = 0.1, const GeodesicOptions& geo = {}) {
    std::vector<double> sup(input_box.dim(), 0.0);
    if (std::isfinite(radius) && radius > 0.0) {
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            const auto& [xbar, ubar] = anchors[a];
            const Matrix mc = metric.evaluate(xbar);
            CounterRng rng = CounterRng::stream(seed, "input-tightening", a);
            for (std::size_t s = 0; s < budget; ++s) {
                const Vector xi = metric_ball_sample(mc, xbar, radius, rng, s);
                const Vector kappa = min_norm_feedback(metric, nominal, xi, xbar, ubar, geo);
                for (std::size_t i = 0; i < sup.size(); ++i)
                    sup[i] = std::max(sup[i], std::abs(kappa[static_cast<Eigen::Index>(i)]));
            }
        }
    } else if (!std::isfinite(radius)) {
        throw Error("tighten_input_box: radius must be finite");
    }
    std::vector<double> margins(sup.size());
    for (std::size_t i = 0; i < sup.size(); ++i)
        margins[i] = (1.0 + inflation) * sup[i] + (i < extra.size() ? extra[i] : 0.0);
    return shrink_box(input_box, margins);
}

/// Anchors (xbar_k, ubar_k) from every `stride`-th grid point of a reference.
inline std::vector<std::pair<Vector, Vector>> reference_anchors(const TrajectoryRecord& ref, std::size_t stride = 1) {
    std::vector<std::pair<Vector, Vector>> out;
    for (std::size_t k = 0; k < ref.size(); k += std::max<std::size_t>(stride, 1))
        out.emplace_back(ref.states[k], ref.inputs[k]);
    return out;
}

// ---------------------------------------------------------------------------
// 2D projections
// ---------------------------------------------------------------------------

/// Shape matrix S of the projection of {xi : xi^T M xi <= r^2} onto coordinates (i, j), i.e. the
/// projection is {p : p^T S p <= r^2} with S = M_pp - M_pc M_cc^-1 M_cp.
inline Eigen::Matrix2d schur_projection(const Matrix& m, Eigen::Index i, Eigen::Index j, double tol = 1e-12) {
    const Eigen::Index n = m.rows();
    if (i == j || i < 0 || j < 0 || i >= n || j >= n) throw DimensionMismatch("schur_projection: bad coordinate pair");
    std::vector<Eigen::Index> rest;
    for (Eigen::Index k = 0; k < n; ++k)
        if (k != i && k != j) rest.push_back(k);
    Eigen::Matrix2d mpp;
    mpp << m(i, i), m(i, j), m(j, i), m(j, j);
    if (rest.empty()) return mpp;
    const auto c = static_cast<Eigen::Index>(rest.size());
    Matrix mcc(c, c), mpc(2, c);
    for (Eigen::Index a = 0; a < c; ++a) {
        mpc(0, a) = m(i, rest[static_cast<std::size_t>(a)]);
        mpc(1, a) = m(j, rest[static_cast<std::size_t>(a)]);
        for (Eigen::Index b = 0; b < c; ++b) mcc(a, b) = m(rest[static_cast<std::size_t>(a)], rest[static_cast<std::size_t>(b)]);
    }
    const Vector ev = sym_eigenvalues(mcc);
    if (!(ev.minCoeff() > tol * std::max(1.0, ev.maxCoeff())))
        throw SingularBlock("schur_projection: complementary block is singular");
    const Matrix s = mpp - mpc * mcc.ldlt().solve(mpc.transpose());
    Eigen::Matrix2d out = s;
    return 0.5 * (out + out.transpose());
}

struct Ellipse2D {
    double t = 0.0;
    Eigen::Vector2d center;
    Eigen::Matrix2d shape;  // {p : (p - center)^T shape (p - center) <= radius^2}
    double radius = 0.0;

    bool contains(const Eigen::Vector2d& p, double tol = 0.0) const {
        const Eigen::Vector2d d = p - center;
        return d.dot(shape * d) <= radius * radius * (1.0 + tol);
    }
    /// Largest distance from the center to the boundary.
    double max_extent() const {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(shape);
        return radius / std::sqrt(es.eigenvalues().minCoeff());
    }
};

/// Cross-sections with M frozen at each reference grid point, projected onto (i, j).
inline std::vector<Ellipse2D> project_tube_2d(const PRCITube& tube, Eigen::Index i, Eigen::Index j) {
    std::vector<Ellipse2D> out;
    out.reserve(tube.reference.size());
    for (std::size_t k = 0; k < tube.reference.size(); ++k) {
        const Vector& c = tube.reference.states[k];
        Ellipse2D e;
        e.t = tube.reference.times[k];
        e.center = Eigen::Vector2d(c[i], c[j]);
        e.shape = schur_projection(tube.metric.evaluate(c), i, j);
        e.radius = tube.radius;
        out.push_back(e);
    }
    return out;
}

inline void write_ellipse_csv(std::ostream& os, const std::vector<Ellipse2D>& es) {
    os << "t,center_i,center_j,a11,a12,a22,radius\n";
    os << std::setprecision(17);
    for (const auto& e : es)
        os << e.t << ',' << e.center[0] << ',' << e.center[1] << ',' << e.shape(0, 0) << ',' << e.shape(0, 1) << ','
           << e.shape(1, 1) << ',' << e.radius << '\n';
}

}  // namespace cct
