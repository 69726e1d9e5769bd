#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cct/core.hpp"
#include "cct/metric.hpp"
#include "cct/predictor.hpp"
#include "cct/systems.hpp"

namespace cct {

/// Single contraction inequality a^T kappa >= b along the geodesic from xbar (mu = 0) to x (mu = 1).
struct ContractionConstraint {
    Vector a;
    double b = 0.0;
    double energy = 0.0;
    bool geodesic_converged = true;

    bool satisfied(const Vector& kappa, double tol = 0.0) const { return a.dot(kappa) >= b - tol; }
};

inline ContractionConstraint contraction_constraint(const ContractionMetric& metric, const DynamicalSystem& sys,
                                                    const Vector& x, const Vector& xbar, const Vector& ubar,
                                                    const GeodesicOptions& geo = {}) {
    const DistanceResult d = riemannian_distance(metric, xbar, x, geo);
    const Geodesic& g = d.geodesic;
    ContractionConstraint c;
    c.energy = g.energy;
    c.geodesic_converged = g.converged;
    const Vector g1 = g.tangent_end();
    const Vector g0 = g.tangent_start();
    const Matrix mx = metric.evaluate(x);
    const Matrix mxb = metric.evaluate(xbar);
    const Matrix bx = sys.actuation(x);
    const Vector m1 = mx * g1;
    c.a = -bx.transpose() * m1;
    c.b = metric.rate() * g.energy + m1.dot(sys.drift(x) + bx * ubar) -
          g0.dot(mxb * (sys.drift(xbar) + sys.actuation(xbar) * ubar));
    return c;
}

/// Closed-form projection of the origin onto the halfspace a^T kappa >= b.
inline Vector min_norm_solution(const ContractionConstraint& c) {
    if (c.b <= 0.0) return Vector::Zero(c.a.size());
    const double an = c.a.norm();
    if (an < 1e-10) {
        // Coincident endpoints leave nothing to correct; anything else is a real loss of control authority.
        if (c.energy < 1e-20) return Vector::Zero(c.a.size());
        throw DegenerateConstraint("contraction constraint violated with |a| = " + std::to_string(an));
    }
    return (c.b / (an * an)) * c.a;
}

inline Vector min_norm_feedback(const ContractionMetric& metric, const DynamicalSystem& sys, const Vector& x,
                                const Vector& xbar, const Vector& ubar, const GeodesicOptions& geo = {}) {
    return min_norm_solution(contraction_constraint(metric, sys, x, xbar, ubar, geo));
}

struct PolicyOptions {
    bool saturate = false;
    GeodesicOptions geodesic;
    double pinv_tolerance = 1e-10;
};

/// Tracking policy u = ubar(t) + kappa(x, xbar(t)) - B(x)^+ zeta_hat(x, u_-). The delayed input u_-
/// is the input computed at the previous grid point (zero on the first interval). One instance
/// drives one rollout at a time.
class ContractingPolicy {
public:
    ContractingPolicy(const DynamicalSystem& nominal, ContractionMetric metric, std::shared_ptr<const Reference> reference,
                      std::shared_ptr<const UncertaintyPredictor> predictor = nullptr, PolicyOptions opt = {})
        : sys_(&nominal),
          metric_(std::move(metric)),
          reference_(std::move(reference)),
          predictor_(std::move(predictor)),
          opt_(std::move(opt)) {
        if (!reference_) throw Error("ContractingPolicy: reference required");
        reset();
    }

    void reset() {
        delayed_ = Vector::Zero(sys_->input_dim);
        last_grid_ = Vector::Zero(sys_->input_dim);
        delayed_history_.clear();
        saturation_events_ = 0;
    }

    const ContractionMetric& metric() const { return metric_; }
    const Reference& reference() const { return *reference_; }
    const DynamicalSystem& nominal() const { return *sys_; }
    const UncertaintyPredictor* predictor() const { return predictor_.get(); }
    const PolicyOptions& options() const { return opt_; }
    double dt() const { return reference_->dt(); }
    const Vector& delayed_input() const { return delayed_; }
    /// u_- that was active on each grid interval so far (index k = interval starting at t_k).
    const std::vector<Vector>& delayed_history() const { return delayed_history_; }
    std::size_t saturation_events() const { return saturation_events_; }

    /// Nominal contracting part ubar + kappa.
    Vector contracting_input(const Vector& x, double t) const {
        const Vector ubar = reference_->input(t);
        return ubar + min_norm_feedback(metric_, *sys_, x, reference_->state(t), ubar, opt_.geodesic);
    }

    /// -B(x)^+ zeta_hat(x, u_delayed), zero without a predictor.
    Vector compensation(const Vector& x, const Vector& u_delayed) const {
        if (!predictor_) return Vector::Zero(sys_->input_dim);
        return -pseudo_inverse(sys_->actuation(x), opt_.pinv_tolerance) * predictor_->predict(x, u_delayed);
    }

    Vector operator()(const Vector& x, double t) {
        Vector u = contracting_input(x, t) + compensation(x, delayed_);
        if (opt_.saturate) {
            const Vector c = sys_->input_box.clamp(u);
            if (c != u) ++saturation_events_;
            u = c;
        }
        return u;
    }

    /// Grid hook used by `integrate`: shifts the delay line, then computes the grid input.
    Vector on_grid(std::size_t k, double t, const Vector& x) {
        delayed_ = k == 0 ? Vector::Zero(sys_->input_dim) : last_grid_;
        delayed_history_.push_back(delayed_);
        last_grid_ = (*this)(x, t);
        return last_grid_;
    }

private:
    const DynamicalSystem* sys_;
    ContractionMetric metric_;
    std::shared_ptr<const Reference> reference_;
    std::shared_ptr<const UncertaintyPredictor> predictor_;
    PolicyOptions opt_;
    Vector delayed_, last_grid_;
    std::vector<Vector> delayed_history_;
    std::size_t saturation_events_ = 0;
};

inline Vector closed_loop_input(ContractingPolicy& policy, const Vector& x, double t) { return policy(x, t); }

/// Runs the closed loop against `sys_true` from x0 over the reference horizon.
inline TrajectoryRecord closed_loop_rollout(const DynamicalSystem& sys_true, ContractingPolicy& policy,
                                            const Vector& x0) {
    policy.reset();
    return integrate(sys_true, x0, policy, policy.reference().horizon(), policy.dt());
}

/// |zeta(x_k, u_k) - B(x_k) B(x_k)^+ zeta_hat(x_k, u_{k-1})| on every grid point of a closed-loop
/// record. `nominal` supplies B; zeta comes from the record when stored, else from sys_true.
inline std::vector<double> residual_norms(const DynamicalSystem& sys_true, const DynamicalSystem& nominal,
                                          const UncertaintyPredictor* predictor, const TrajectoryRecord& rec,
                                          double pinv_tolerance = 1e-10) {
    std::vector<double> out;
    out.reserve(rec.size());
    const Vector zero_u = Vector::Zero(nominal.input_dim);
    for (std::size_t k = 0; k < rec.size(); ++k) {
        const Vector& x = rec.states[k];
        Vector zeta = rec.has_uncertainties() ? rec.uncertainties[k] : sys_true.zeta(x, rec.inputs[k]);
        if (predictor) {
            const Vector& u_prev = k == 0 ? zero_u : rec.inputs[k - 1];
            const Matrix b = nominal.actuation(x);
            zeta -= b * (pseudo_inverse(b, pinv_tolerance) * predictor->predict(x, u_prev));
        }
        out.push_back(zeta.norm());
    }
    return out;
}

inline std::vector<double> residual_trace(const DynamicalSystem& sys_true, const ContractingPolicy& policy,
                                          const TrajectoryRecord& rec) {
    return residual_norms(sys_true, policy.nominal(), policy.predictor(), rec, policy.options().pinv_tolerance);
}

inline nlohmann::json policy_config_json(const ContractingPolicy& p, const std::string& metric_ref) {
    nlohmann::json j;
    j["metric"] = metric_ref;
    j["predictor_id"] = p.predictor() ? p.predictor()->id() : std::string("none");
    j["dt_s"] = p.dt();
    j["saturation"] = p.options().saturate;
    j["geodesic_segments"] = p.options().geodesic.segments;
    return j;
}

}  // namespace cct
