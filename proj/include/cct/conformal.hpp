#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "cct/control.hpp"
#include "cct/core.hpp"
#include "cct/predictor.hpp"

namespace cct {

struct CalibrationResult {
    std::vector<double> scores;  // ascending
    double alpha = 0.05;
    std::size_t quantile_index = 0;  // 1-based j_alpha
    double quantile_value = kInf;
    std::string predictor_id;
    std::string dataset_hash;

    std::size_t size() const { return scores.size(); }
    /// True when j_alpha exceeds the number of scores and the quantile is +inf.
    bool unbounded() const { return quantile_index > scores.size(); }
};

/// j_alpha = ceil((1 - alpha)(n + 1)). The product is snapped to the nearest integer when it lies
/// within rounding distance of one, so 0.9 * 10 gives 9 rather than 10.
inline std::size_t conformal_index(std::size_t n, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidAlpha("alpha must lie in (0, 1), got " + std::to_string(alpha));
    const double v = (1.0 - alpha) * static_cast<double>(n + 1);
    const double r = std::round(v);
    const double snapped = std::abs(v - r) <= 1e-9 * std::max(1.0, v) ? r : v;
    return static_cast<std::size_t>(std::ceil(snapped));
}

inline CalibrationResult calibrate(std::vector<double> scores, double alpha) {
    if (scores.empty()) throw InsufficientCalibrationData("calibrate: no scores");
    CalibrationResult c;
    c.alpha = alpha;
    c.quantile_index = conformal_index(scores.size(), alpha);
    std::stable_sort(scores.begin(), scores.end());
    c.scores = std::move(scores);
    c.quantile_value = c.unbounded() ? kInf : c.scores[c.quantile_index - 1];
    return c;
}

inline double empirical_coverage(const std::vector<double>& test_scores, double quantile_value) {
    if (test_scores.empty()) return 0.0;
    const auto hit = std::count_if(test_scores.begin(), test_scores.end(),
                                   [&](double s) { return s <= quantile_value; });
    return static_cast<double>(hit) / static_cast<double>(test_scores.size());
}

/// Sup over the grid of the residual |zeta - B B^+ zeta_hat(x, u_-)| on a closed-loop record.
inline double nonconformity_score(const TrajectoryRecord& rec, const UncertaintyPredictor* predictor,
                                  const DynamicalSystem& sys_true, const DynamicalSystem& nominal) {
    const auto r = residual_norms(sys_true, nominal, predictor, rec);
    return r.empty() ? 0.0 : *std::max_element(r.begin(), r.end());
}

struct TwoStepCalibration {
    CalibrationResult tube;      // sizes the radius handed to the planner
    CalibrationResult tracking;  // recalibrated on the second subset
    std::size_t first_size = 0;
};

/// Number of records that go to the first subset.
inline std::size_t two_step_split(std::size_t n, double split_fraction) {
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
        throw ConfigError("split fraction must lie in (0, 1)");
    return static_cast<std::size_t>(std::floor(split_fraction * static_cast<double>(n)));
}

/// Splits scores in their given order: the first subset calibrates the planning tube, the second
/// the tracking tube. In the full protocol the second subset's scores come from rollouts around
/// references planned with the first tube; callers supply them in that order.
inline TwoStepCalibration two_step_calibrate(const std::vector<double>& scores, double alpha,
                                             double split_fraction = 0.5) {
    const std::size_t n1 = two_step_split(scores.size(), split_fraction);
    if (n1 == 0 || n1 == scores.size())
        throw InsufficientCalibrationData("two-step calibration needs at least one record in each subset");
    TwoStepCalibration out;
    out.first_size = n1;
    out.tube = calibrate(std::vector<double>(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(n1)), alpha);
    out.tracking = calibrate(std::vector<double>(scores.begin() + static_cast<std::ptrdiff_t>(n1), scores.end()), alpha);
    return out;
}

inline TwoStepCalibration two_step_calibrate(const TrainingDataset& cal, const UncertaintyPredictor* predictor,
                                             const DynamicalSystem& sys_true, const DynamicalSystem& nominal,
                                             double alpha, double split_fraction = 0.5) {
    if (cal.split != SplitTag::cal) throw Error("two_step_calibrate: dataset split must be 'cal'");
    std::vector<double> scores;
    for (const auto& r : cal.records) scores.push_back(nonconformity_score(r.trajectory, predictor, sys_true, nominal));
    auto out = two_step_calibrate(scores, alpha, split_fraction);
    if (predictor) out.tube.predictor_id = out.tracking.predictor_id = predictor->id();
    return out;
}

inline nlohmann::json to_json(const CalibrationResult& c) {
    nlohmann::json j;
    j["n"] = c.scores.size();
    j["alpha"] = c.alpha;
    j["quantile_index"] = c.quantile_index;
    j["unbounded"] = c.unbounded();
    j["quantile_value"] = c.unbounded() ? nlohmann::json("inf") : nlohmann::json(c.quantile_value);
    j["scores"] = c.scores;
    j["predictor_id"] = c.predictor_id;
    j["dataset_hash"] = c.dataset_hash;
    return j;
}

inline CalibrationResult calibration_from_json(const nlohmann::json& j) {
    CalibrationResult c;
    c.scores = j.at("scores").get<std::vector<double>>();
    c.alpha = j.at("alpha").get<double>();
    c.quantile_index = j.at("quantile_index").get<std::size_t>();
    c.quantile_value = c.unbounded() ? kInf : c.scores[c.quantile_index - 1];
    c.predictor_id = j.value("predictor_id", "");
    c.dataset_hash = j.value("dataset_hash", "");
    return c;
}

inline std::string calibration_summary(const CalibrationResult& c) {
    std::ostringstream os;
    os << "N2=" << c.scores.size() << " alpha=" << c.alpha << " j_alpha=" << c.quantile_index << " quantile=";
    if (c.unbounded())
        os << "inf (unbounded: j_alpha > N2)";
    else
        os << std::setprecision(10) << c.quantile_value;
    return os.str();
}

}  // namespace cct
