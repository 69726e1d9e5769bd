#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "cct/conformal.hpp"
#include "cct/core.hpp"
#include "cct/planner.hpp"
#include "cct/predictor.hpp"
#include "cct/systems.hpp"

namespace cct {

/// Two-step tightened planning scenario, also the source of plan references.
struct PlanningConfig {
    bool enabled = false;  // run the two-step tightened planning stage
    double horizon_s = 3.0;
    Box start_box;           // start states are drawn here
    Vector goal;             // goal center; goals are goal + a draw from goal_offset
    Box goal_offset;
    std::optional<Box> state_box;  // original admissible states, default the system's
    std::optional<Box> input_box;  // original admissible inputs, default the system's
    std::vector<EllipseObstacle> obstacles;
    double w1 = 1.0, w2 = 1.0, goal_weight = 10.0, barrier_weight = 1e-2;
    std::size_t knot_stride = 10;
    int max_iterations = 200;
    std::optional<Vector> initial_input;
    bool compensation_aware = true;  // constrain the compensated input along the reference

    // Two-step calibration: first-subset references from a local sampler around the scenario.
    std::size_t n_cal = 50;
    double split_fraction = 0.5;
    Box first_initial_box;
    Box first_input_box;
    std::size_t n_test = 100;
    std::size_t input_samples = 20;  // metric-ball samples per anchor
    std::size_t anchor_stride = 25;
    double inflation = 0.1;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::string benchmark = "threeD";  // threeD | vtol
    std::uint64_t seed = 1;
    std::size_t workers = 0;  // 0: hardware concurrency
    std::size_t n_train = 100, n_cal = 50, n_test = 100;
    double horizon_s = 5.0;
    double dt_s = 0.01;
    double alpha = 0.05;

    // metric
    std::string metric_source = "synthesize";  // synthesize | path to a metric JSON
    Interval rate_range{0.1, 3.0};
    std::vector<int> metric_grid;            // points per axis, default 5 on every axis
    std::optional<Box> metric_box;           // synthesis/verification box, default the state box
    int synthesis_phase1_iterations = 400;
    int synthesis_bisection_steps = 10;
    int synthesis_scan_points = 8;

    // references
    std::string reference_source = "sampler";  // sampler | plan
    std::optional<Box> reference_initial_box;   // default the state box
    std::optional<Box> reference_input_box;     // default the input box
    double knot_spacing_s = 1.0;
    bool require_in_state_box = true;
    // training references may use their own sampler (e.g. near hover for the VTOL)
    std::optional<Box> train_initial_box;
    std::optional<Box> train_input_box;
    std::optional<bool> train_require_in_state_box;

    TrainingConfig training;

    // closed loop
    bool saturate = false;
    int geodesic_segments = 16;
    std::string initial_state = "center";  // center | ball | offset
    std::optional<Box> initial_offset;     // for "offset": x(0) = xbar(0) + draw

    // evaluation
    bool evaluate = true;
    double envelope_slack = 0.05;
    std::vector<int> ellipse_plane = {0, 1};

    PlanningConfig planning;

    nlohmann::json source;  // the parsed file, echoed into reports
};

namespace detail {

inline std::string where(const std::string& key) { return "config key '" + key + "'"; }

inline const toml::node* find(const toml::table& t, const std::string& key) {
    return t.at_path(key).node();
}

template <class T>
T get_or(const toml::table& t, const std::string& key, T fallback) {
    const toml::node* n = find(t, key);
    if (!n) return fallback;
    if constexpr (std::is_same_v<T, double>) {
        if (auto v = n->value<double>()) return *v;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (auto v = n->value<bool>()) return *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (auto v = n->value<std::string>()) return *v;
    } else {
        if (auto v = n->value<std::int64_t>()) {
            if (*v < 0) throw ConfigError(where(key) + " must be non-negative");
            return static_cast<T>(*v);
        }
    }
    throw ConfigError(where(key) + " has the wrong type");
}

inline std::vector<double> number_array(const toml::node& n, const std::string& key) {
    const auto* arr = n.as_array();
    if (!arr) throw ConfigError(where(key) + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : *arr) {
        auto v = e.value<double>();
        if (!v) throw ConfigError(where(key) + " must contain only numbers");
        out.push_back(*v);
    }
    return out;
}

inline std::optional<Vector> vector_at(const toml::table& t, const std::string& key) {
    const toml::node* n = find(t, key);
    if (!n) return std::nullopt;
    return from_std(number_array(*n, key));
}

/// Boxes are arrays of [lo, hi] pairs.
inline std::optional<Box> box_at(const toml::table& t, const std::string& key) {
    const toml::node* n = find(t, key);
    if (!n) return std::nullopt;
    const auto* arr = n->as_array();
    if (!arr) throw ConfigError(where(key) + " must be an array of [lo, hi] pairs");
    std::vector<Interval> axes;
    for (const auto& e : *arr) {
        const auto pair = number_array(e, key);
        if (pair.size() != 2 || pair[0] > pair[1]) throw ConfigError(where(key) + " needs [lo, hi] with lo <= hi");
        axes.push_back({pair[0], pair[1]});
    }
    return Box(axes);
}

inline nlohmann::json to_json(const toml::node& n) {
    if (const auto* t = n.as_table()) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : *t) j[std::string(k.str())] = to_json(v);
        return j;
    }
    if (const auto* a = n.as_array()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& v : *a) j.push_back(to_json(v));
        return j;
    }
    if (auto v = n.value_exact<std::int64_t>()) return *v;
    if (auto v = n.value_exact<double>()) return *v;
    if (auto v = n.value_exact<bool>()) return *v;
    if (auto v = n.value_exact<std::string>()) return *v;
    return nullptr;
}

}  // namespace detail

/// Reads a TOML-style config. Unknown top-level sections are rejected so that typos surface.
inline ExperimentConfig parse_config(std::string_view text, const std::string& origin = "config") {
    toml::table t;
    try {
        t = toml::parse(text, origin);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << origin << ": " << e.description() << " (line " << e.source().begin.line << ")";
        throw ConfigError(os.str());
    }
    static const std::vector<std::string> known = {"name", "benchmark", "seed", "workers", "n_train", "n_cal",
                                                   "n_test", "horizon_s", "dt_s", "alpha", "metric", "references",
                                                   "predictor", "policy", "evaluation", "planning"};
    for (const auto& [k, v] : t)
        if (std::find(known.begin(), known.end(), std::string(k.str())) == known.end())
            throw ConfigError("unknown config key '" + std::string(k.str()) + "'");

    using detail::box_at;
    using detail::get_or;
    ExperimentConfig c;
    c.name = get_or<std::string>(t, "name", c.name);
    c.benchmark = get_or<std::string>(t, "benchmark", c.benchmark);
    if (c.benchmark != "threeD" && c.benchmark != "vtol") throw ConfigError("benchmark must be threeD or vtol");
    c.seed = get_or<std::uint64_t>(t, "seed", c.seed);
    c.workers = get_or<std::size_t>(t, "workers", c.workers);
    c.n_train = get_or<std::size_t>(t, "n_train", c.n_train);
    c.n_cal = get_or<std::size_t>(t, "n_cal", c.n_cal);
    c.n_test = get_or<std::size_t>(t, "n_test", c.n_test);
    c.horizon_s = get_or<double>(t, "horizon_s", c.horizon_s);
    c.dt_s = get_or<double>(t, "dt_s", c.dt_s);
    c.alpha = get_or<double>(t, "alpha", c.alpha);
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw InvalidAlpha("alpha must lie in (0, 1)");
    if (!(c.dt_s > 0.0) || !(c.horizon_s >= c.dt_s)) throw ConfigError("need 0 < dt_s <= horizon_s");

    c.metric_source = get_or<std::string>(t, "metric.source", c.metric_source);
    c.rate_range.lo = get_or<double>(t, "metric.rate_min_per_s", c.rate_range.lo);
    c.rate_range.hi = get_or<double>(t, "metric.rate_max_per_s", c.rate_range.hi);
    if (const auto* n = detail::find(t, "metric.grid_per_axis")) {
        if (auto v = n->value<std::int64_t>()) c.metric_grid = {static_cast<int>(*v)};
        else
            for (double d : detail::number_array(*n, "metric.grid_per_axis")) c.metric_grid.push_back(static_cast<int>(d));
    }
    c.metric_box = box_at(t, "metric.box");
    c.synthesis_phase1_iterations = get_or<int>(t, "metric.phase1_iterations", c.synthesis_phase1_iterations);
    c.synthesis_bisection_steps = get_or<int>(t, "metric.bisection_steps", c.synthesis_bisection_steps);
    c.synthesis_scan_points = get_or<int>(t, "metric.scan_points", c.synthesis_scan_points);

    c.reference_source = get_or<std::string>(t, "references.source", c.reference_source);
    if (c.reference_source != "sampler" && c.reference_source != "plan")
        throw ConfigError("references.source must be sampler or plan");
    c.reference_initial_box = box_at(t, "references.initial_box");
    c.reference_input_box = box_at(t, "references.input_box");
    c.knot_spacing_s = get_or<double>(t, "references.knot_spacing_s", c.knot_spacing_s);
    c.require_in_state_box = get_or<bool>(t, "references.require_in_state_box", c.require_in_state_box);
    c.train_initial_box = box_at(t, "references.train_initial_box");
    c.train_input_box = box_at(t, "references.train_input_box");
    if (detail::find(t, "references.train_require_in_state_box"))
        c.train_require_in_state_box = get_or<bool>(t, "references.train_require_in_state_box", true);

    auto& tr = c.training;
    tr.family = predictor_family_from_string(get_or<std::string>(t, "predictor.family", to_string(tr.family)));
    tr.degree = get_or<int>(t, "predictor.degree", tr.degree);
    tr.ridge = get_or<double>(t, "predictor.ridge", tr.ridge);
    if (const auto* n = detail::find(t, "predictor.hidden")) {
        tr.hidden.clear();
        for (double d : detail::number_array(*n, "predictor.hidden")) tr.hidden.push_back(static_cast<int>(d));
    }
    tr.epochs = get_or<int>(t, "predictor.epochs", tr.epochs);
    tr.learning_rate = get_or<double>(t, "predictor.learning_rate", tr.learning_rate);
    tr.temperature = get_or<double>(t, "predictor.temperature", tr.temperature);
    tr.stride = get_or<std::size_t>(t, "predictor.sample_stride", tr.stride);

    c.saturate = get_or<bool>(t, "policy.saturate", c.saturate);
    c.geodesic_segments = get_or<int>(t, "policy.geodesic_segments", c.geodesic_segments);
    c.initial_state = get_or<std::string>(t, "policy.initial_state", c.initial_state);
    if (c.initial_state != "center" && c.initial_state != "ball" && c.initial_state != "offset")
        throw ConfigError("policy.initial_state must be center, ball or offset");
    c.initial_offset = box_at(t, "policy.initial_offset");
    if (c.initial_state == "offset" && !c.initial_offset) throw ConfigError("policy.initial_offset is required");

    c.evaluate = get_or<bool>(t, "evaluation.enabled", c.evaluate);
    c.envelope_slack = get_or<double>(t, "evaluation.envelope_slack", c.envelope_slack);
    if (const auto* n = detail::find(t, "evaluation.ellipse_plane")) {
        c.ellipse_plane.clear();
        for (double d : detail::number_array(*n, "evaluation.ellipse_plane")) c.ellipse_plane.push_back(static_cast<int>(d));
        if (c.ellipse_plane.size() != 2) throw ConfigError("evaluation.ellipse_plane needs two indices");
    }

    auto& p = c.planning;
    p.enabled = get_or<bool>(t, "planning.enabled", p.enabled);
    p.horizon_s = get_or<double>(t, "planning.horizon_s", p.horizon_s);
    if (auto b = box_at(t, "planning.start_box")) p.start_box = *b;
    if (auto g = detail::vector_at(t, "planning.goal")) p.goal = *g;
    if (auto b = box_at(t, "planning.goal_offset")) p.goal_offset = *b;
    p.state_box = box_at(t, "planning.state_box");
    p.input_box = box_at(t, "planning.input_box");
    if (const auto* n = detail::find(t, "planning.obstacles")) {
        const auto* arr = n->as_array();
        if (!arr) throw ConfigError("planning.obstacles must be an array");
        for (const auto& e : *arr) {
            const auto v = detail::number_array(e, "planning.obstacles");
            if (v.size() != 6) throw ConfigError("planning.obstacles entries are [i, j, cx, cy, a, b]");
            p.obstacles.push_back(EllipseObstacle::axis_aligned(static_cast<Eigen::Index>(v[0]), static_cast<Eigen::Index>(v[1]),
                                                                Eigen::Vector2d(v[2], v[3]), v[4], v[5]));
        }
    }
    p.w1 = get_or<double>(t, "planning.w1", p.w1);
    p.w2 = get_or<double>(t, "planning.w2", p.w2);
    p.goal_weight = get_or<double>(t, "planning.goal_weight", p.goal_weight);
    p.barrier_weight = get_or<double>(t, "planning.barrier_weight", p.barrier_weight);
    p.knot_stride = get_or<std::size_t>(t, "planning.knot_stride", p.knot_stride);
    p.max_iterations = get_or<int>(t, "planning.max_iterations", p.max_iterations);
    p.initial_input = detail::vector_at(t, "planning.initial_input");
    p.compensation_aware = get_or<bool>(t, "planning.compensation_aware", p.compensation_aware);
    p.n_cal = get_or<std::size_t>(t, "planning.n_cal", p.n_cal);
    p.split_fraction = get_or<double>(t, "planning.split_fraction", p.split_fraction);
    if (auto b = box_at(t, "planning.first_initial_box")) p.first_initial_box = *b;
    if (auto b = box_at(t, "planning.first_input_box")) p.first_input_box = *b;
    p.n_test = get_or<std::size_t>(t, "planning.n_test", p.n_test);
    p.input_samples = get_or<std::size_t>(t, "planning.input_samples", p.input_samples);
    p.anchor_stride = get_or<std::size_t>(t, "planning.anchor_stride", p.anchor_stride);
    p.inflation = get_or<double>(t, "planning.inflation", p.inflation);
    if (p.enabled || c.reference_source == "plan") {
        if (p.start_box.dim() == 0 || p.goal.size() == 0) throw ConfigError("planning needs start_box and goal");
        if (p.goal_offset.dim() == 0) p.goal_offset = Box::uniform(static_cast<std::size_t>(p.goal.size()), 0.0, 0.0);
    }
    if (p.enabled) {
        two_step_split(p.n_cal, p.split_fraction);  // validates the fraction
        if (p.first_initial_box.dim() == 0) p.first_initial_box = p.start_box;
        if (p.first_input_box.dim() == 0) throw ConfigError("planning.first_input_box is required");
    }

    c.source = detail::to_json(t);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.string());
}

}  // namespace cct
