#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cct/config.hpp"
#include "cct/conformal.hpp"
#include "cct/control.hpp"
#include "cct/dataset.hpp"
#include "cct/io.hpp"
#include "cct/metric.hpp"
#include "cct/planner.hpp"
#include "cct/predictor.hpp"
#include "cct/systems.hpp"
#include "cct/tube.hpp"

namespace cct {

/// Stages in execution order. Requesting a stage runs (or loads) everything before it.
enum class Stage { metric, references, train_data, predictor, calibration, tube, evaluation, planning, report };

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::metric: return "metric";
        case Stage::references: return "references";
        case Stage::train_data: return "train_data";
        case Stage::predictor: return "predictor";
        case Stage::calibration: return "calibration";
        case Stage::tube: return "tube";
        case Stage::evaluation: return "evaluation";
        case Stage::planning: return "planning";
        case Stage::report: return "report";
    }
    return "?";
}

class StageError : public Error {
public:
    StageError(Stage s, const std::string& what) : Error("stage '" + to_string(s) + "' failed: " + what), stage(s) {}
    Stage stage;
};

struct Benchmark {
    DynamicalSystem nominal;
    DynamicalSystem truth;
};

inline Benchmark make_benchmark(const std::string& id) {
    if (id == "threeD") {
        auto p = make_benchmark_3d();
        return {std::move(p.nominal), std::move(p.perturbed)};
    }
    if (id == "vtol") {
        auto v = make_benchmark_vtol();
        auto nom = v.nominal();
        return {std::move(nom), std::move(v)};
    }
    throw ConfigError("unknown benchmark '" + id + "'");
}

struct ReferenceSets {
    std::vector<ReferenceSample> train, cal, test;
};

/// Everything the stages produce; filled lazily by Pipeline.
struct PipelineState {
    std::optional<ContractionMetric> metric;
    std::optional<ReferenceSets> references;
    std::optional<TrainingDataset> train_data;
    std::shared_ptr<const UncertaintyPredictor> predictor;
    std::optional<CalibrationResult> calibration;
    std::optional<PRCITube> scenario_tube;  // tube around the first test reference
    std::map<Stage, nlohmann::json> summaries;
    std::map<Stage, bool> passed;
};

class Pipeline {
public:
    Pipeline(ExperimentConfig cfg, fs::path out, std::ostream* log = &std::clog)
        : cfg_(std::move(cfg)), out_(std::move(out)), log_(log), bench_(make_benchmark(cfg_.benchmark)) {
        workers_ = cfg_.workers == 0 ? default_workers() : cfg_.workers;
        popt_.saturate = cfg_.saturate;
        popt_.geodesic.segments = cfg_.geodesic_segments;
    }

    const ExperimentConfig& config() const { return cfg_; }
    const fs::path& out() const { return out_; }
    const Benchmark& benchmark() const { return bench_; }
    PipelineState& state() { return st_; }

    /// Runs or loads every stage up to and including `last`.
    void run_until(Stage last) {
        static const Stage order[] = {Stage::metric, Stage::references, Stage::train_data, Stage::predictor,
                                      Stage::calibration, Stage::tube, Stage::evaluation, Stage::planning,
                                      Stage::report};
        for (Stage s : order) {
            if (s == Stage::evaluation && !cfg_.evaluate && last != Stage::evaluation) continue;
            if (s == Stage::planning && !cfg_.planning.enabled) {
                if (last == Stage::planning) throw ConfigError("planning stage requested but planning.enabled is false");
                continue;
            }
            run(s);
            if (s == last) break;
        }
    }

    bool all_passed() const {
        for (const auto& [s, ok] : st_.passed)
            if (!ok) return false;
        return true;
    }

    /// The report assembled from stage summaries; byte-stable for a given config and seed.
    nlohmann::json report() const {
        nlohmann::json r;
        r["name"] = cfg_.name;
        r["benchmark"] = cfg_.benchmark;
        r["seed"] = cfg_.seed;
        r["config"] = cfg_.source;
        for (const auto& [s, j] : st_.summaries) r["stages"][to_string(s)] = j;
        for (const auto& [s, ok] : st_.passed) r["validation"][to_string(s)] = ok;
        r["passed"] = all_passed();
        return r;
    }

    Box state_box() const { return bench_.nominal.state_box; }

    PolicyOptions policy_options() const { return popt_; }

    // ------------------------------------------------------------------
private:
    void run(Stage s) {
        if (done_.count(s)) return;
        // A stage is loaded only if its manifest exists, was produced by the same config, and
        // nothing upstream had to be recomputed in this run.
        const fs::path man = out_ / to_string(s) / "manifest.json";
        bool have = !recomputed_ && s != Stage::report && fs::exists(man);
        if (have) {
            try {
                have = read_json(man).value("fingerprint", "") == fingerprint();
            } catch (const std::exception&) {
                have = false;
            }
        }
        if (!have && s != Stage::report) {
            recomputed_ = true;
            st_.summaries.erase(s);
            st_.passed.erase(s);
        }
        try {
            switch (s) {
                case Stage::metric: stage_metric(have); break;
                case Stage::references: stage_references(have); break;
                case Stage::train_data: stage_train_data(have); break;
                case Stage::predictor: stage_predictor(have); break;
                case Stage::calibration: stage_calibration(have); break;
                case Stage::tube: stage_tube(have); break;
                case Stage::evaluation: stage_evaluation(have); break;
                case Stage::planning: stage_planning(have); break;
                case Stage::report: stage_report(); break;
            }
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(s, e.what());
        }
        done_.insert(s);
        if (log_ && s != Stage::report) *log_ << "[" << to_string(s) << "] " << (have ? "loaded" : "computed") << '\n';
    }

    fs::path dir(Stage s) const { return out_ / to_string(s); }

    /// Stage summaries live in manifest.json; writing it last marks the stage complete.
    void finish(Stage s, nlohmann::json summary, bool passed) {
        summary["passed"] = passed;
        summary["fingerprint"] = fingerprint();
        write_json(dir(s) / "manifest.json", summary);
        record(s, std::move(summary));
    }

    void record(Stage s, nlohmann::json summary) {
        st_.passed[s] = summary.value("passed", false);
        st_.summaries[s] = std::move(summary);
    }

    nlohmann::json load_summary(Stage s) {
        auto j = read_json(dir(s) / "manifest.json");
        record(s, j);
        return j;
    }

    /// Hash of everything in the config that can change results (the worker count cannot).
    std::string fingerprint() const {
        nlohmann::json j = cfg_.source;
        j.erase("workers");
        j["seed"] = cfg_.seed;
        return fnv1a_hex(j.dump());
    }

    std::uint64_t seed_for(std::string_view purpose) const {
        return CounterRng::stream(cfg_.seed, purpose).next_u64();
    }

    // ------------------------------------------------------------------ metric
    void stage_metric(bool have) {
        if (have) {
            load_summary(Stage::metric);
            st_.metric = metric_from_json(read_json(dir(Stage::metric) / "metric.json"));
            return;
        }
        const DynamicalSystem& nom = bench_.nominal;
        const Box box = cfg_.metric_box.value_or(nom.state_box);
        std::vector<int> counts = cfg_.metric_grid;
        if (counts.empty()) counts = {5};
        if (counts.size() == 1) counts.assign(box.dim(), counts.front());
        const auto grid = grid_over(box, counts);
        nlohmann::json summary;
        if (cfg_.metric_source == "synthesize") {
            SynthesisOptions so;
            so.phase1_iterations = cfg_.synthesis_phase1_iterations;
            so.bisection_steps = cfg_.synthesis_bisection_steps;
            so.scan_points = cfg_.synthesis_scan_points;
            const auto res = synthesize_constant_metric(nom, grid, cfg_.rate_range, 1.0, so);
            st_.metric = res.metric;
            nlohmann::json trials = nlohmann::json::array();
            for (const auto& t : res.trials)
                trials.push_back({{"lambda", t.rate},
                                  {"feasible", t.feasible},
                                  {"condition_number", std::isfinite(t.condition_number) ? nlohmann::json(t.condition_number)
                                                                                          : nlohmann::json(nullptr)}});
            summary["synthesis_trials"] = trials;
            summary["source"] = "synthesize";
        } else {
            st_.metric = metric_from_json(read_json(cfg_.metric_source));
            summary["source"] = cfg_.metric_source;
        }
        const ContractionMetric& m = *st_.metric;
        const auto ver = verify_contraction(m, nom, grid);
        summary["lambda"] = m.rate();
        summary["m_lower"] = m.lower_bound();
        summary["m_upper"] = m.upper_bound();
        summary["condition_number"] = m.upper_bound() / m.lower_bound();
        summary["verification"] = to_json(ver);
        summary["verification_box"] = box_to_json(box);
        if (cfg_.metric_box) {
            // Also report the conditions on the full state box; informative only.
            auto full_box = nom.state_box;
            const auto full = verify_contraction(m, nom, grid_over(full_box, counts));
            summary["full_state_box_verification"] = to_json(full);
        }
        write_json(dir(Stage::metric) / "metric.json", to_json(m));
        finish(Stage::metric, summary, ver.passed());
    }

    // ------------------------------------------------------------------ references
    ReferenceSampler sampler(std::optional<Box> init, std::optional<Box> input, bool require) const {
        ReferenceSampler rs;
        rs.initial_box = init.value_or(bench_.nominal.state_box);
        rs.input_box = input.value_or(bench_.nominal.input_box);
        rs.knot_spacing = cfg_.knot_spacing_s;
        rs.horizon = cfg_.horizon_s;
        rs.dt = cfg_.dt_s;
        rs.require_in_state_box = require;
        return rs;
    }

    /// Plan problem of the scenario with the given sets; start and goal drawn from (stream, index).
    PlanProblem scenario_problem(std::string_view stream, std::size_t index, const Box& sbox, const Box& ibox,
                                 std::vector<EllipseObstacle> obstacles, bool compensate) const {
        const auto& pc = cfg_.planning;
        CounterRng rng = CounterRng::stream(cfg_.seed, stream, index);
        PlanProblem pr;
        pr.nominal = &bench_.nominal;
        pr.horizon = pc.horizon_s;
        pr.dt = cfg_.dt_s;
        pr.start = rng.uniform_in(pc.start_box);
        pr.goal = pc.goal + rng.uniform_in(pc.goal_offset);
        pr.state_box = sbox;
        pr.input_box = ibox;
        pr.obstacles = std::move(obstacles);
        pr.w1 = pc.w1;
        pr.w2 = pc.w2;
        pr.goal_weight = pc.goal_weight;
        pr.barrier_weight = pc.barrier_weight;
        pr.knot_stride = pc.knot_stride;
        pr.initial_input = pc.initial_input;
        if (compensate && pc.compensation_aware) pr.compensation = st_.predictor;
        return pr;
    }

    PlanOptions plan_options() const {
        PlanOptions o;
        o.max_iterations = cfg_.planning.max_iterations;
        return o;
    }

    Box original_state_box() const { return cfg_.planning.state_box.value_or(bench_.nominal.state_box); }
    Box original_input_box() const { return cfg_.planning.input_box.value_or(bench_.nominal.input_box); }

    void stage_references(bool have) {
        const fs::path d = dir(Stage::references);
        ReferenceSets rs;
        if (have) {
            const auto j = load_summary(Stage::references);
            rs.train = read_reference_dir(d / "train");
            if (j.at("source") == "plan") {
                const auto scen = read_reference_dir(d / "scenario");
                rs.cal.assign(cfg_.n_cal, scen.front());
                rs.test.assign(cfg_.n_test, scen.front());
                for (std::size_t i = 0; i < rs.cal.size(); ++i) rs.cal[i].id = i;
                for (std::size_t i = 0; i < rs.test.size(); ++i) rs.test[i].id = i;
            } else {
                rs.cal = read_reference_dir(d / "cal");
                rs.test = read_reference_dir(d / "test");
            }
            st_.references = std::move(rs);
            return;
        }
        const DynamicalSystem& nom = bench_.nominal;
        const bool own_train = cfg_.train_initial_box || cfg_.train_input_box || cfg_.train_require_in_state_box;
        nlohmann::json summary;
        summary["source"] = cfg_.reference_source;
        if (cfg_.reference_source == "sampler") {
            const auto rsamp = sampler(cfg_.reference_initial_box, cfg_.reference_input_box, cfg_.require_in_state_box);
            const std::size_t pool = (own_train ? 0 : cfg_.n_train) + cfg_.n_cal + cfg_.n_test;
            auto all = rsamp.sample(nom, pool, cfg_.seed, "reference", workers_);
            std::size_t k = 0;
            auto take = [&](std::size_t n) {
                std::vector<ReferenceSample> v(all.begin() + static_cast<std::ptrdiff_t>(k),
                                               all.begin() + static_cast<std::ptrdiff_t>(k + n));
                for (std::size_t i = 0; i < v.size(); ++i) v[i].id = i;
                k += n;
                return v;
            };
            if (!own_train) rs.train = take(cfg_.n_train);
            rs.cal = take(cfg_.n_cal);
            rs.test = take(cfg_.n_test);
        } else {
            // One planned reference; calibration and test rollouts differ in their initial states.
            auto pr = scenario_problem("scenario", 0, original_state_box(), original_input_box(),
                                       cfg_.planning.obstacles, false);
            pr.horizon = cfg_.horizon_s;
            const auto pl = plan(pr, std::nullopt, plan_options());
            ReferenceSample s;
            s.x0 = pr.start;
            s.signal = pl.signal;
            s.record = pl.reference;
            summary["scenario_plan"] = plan_manifest(pr, pl);
            summary["scenario_plan_feasible"] = pl.feasible();
            write_reference_dir(d / "scenario", {s});
            rs.cal.assign(cfg_.n_cal, s);
            rs.test.assign(cfg_.n_test, s);
            for (std::size_t i = 0; i < rs.cal.size(); ++i) rs.cal[i].id = i;
            for (std::size_t i = 0; i < rs.test.size(); ++i) rs.test[i].id = i;
        }
        if (own_train) {
            const auto tsamp = sampler(cfg_.train_initial_box ? cfg_.train_initial_box : cfg_.reference_initial_box,
                                       cfg_.train_input_box ? cfg_.train_input_box : cfg_.reference_input_box,
                                       cfg_.train_require_in_state_box.value_or(cfg_.require_in_state_box));
            rs.train = tsamp.sample(nom, cfg_.n_train, cfg_.seed, "reference-train", workers_);
        }
        write_reference_dir(d / "train", rs.train);
        if (cfg_.reference_source == "sampler") {
            write_reference_dir(d / "cal", rs.cal);
            write_reference_dir(d / "test", rs.test);
        }
        summary["n_train"] = rs.train.size();
        summary["n_cal"] = rs.cal.size();
        summary["n_test"] = rs.test.size();
        summary["train_hash"] = dataset_hash(d / "train");
        if (cfg_.reference_source == "sampler") {
            summary["cal_hash"] = dataset_hash(d / "cal");
            summary["test_hash"] = dataset_hash(d / "test");
        } else {
            summary["scenario_hash"] = dataset_hash(d / "scenario");
        }
        bool ok = rs.train.size() == cfg_.n_train && rs.cal.size() == cfg_.n_cal && rs.test.size() == cfg_.n_test;
        if (summary.contains("scenario_plan_feasible")) ok = ok && summary["scenario_plan_feasible"].get<bool>();
        st_.references = std::move(rs);
        finish(Stage::references, summary, ok);
    }

    // ------------------------------------------------------------------ training data
    void stage_train_data(bool have) {
        const fs::path d = dir(Stage::train_data);
        if (have) {
            load_summary(Stage::train_data);
            st_.train_data = read_dataset_dir(d / "records");
            return;
        }
        auto ds = generate_perturbed_dataset(bench_.truth, st_.references->train, PolicyMode::open_loop_reference,
                                             nullptr, workers_);
        ds.validate();
        write_dataset_dir(d / "records", ds);
        nlohmann::json summary;
        summary["records"] = ds.records.size();
        summary["skipped"] = st_.references->train.size() - ds.records.size();
        summary["hash"] = dataset_hash(d / "records");
        const bool ok = !ds.records.empty();
        st_.train_data = std::move(ds);
        finish(Stage::train_data, summary, ok);
    }

    // ------------------------------------------------------------------ predictor
    void stage_predictor(bool have) {
        const fs::path d = dir(Stage::predictor);
        if (have) {
            load_summary(Stage::predictor);
            st_.predictor = std::make_shared<const UncertaintyPredictor>(predictor_from_json(read_json(d / "predictor.json")));
            return;
        }
        TrainingConfig tc = cfg_.training;
        tc.seed = seed_for("predictor-init");
        auto res = train(*st_.train_data, tc);
        const auto zero = UncertaintyPredictor::zero(bench_.nominal.state_dim, bench_.nominal.input_dim);
        nlohmann::json summary;
        summary["family"] = to_string(tc.family);
        summary["id"] = res.predictor.id();
        summary["final_loss"] = res.final_loss;
        summary["zero_predictor_loss"] = sup_error_loss(zero, *st_.train_data);
        summary["epochs_accepted"] = res.surrogate_history.size();
        write_json(d / "predictor.json", to_json(res.predictor));
        write_json(d / "training_history.json", {{"surrogate", res.surrogate_history}});
        const bool ok = std::isfinite(res.final_loss);
        st_.predictor = std::make_shared<const UncertaintyPredictor>(std::move(res.predictor));
        finish(Stage::predictor, summary, ok);
    }

    // ------------------------------------------------------------------ calibration
    ClosedLoopContext closed_loop_context(std::string stream, std::optional<double> ball_radius) const {
        ClosedLoopContext ctx;
        ctx.nominal = &bench_.nominal;
        ctx.metric = *st_.metric;
        ctx.predictor = st_.predictor;
        ctx.options = popt_;
        const std::uint64_t seed = cfg_.seed;
        if (cfg_.initial_state == "offset") {
            const Box off = *cfg_.initial_offset;
            ctx.initial_state = [seed, off, stream](const ReferenceSample& r, std::size_t i) {
                CounterRng rng = CounterRng::stream(seed, stream, i);
                return Vector(r.record.states.front() + rng.uniform_in(off));
            };
        } else if (cfg_.initial_state == "ball" && ball_radius) {
            const ContractionMetric m = *st_.metric;
            const double rad = *ball_radius;
            ctx.initial_state = [seed, m, rad, stream](const ReferenceSample& r, std::size_t i) {
                CounterRng rng = CounterRng::stream(seed, stream, i);
                const Vector& c = r.record.states.front();
                return metric_ball_sample(m.evaluate(c), c, rad, rng, 1);
            };
        }
        return ctx;
    }

    std::vector<double> scores_of(const TrainingDataset& ds) const {
        std::vector<double> s(ds.records.size());
        parallel_for(ds.records.size(), workers_, [&](std::size_t i) {
            s[i] = nonconformity_score(ds.records[i].trajectory, st_.predictor.get(), bench_.truth, bench_.nominal);
        });
        return s;
    }

    void stage_calibration(bool have) {
        const fs::path d = dir(Stage::calibration);
        if (have) {
            load_summary(Stage::calibration);
            st_.calibration = calibration_from_json(read_json(d / "calibration.json"));
            return;
        }
        // Calibration rollouts start on the reference (or at a sampled offset); the ball radius
        // is what this stage determines, so "ball" starts are for test rollouts only.
        const auto ctx = closed_loop_context("cal-start", std::nullopt);
        auto ds = generate_perturbed_dataset(bench_.truth, st_.references->cal, PolicyMode::closed_loop_with_predictor,
                                             &ctx, workers_);
        write_dataset_dir(d / "records", ds);
        // A diverged rollout is scored +inf rather than dropped, which would bias the quantile.
        auto scores = scores_of(ds);
        scores.resize(st_.references->cal.size(), kInf);
        write_text(d / "scores.csv", scores_to_csv(scores));
        auto cal = calibrate(scores, cfg_.alpha);
        cal.predictor_id = st_.predictor->id();
        cal.dataset_hash = dataset_hash(d / "records");
        write_json(d / "calibration.json", to_json(cal));
        nlohmann::json summary;
        summary["N"] = cal.size();
        summary["diverged"] = st_.references->cal.size() - ds.records.size();
        summary["alpha"] = cal.alpha;
        summary["quantile_index"] = cal.quantile_index;
        summary["unbounded"] = cal.unbounded();
        summary["quantile"] = cal.unbounded() ? nlohmann::json("inf") : nlohmann::json(cal.quantile_value);
        summary["summary"] = calibration_summary(cal);
        const bool ok = !cal.unbounded();
        st_.calibration = std::move(cal);
        finish(Stage::calibration, summary, ok);
    }

    // ------------------------------------------------------------------ tube
    void stage_tube(bool have) {
        const fs::path d = dir(Stage::tube);
        const ContractionMetric& m = *st_.metric;
        const auto& cal = *st_.calibration;
        if (!st_.references->test.empty())
            st_.scenario_tube = make_tube(st_.references->test.front().record, m, cal, "calibration");
        if (have) {
            load_summary(Stage::tube);
            return;
        }
        nlohmann::json summary;
        const double r = tube_radius(m, cal.quantile_value);
        summary["radius"] = std::isfinite(r) ? nlohmann::json(r) : nlohmann::json("inf");
        summary["lambda"] = m.rate();
        summary["c2"] = summary["radius"];
        bool ok = std::isfinite(r);
        if (ok) {
            summary["state_margins"] = metric_ball_extent(m, r);
            const auto tb = tighten_state_box(bench_.nominal.state_box, r, m);
            summary["tightened_state_box_empty"] = tb.empty;
            if (st_.scenario_tube && cfg_.ellipse_plane.size() == 2 && m.dim() > 2) {
                const auto es = project_tube_2d(*st_.scenario_tube, cfg_.ellipse_plane[0], cfg_.ellipse_plane[1]);
                std::ostringstream os;
                write_ellipse_csv(os, es);
                write_text(d / "ellipse.csv", os.str());
                summary["ellipse_csv"] = "ellipse.csv";
                summary["ellipse_plane"] = cfg_.ellipse_plane;
            }
        }
        finish(Stage::tube, summary, ok);
    }

    // ------------------------------------------------------------------ evaluation
    void stage_evaluation(bool have) {
        const fs::path d = dir(Stage::evaluation);
        if (have) {
            load_summary(Stage::evaluation);
            return;
        }
        const ContractionMetric& m = *st_.metric;
        const auto& cal = *st_.calibration;
        const double radius = tube_radius(m, cal.quantile_value);
        const auto ctx = closed_loop_context("test-start", std::isfinite(radius) ? std::optional<double>(radius) : std::nullopt);
        const auto& refs = st_.references->test;
        auto ds = generate_perturbed_dataset(bench_.truth, refs, PolicyMode::closed_loop_with_predictor, &ctx, workers_);
        ds.split = SplitTag::cal;
        write_dataset_dir(d / "records", ds, {{"role", "test"}});
        const auto scores = scores_of(ds);

        struct Row {
            std::size_t id;
            double sup = 0.0, d0 = 0.0, score = 0.0;
            bool contained = false, envelope_ok = true;
        };
        std::vector<Row> rows(ds.records.size());
        parallel_for(ds.records.size(), workers_, [&](std::size_t i) {
            const auto& rec = ds.records[i].trajectory;
            const PRCITube tube = make_tube(refs[ds.records[i].id].record, m, cal);
            const auto rc = rollout_containment(tube, rec, popt_.geodesic);
            Row row;
            row.id = ds.records[i].id;
            row.sup = rc.sup_distance;
            row.d0 = rc.distances.front();
            row.score = scores[i];
            row.contained = rc.contained;
            if (rc.contained) {
                const auto env = make_envelope(row.d0, m, cal.quantile_value);
                for (std::size_t k = 0; k < rec.size(); ++k)
                    if (rc.distances[k] > envelope_at(env, rec.times[k]) + cfg_.envelope_slack * env.c2) row.envelope_ok = false;
            }
            rows[i] = row;
        });
        // Diverged rollouts count as uncovered and not contained.
        std::vector<bool> present(refs.size(), false);
        for (const auto& r : ds.records) present[r.id] = true;
        for (std::size_t i = 0; i < refs.size(); ++i)
            if (!present[i]) rows.push_back(Row{i, kInf, kInf, kInf, false, true});
        std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
        std::ostringstream csv;
        csv << "id,sup_distance,initial_distance,score,contained,envelope_ok\n" << std::setprecision(17);
        std::size_t contained = 0, env_viol = 0, covered = 0;
        for (const auto& r : rows) {
            csv << r.id << ',' << r.sup << ',' << r.d0 << ',' << r.score << ',' << (r.contained ? 1 : 0) << ','
                << (r.envelope_ok ? 1 : 0) << '\n';
            contained += r.contained;
            env_viol += (r.contained && !r.envelope_ok);
            covered += (r.score <= cal.quantile_value);
        }
        write_text(d / "sup_distances.csv", csv.str());

        const std::size_t n = rows.size();
        const double frac = n ? static_cast<double>(contained) / static_cast<double>(n) : 0.0;
        nlohmann::json summary;
        summary["N"] = n;
        summary["diverged"] = refs.size() - ds.records.size();
        summary["initial_state"] = cfg_.initial_state;
        summary["radius"] = std::isfinite(radius) ? nlohmann::json(radius) : nlohmann::json("inf");
        summary["contained"] = contained;
        summary["containment_fraction"] = frac;
        summary["score_coverage"] = n ? static_cast<double>(covered) / static_cast<double>(n) : 0.0;
        summary["envelope_violations"] = env_viol;
        summary["target"] = 1.0 - cfg_.alpha;
        summary["binomial_floor"] = binomial_floor(1.0 - cfg_.alpha, n);
        double worst = 0.0;
        for (const auto& r : rows) worst = std::max(worst, r.sup);
        summary["max_sup_distance"] = std::isfinite(worst) ? nlohmann::json(worst) : nlohmann::json("inf");
        finish(Stage::evaluation, summary, true);
    }

public:
    /// p - 2 sqrt(p (1 - p) / n): the two-sigma binomial slack used for coverage checks.
    static double binomial_floor(double p, std::size_t n) {
        return n ? p - 2.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n)) : 0.0;
    }

private:
    // ------------------------------------------------------------------ planning
    void stage_planning(bool have) {
        const fs::path d = dir(Stage::planning);
        if (have) {
            load_summary(Stage::planning);
            return;
        }
        const auto& pc = cfg_.planning;
        const ContractionMetric& m = *st_.metric;
        const DynamicalSystem& nom = bench_.nominal;
        const Box s0 = original_state_box(), u0 = original_input_box();
        const auto n1 = two_step_split(pc.n_cal, pc.split_fraction);
        const auto n2 = pc.n_cal - n1;
        nlohmann::json summary;

        // First subset: references from the local scenario sampler, closed loop from their start.
        ReferenceSampler first;
        first.initial_box = pc.first_initial_box;
        first.input_box = pc.first_input_box;
        first.knot_spacing = cfg_.knot_spacing_s;
        first.horizon = pc.horizon_s;
        first.dt = cfg_.dt_s;
        first.require_in_state_box = true;
        const auto refs1 = first.sample(nom, n1, cfg_.seed, "planning-first", workers_);
        ClosedLoopContext ctx;
        ctx.nominal = &nom;
        ctx.metric = m;
        ctx.predictor = st_.predictor;
        ctx.options = popt_;
        const auto ds1 = generate_perturbed_dataset(bench_.truth, refs1, PolicyMode::closed_loop_with_predictor, &ctx, workers_);
        auto s1 = scores_of(ds1);
        s1.resize(refs1.size(), kInf);
        auto q1 = calibrate(s1, cfg_.alpha);
        const double d1 = tube_radius(m, q1.quantile_value);
        write_text(d / "first_scores.csv", scores_to_csv(s1));
        summary["first"] = {{"N", n1}, {"quantile", q1.unbounded() ? nlohmann::json("inf") : nlohmann::json(q1.quantile_value)},
                            {"radius", std::isfinite(d1) ? nlohmann::json(d1) : nlohmann::json("inf")}};
        if (!std::isfinite(d1)) {
            summary["error"] = "first-subset quantile is unbounded";
            finish(Stage::planning, summary, false);
            return;
        }

        // Tightening. The input margin covers kappa over the tube cross-sections plus the largest
        // observed gap between the applied input and the compensated input along the reference.
        std::vector<double> dev(static_cast<std::size_t>(nom.input_dim), 0.0);
        if (pc.compensation_aware && st_.predictor) {
            for (std::size_t r = 0; r < ds1.records.size(); ++r) {
                const auto& tr = ds1.records[r].trajectory;
                const auto& ref = refs1[ds1.records[r].id].record;
                Vector prev = Vector::Zero(nom.input_dim);
                for (std::size_t k = 0; k < tr.size(); ++k) {
                    const Vector v = ref.inputs[k] - pseudo_inverse(nom.actuation(ref.states[k])) *
                                                         st_.predictor->predict(ref.states[k], prev);
                    prev = v;
                    for (std::size_t j = 0; j < dev.size(); ++j)
                        dev[j] = std::max(dev[j], std::abs(tr.inputs[k][static_cast<Eigen::Index>(j)] - v[static_cast<Eigen::Index>(j)]));
                }
            }
        }
        std::vector<double> extra(dev.size());
        for (std::size_t j = 0; j < dev.size(); ++j) extra[j] = (1.0 + pc.inflation) * dev[j];
        std::vector<std::pair<Vector, Vector>> anchors;
        for (const auto& r : refs1)
            for (auto& a : reference_anchors(r.record, pc.anchor_stride)) anchors.push_back(std::move(a));
        const auto tin = tighten_input_box(u0, anchors, d1, m, nom, pc.input_samples, seed_for("input-tightening"), extra,
                                           pc.inflation, popt_.geodesic);
        const auto tst = tighten_state_box(s0, d1, m);
        std::vector<EllipseObstacle> inflated;
        double obstacle_margin = 0.0;
        for (const auto& o : pc.obstacles) {
            double ext = 0.0;
            for (const auto& [xb, ub] : anchors) {
                Ellipse2D e;
                e.shape = schur_projection(m.evaluate(xb), o.i, o.j);
                e.radius = d1;
                ext = std::max(ext, e.max_extent());
            }
            obstacle_margin = std::max(obstacle_margin, ext);
            inflated.push_back(o.inflated(ext));
        }
        summary["tightening"] = {{"state_margins", tst.margins},
                                 {"input_margins", tin.margins},
                                 {"compensation_gap", dev},
                                 {"obstacle_margin", obstacle_margin},
                                 {"state_box", box_to_json(tst.box)},
                                 {"input_box", box_to_json(tin.box)},
                                 {"empty", tst.empty || tin.empty}};
        if (tst.empty || tin.empty) {
            summary["error"] = "tightened sets are empty";
            finish(Stage::planning, summary, false);
            return;
        }

        // Second subset: rollouts around references planned with the tightened sets.
        auto plan_batch = [&](std::string_view stream, std::size_t n) {
            std::vector<std::optional<PlanResult>> plans(n);
            std::vector<std::string> errors(n);
            parallel_for(n, workers_, [&](std::size_t i) {
                try {
                    plans[i] = plan(scenario_problem(stream, i, tst.box, tin.box, inflated, true), std::nullopt, plan_options());
                } catch (const InfeasiblePlan& e) {
                    errors[i] = e.what();
                }
            });
            return std::make_pair(std::move(plans), std::move(errors));
        };
        auto rollout_scores = [&](const std::vector<std::optional<PlanResult>>& plans) {
            std::vector<double> s;
            std::vector<std::optional<double>> slot(plans.size());
            parallel_for(plans.size(), workers_, [&](std::size_t i) {
                if (!plans[i]) return;
                auto ref = std::make_shared<const Reference>(plans[i]->reference, nom);
                ContractingPolicy pol(nom, m, ref, st_.predictor, popt_);
                try {
                    const auto rec = closed_loop_rollout(bench_.truth, pol, plans[i]->reference.states.front());
                    slot[i] = nonconformity_score(rec, st_.predictor.get(), bench_.truth, nom);
                } catch (const NonFiniteState&) {
                    slot[i] = kInf;
                }
            });
            for (const auto& v : slot)
                if (v) s.push_back(*v);
            return s;
        };
        auto [plans2, err2] = plan_batch("plan-cal", n2);
        const auto s2 = rollout_scores(plans2);
        write_text(d / "second_scores.csv", scores_to_csv(s2));
        std::size_t failed2 = 0;
        for (const auto& e : err2) failed2 += !e.empty();
        if (s2.empty()) {
            summary["error"] = "no feasible second-subset plans";
            finish(Stage::planning, summary, false);
            return;
        }
        auto q2 = calibrate(s2, cfg_.alpha);
        q2.predictor_id = st_.predictor->id();
        const double d2 = tube_radius(m, q2.quantile_value);
        summary["second"] = {{"N", s2.size()}, {"failed_plans", failed2},
                             {"quantile", q2.unbounded() ? nlohmann::json("inf") : nlohmann::json(q2.quantile_value)},
                             {"radius", std::isfinite(d2) ? nlohmann::json(d2) : nlohmann::json("inf")}};

        // Test: fresh plans, one rollout each, checked against the original sets and obstacles.
        auto [plans3, err3] = plan_batch("plan-test", pc.n_test);
        std::size_t failed3 = 0, infeasible3 = 0;
        RunReport all;
        all.radius = d2;
        for (std::size_t i = 0; i < plans3.size(); ++i) {
            if (!plans3[i]) {
                ++failed3;
                continue;
            }
            if (!plans3[i]->feasible()) ++infeasible3;
            try {
                const auto rep = end_to_end_run(bench_.truth, nom, *plans3[i], m, st_.predictor, q2,
                                                {plans3[i]->reference.states.front()}, s0, u0, pc.obstacles, popt_, 1);
                all.rollouts.push_back(rep.rollouts.front());
            } catch (const NonFiniteState&) {
                RolloutCheck c;
                c.contained = c.state_ok = c.input_ok = false;
                all.rollouts.push_back(c);
            }
        }
        write_json(d / "run_report.json", to_json(all));
        std::size_t collisions = 0;
        for (const auto& r : all.rollouts) collisions += r.min_clearance < 0.0;
        const std::size_t n = all.rollouts.size();
        summary["test"] = {{"N", n},
                           {"failed_plans", failed3},
                           {"infeasible_plans", infeasible3},
                           {"violation_fraction", all.violation_fraction()},
                           {"violation_ceiling", cfg_.alpha + 2.0 * std::sqrt(cfg_.alpha * (1.0 - cfg_.alpha) /
                                                                              static_cast<double>(std::max<std::size_t>(n, 1)))},
                           {"contained_fraction", all.contained_fraction()},
                           {"collisions", collisions}};
        finish(Stage::planning, summary, n > 0 && failed3 == 0);
    }

    // ------------------------------------------------------------------ report
    void stage_report() { write_json(out_ / "report.json", report()); }

    static nlohmann::json box_to_json(const Box& b) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& i : b.axes) a.push_back({i.lo, i.hi});
        return a;
    }

    ExperimentConfig cfg_;
    fs::path out_;
    std::ostream* log_;
    Benchmark bench_;
    std::size_t workers_ = 1;
    PolicyOptions popt_;
    PipelineState st_;
    std::set<Stage> done_;
    bool recomputed_ = false;
};

/// Runs every enabled stage and writes report.json. Stages whose manifest exists are loaded.
inline nlohmann::json run_pipeline(const ExperimentConfig& cfg, const fs::path& out, std::ostream* log = &std::clog) {
    Pipeline p(cfg, out, log);
    p.run_until(Stage::report);
    return p.report();
}

}  // namespace cct
