#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "cct/control.hpp"
#include "cct/core.hpp"
#include "cct/metric.hpp"
#include "cct/predictor.hpp"
#include "cct/random.hpp"
#include "cct/systems.hpp"

namespace cct {

/// Runs body(i) for i in [0, n) on up to `workers` threads. Results must be written to slot i so
/// the outcome does not depend on scheduling. The first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// One nominal reference (xbar, ubar) and the signal that generated it.
struct ReferenceSample {
    std::size_t id = 0;
    Vector x0;
    PiecewiseLinearSignal signal;
    TrajectoryRecord record;
};

/// Integrates every (x0, signal) pair nominally; pairs that diverge are skipped with a log line.
inline std::vector<ReferenceSample> generate_reference_dataset(const DynamicalSystem& sys_nominal,
                                                               const std::vector<Vector>& initial_conditions,
                                                               const std::vector<PiecewiseLinearSignal>& signals,
                                                               double horizon, double dt,
                                                               std::size_t workers = default_workers()) {
    if (sys_nominal.has_uncertainty()) throw Error("generate_reference_dataset: system must be nominal");
    if (initial_conditions.size() != signals.size())
        throw DimensionMismatch("generate_reference_dataset: one signal per initial condition");
    std::vector<std::optional<ReferenceSample>> slots(signals.size());
    parallel_for(signals.size(), workers, [&](std::size_t i) {
        try {
            ReferenceSample s;
            s.id = i;
            s.x0 = initial_conditions[i];
            s.signal = signals[i];
            s.record = integrate_open_loop(sys_nominal, s.x0, s.signal, horizon, dt);
            slots[i] = std::move(s);
        } catch (const NonFiniteState& e) {
            std::clog << "reference " << i << " skipped: " << e.what() << '\n';
        }
    });
    std::vector<ReferenceSample> out;
    for (auto& s : slots)
        if (s) out.push_back(std::move(*s));
    return out;
}

/// Draws references (x0 uniform in `initial_box`, knots uniform in the input box) and keeps those
/// whose nominal trajectory stays finite and, if requested, inside the state box. Each candidate
/// uses its own counter stream, so the accepted set is a deterministic function of the seed.
struct ReferenceSampler {
    Box initial_box;
    Box input_box;
    double knot_spacing = 1.0;
    double horizon = 5.0;
    double dt = 0.01;
    bool require_in_state_box = true;
    /// Margin kept from the state box faces when checking acceptance.
    double state_margin = 0.0;
    std::size_t max_attempts_per_sample = 200;

    std::pair<Vector, PiecewiseLinearSignal> draw(std::uint64_t seed, std::string_view stream,
                                                  std::uint64_t index) const {
        CounterRng rng = CounterRng::stream(seed, stream, index);
        Vector x0 = rng.uniform_in(initial_box);
        PiecewiseLinearSignal sig;
        sig.spacing = knot_spacing;
        const auto knots = static_cast<std::size_t>(std::ceil(horizon / knot_spacing - 1e-9)) + 1;
        for (std::size_t k = 0; k < knots; ++k) sig.knots.push_back(rng.uniform_in(input_box));
        return {std::move(x0), std::move(sig)};
    }

    bool acceptable(const DynamicalSystem& nominal, const TrajectoryRecord& rec) const {
        if (!require_in_state_box) return true;
        for (const auto& x : rec.states)
            if (nominal.state_box.inner_margin(x) < state_margin) return false;
        return true;
    }

    /// n accepted references, candidate j drawn from stream (stream, j). Ids are 0..n-1.
    std::vector<ReferenceSample> sample(const DynamicalSystem& nominal, std::size_t n, std::uint64_t seed,
                                        std::string_view stream, std::size_t workers = default_workers()) const {
        std::vector<ReferenceSample> out;
        std::uint64_t next = 0;
        const std::uint64_t limit = max_attempts_per_sample * std::max<std::size_t>(n, 1);
        while (out.size() < n && next < limit) {
            const std::size_t batch = std::max<std::size_t>(n - out.size(), workers) * 2;
            std::vector<std::optional<ReferenceSample>> slots(batch);
            parallel_for(batch, workers, [&](std::size_t i) {
                auto [x0, sig] = draw(seed, stream, next + i);
                try {
                    TrajectoryRecord rec = integrate_open_loop(nominal, x0, sig, horizon, dt);
                    if (!acceptable(nominal, rec)) return;
                    ReferenceSample s;
                    s.x0 = std::move(x0);
                    s.signal = std::move(sig);
                    s.record = std::move(rec);
                    slots[i] = std::move(s);
                } catch (const NonFiniteState&) {
                }
            });
            next += batch;
            for (auto& s : slots)
                if (s && out.size() < n) {
                    s->id = out.size();
                    out.push_back(std::move(*s));
                }
        }
        if (out.size() < n)
            throw Error("reference sampler accepted only " + std::to_string(out.size()) + " of " + std::to_string(n) +
                        " references");
        return out;
    }
};

enum class PolicyMode { open_loop_reference, closed_loop_with_predictor };

/// What the closed-loop calibration protocol needs besides the references.
struct ClosedLoopContext {
    const DynamicalSystem* nominal = nullptr;
    ContractionMetric metric;
    std::shared_ptr<const UncertaintyPredictor> predictor;
    PolicyOptions options;
    /// Initial state for reference i; defaults to the reference's own start.
    std::function<Vector(const ReferenceSample&, std::size_t)> initial_state;
};

/// Replays references on the true plant: open-loop ubar for training records, the full
/// compensated tracking policy for calibration records. Diverging records are skipped and logged.
inline TrainingDataset generate_perturbed_dataset(const DynamicalSystem& sys_true,
                                                  const std::vector<ReferenceSample>& source, PolicyMode mode,
                                                  const ClosedLoopContext* ctx = nullptr,
                                                  std::size_t workers = default_workers()) {
    if (mode == PolicyMode::closed_loop_with_predictor && (!ctx || !ctx->nominal))
        throw Error("generate_perturbed_dataset: closed-loop mode needs a metric, predictor and nominal system");
    std::vector<std::optional<DatasetRecord>> slots(source.size());
    parallel_for(source.size(), workers, [&](std::size_t i) {
        const auto& ref = source[i];
        try {
            DatasetRecord r;
            r.id = ref.id;
            if (mode == PolicyMode::open_loop_reference) {
                r.trajectory = integrate_open_loop(sys_true, ref.x0, ref.signal, ref.record.horizon(), ref.record.dt);
            } else {
                auto reference = std::make_shared<const Reference>(ref.record, *ctx->nominal);
                ContractingPolicy policy(*ctx->nominal, ctx->metric, reference, ctx->predictor, ctx->options);
                const Vector x0 = ctx->initial_state ? ctx->initial_state(ref, i) : ref.record.states.front();
                r.trajectory = closed_loop_rollout(sys_true, policy, x0);
            }
            if (!r.trajectory.has_uncertainties())
                r.trajectory.uncertainties.assign(r.trajectory.size(), Vector::Zero(sys_true.state_dim));
            slots[i] = std::move(r);
        } catch (const NonFiniteState& e) {
            std::clog << "perturbed record " << ref.id << " skipped: " << e.what() << '\n';
        }
    });
    TrainingDataset ds;
    ds.split = mode == PolicyMode::open_loop_reference ? SplitTag::train : SplitTag::cal;
    for (auto& s : slots)
        if (s) ds.records.push_back(std::move(*s));
    return ds;
}

}  // namespace cct
