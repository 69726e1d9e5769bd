// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Statistics are recomputed here from the persisted artifacts rather than read from summaries.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <queue>
#include <sstream>

#include "cct/cct.hpp"

using namespace cct;

namespace {

const fs::path kSource = CCT_SOURCE_DIR;

struct Verdict {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cct_acceptance_" + name);
    fs::remove_all(p);
    return p;
}

double binomial_floor(double p, std::size_t n) { return p - 2.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n)); }

// ---------------------------------------------------------------- 1
Verdict conformal_exactness() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = 50, reps = 10000;
    const double alpha = 0.05;
    double hits = 0.0;
    for (std::size_t r = 0; r < reps; ++r) {
        CounterRng rng = CounterRng::stream(101, "acceptance-coverage", r);
        std::vector<double> s(n);
        for (auto& v : s) v = rng.uniform();
        hits += rng.uniform() <= calibrate(s, alpha).quantile_value;
    }
    const double cov = hits / static_cast<double>(reps);
    const double se = std::sqrt(cov * (1.0 - cov) / static_cast<double>(reps));
    const double lo = 1.0 - alpha - 3.0 * se, hi = 1.0 - alpha + 1.0 / (n + 1) + 3.0 * se;
    const double secs = seconds_since(t0);
    return {cov >= lo && cov <= hi && secs < 10.0,
            "coverage " + fmt(cov) + " in [" + fmt(lo) + ", " + fmt(hi) + "], " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- 2 and 3
struct DeskResult {
    Verdict coverage, envelope;
    std::optional<ContractionMetric> metric;
};

DeskResult desk_scale() {
    DeskResult out;
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path d = fresh_dir("desk");
    try {
        run_pipeline(load_config(kSource / "configs/threeD_desk.toml"), d, nullptr);
    } catch (const std::exception& e) {
        out.coverage = {false, std::string("pipeline error: ") + e.what()};
        out.envelope = out.coverage;
        return out;
    }
    const double secs = seconds_since(t0);

    const auto mj = read_json(d / "metric" / "metric.json");
    const Matrix m = metric_from_json(mj).constant_matrix();
    const double lam = mj.at("lambda").get<double>();
    const double m_upper = mj.at("m_upper").get<double>();
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
    const bool bound_ok = m_upper >= eig.eigenvalues().maxCoeff() * (1.0 - 1e-9);
    out.metric = ContractionMetric::constant(m, lam);

    const auto cal = read_json(d / "calibration" / "calibration.json");
    const double q = cal.at("quantile_value").get<double>();
    const double radius = std::sqrt(m_upper) * q / lam;

    const auto refs = read_reference_dir(d / "references" / "test");
    const auto runs = read_dataset_dir(d / "evaluation" / "records");
    std::map<std::size_t, const TrajectoryRecord*> by_id;
    for (const auto& r : runs.records) by_id[r.id] = &r.trajectory;

    std::size_t contained = 0, violations = 0;
    for (const auto& ref : refs) {
        auto it = by_id.find(ref.id);
        if (it == by_id.end()) continue;  // diverged: not contained
        const TrajectoryRecord& rec = *it->second;
        if (rec.size() != ref.record.size()) continue;
        std::vector<double> dist(rec.size());
        for (std::size_t k = 0; k < rec.size(); ++k) {
            const Vector e = rec.states[k] - ref.record.states[k];
            dist[k] = std::sqrt(e.dot(m * e));
        }
        if (*std::max_element(dist.begin(), dist.end()) > radius) continue;
        ++contained;
        const double d0 = dist.front();
        for (std::size_t k = 0; k < rec.size(); ++k) {
            const double bound = (d0 - radius) * std::exp(-lam * rec.times[k]) + radius + 0.05 * radius;
            if (dist[k] > bound) {
                ++violations;
                break;
            }
        }
    }
    const std::size_t n = refs.size();
    const double frac = n ? static_cast<double>(contained) / static_cast<double>(n) : 0.0;
    const double floor = binomial_floor(0.95, 100);
    out.coverage = {n == 100 && frac >= floor && secs < 300.0 && bound_ok,
                    "containment " + std::to_string(contained) + "/" + std::to_string(n) + " = " + fmt(frac) +
                        " (floor " + fmt(floor) + "), radius " + fmt(radius) + ", " + fmt(secs, 3) + " s"};
    out.envelope = {contained > 0 && violations == 0,
                    std::to_string(violations) + " envelope violations among " + std::to_string(contained) +
                        " contained rollouts"};
    return out;
}

// ---------------------------------------------------------------- 4
Verdict nominal_contraction(const ContractionMetric& metric) {
    const auto pair = make_benchmark_3d();
    const double lam = metric.rate();
    const double horizon = 3.0 / lam;
    const Matrix& m = metric.constant_matrix();
    CounterRng rng(404);
    double worst = kInf;
    for (int i = 0; i < 20; ++i) {
        const Vector xb0 = rng.uniform_in(Box::uniform(3, -2.0, 2.0));
        PiecewiseLinearSignal sig;
        sig.spacing = 1.0;
        for (int k = 0; k <= static_cast<int>(std::ceil(horizon)) + 1; ++k)
            sig.knots.push_back(rng.uniform_in(pair.nominal.input_box));
        const auto ref_rec = integrate_open_loop(pair.nominal, xb0, sig, horizon, 0.01);
        auto ref = std::make_shared<const Reference>(ref_rec, pair.nominal);
        auto zero = std::make_shared<const UncertaintyPredictor>(UncertaintyPredictor::zero(3, 2));
        ContractingPolicy policy(pair.nominal, metric, ref, zero);
        const Vector x0 = xb0 + rng.uniform_in(Box::uniform(3, -1.0, 1.0));
        const auto rec = closed_loop_rollout(pair.nominal, policy, x0);
        // least-squares slope of log d against t
        double st = 0, sy = 0, stt = 0, sty = 0, cnt = 0;
        for (std::size_t k = 0; k < rec.size(); ++k) {
            const Vector e = rec.states[k] - ref_rec.states[k];
            const double dk = std::sqrt(e.dot(m * e));
            if (dk <= 0.0) continue;
            const double t = rec.times[k], y = std::log(dk);
            st += t;
            sy += y;
            stt += t * t;
            sty += t * y;
            cnt += 1;
        }
        const double slope = (cnt * sty - st * sy) / (cnt * stt - st * st);
        worst = std::min(worst, -slope);
    }
    return {worst >= 0.9 * lam, "slowest fitted rate " + fmt(worst) + " vs 0.9 lambda = " + fmt(0.9 * lam)};
}

// ---------------------------------------------------------------- 5
// Generic solver: active-set KKT solve of min |k|^2 s.t. a^T k >= b.
Vector kkt_qp(const Vector& a, double b) {
    const Eigen::Index n = a.size();
    if (b <= 0.0) return Vector::Zero(n);
    Matrix kkt = Matrix::Zero(n + 1, n + 1);
    kkt.topLeftCorner(n, n) = 2.0 * Matrix::Identity(n, n);
    kkt.topRightCorner(n, 1) = -a;
    kkt.bottomLeftCorner(1, n) = a.transpose();
    Vector rhs = Vector::Zero(n + 1);
    rhs[n] = b;
    return kkt.fullPivLu().solve(rhs).head(n);
}

Verdict qp_equivalence(const ContractionMetric& metric) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto pair = make_benchmark_3d();
    CounterRng rng(505);
    double worst = 0.0;
    int active = 0;
    for (int i = 0; i < 1000; ++i) {
        const Vector x = rng.uniform_in(Box::uniform(3, -3.0, 3.0));
        const Vector xb = rng.uniform_in(Box::uniform(3, -3.0, 3.0));
        const Vector ub = rng.uniform_in(pair.nominal.input_box);
        const auto c = contraction_constraint(metric, pair.nominal, x, xb, ub);
        const Vector k = min_norm_feedback(metric, pair.nominal, x, xb, ub);
        const Vector o = kkt_qp(c.a, c.b);
        worst = std::max(worst, (k - o).norm() / std::max(1.0, o.norm()));
        active += c.b > 0.0;
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-8 && active > 0 && active < 1000 && secs < 5.0,
            "max relative gap " + fmt(worst, 3) + ", " + std::to_string(active) + "/1000 active, " + fmt(secs, 3) +
                " s"};
}

// ---------------------------------------------------------------- 6
double lattice_distance(const ContractionMetric& metric, const Vector& x, const Vector& y, double lo, double hi,
                        int cells, int reach = 5) {
    const double h = (hi - lo) / cells;
    const int side = cells + 1;
    auto coord = [&](int i, int j) {
        Vector p(2);
        p << lo + i * h, lo + j * h;
        return p;
    };
    std::vector<std::pair<int, int>> steps;
    for (int a = -reach; a <= reach; ++a)
        for (int b = -reach; b <= reach; ++b)
            if ((a || b) && std::gcd(std::abs(a), std::abs(b)) == 1) steps.emplace_back(a, b);
    auto len = [&](const Vector& p, const Vector& q) {
        const Vector d = q - p;
        auto f = [&](double s) { return std::sqrt(d.dot(metric.evaluate(p + s * d) * d)); };
        return (f(0.0) + 4.0 * f(0.5) + f(1.0)) / 6.0;
    };
    const int si = static_cast<int>(std::lround((x[0] - lo) / h)), sj = static_cast<int>(std::lround((x[1] - lo) / h));
    const int ti = static_cast<int>(std::lround((y[0] - lo) / h)), tj = static_cast<int>(std::lround((y[1] - lo) / h));
    std::vector<double> dist(static_cast<std::size_t>(side * side), kInf);
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[static_cast<std::size_t>(si * side + sj)] = 0.0;
    pq.push({0.0, si * side + sj});
    while (!pq.empty()) {
        const auto [d, u] = pq.top();
        pq.pop();
        if (d > dist[static_cast<std::size_t>(u)]) continue;
        const int i = u / side, j = u % side;
        if (i == ti && j == tj) return d;
        for (const auto& [a, b] : steps) {
            const int ni = i + a, nj = j + b;
            if (ni < 0 || nj < 0 || ni >= side || nj >= side) continue;
            const double nd = d + len(coord(i, j), coord(ni, nj));
            auto& slot = dist[static_cast<std::size_t>(ni * side + nj)];
            if (nd < slot) {
                slot = nd;
                pq.push({nd, ni * side + nj});
            }
        }
    }
    return kInf;
}

Verdict geodesics() {
    CounterRng rng(606);
    double closed_gap = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Matrix a(3, 3);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
        const Matrix m = a * a.transpose() + 0.1 * Matrix::Identity(3, 3);
        const auto metric = ContractionMetric::constant(m, 1.0);
        const Vector x = rng.normal_vector(3), y = rng.normal_vector(3);
        const Vector e = x - y;
        const double oracle = std::sqrt(e.dot(m * e));
        // both the shortcut for constant metrics and the curve optimizer
        GeodesicOptions iterative;
        iterative.exact_for_constant = false;
        for (const double d : {riemannian_distance(metric, x, y).distance, riemannian_distance(metric, x, y, iterative).distance})
            closed_gap = std::max(closed_gap, std::abs(d - oracle) / std::max(1.0, oracle));
    }
    // M(x) = diag(1 + x0^2, 1)
    Matrix c0 = Matrix::Identity(2, 2), c2 = Matrix::Zero(2, 2);
    c2(0, 0) = 1.0;
    const auto bumpy = ContractionMetric::polynomial({{{0, 0}, c0}, {{2, 0}, c2}}, 1.0, 10.0, 1.0);
    GeodesicOptions opt;
    opt.segments = 64;
    double lattice_gap = 0.0;
    for (const auto& [x, y] : std::vector<std::pair<Vector, Vector>>{
             {(Vector(2) << -1.5, 0.0).finished(), (Vector(2) << 1.5, 0.0).finished()},
             {(Vector(2) << -1.5, -1.0).finished(), (Vector(2) << 1.5, 1.0).finished()},
             {(Vector(2) << 0.0, -1.5).finished(), (Vector(2) << 1.5, 1.5).finished()}}) {
        const double lat = lattice_distance(bumpy, x, y, -2.0, 2.0, 120);
        lattice_gap = std::max(lattice_gap, std::abs(riemannian_distance(bumpy, x, y, opt).distance - lat) / lat);
    }
    return {closed_gap <= 1e-10 && lattice_gap <= 0.01,
            "closed-form gap " + fmt(closed_gap, 3) + ", lattice gap " + fmt(100.0 * lattice_gap, 3) + "%"};
}

// ---------------------------------------------------------------- 7
Verdict schur_soundness() {
    const fs::path d = fresh_dir("vtol_metric");
    Matrix m;
    try {
        Pipeline p(load_config(kSource / "configs/vtol_scenario.toml"), d, nullptr);
        p.run_until(Stage::metric);
        m = p.state().metric->constant_matrix();
    } catch (const std::exception& e) {
        return {false, std::string("metric stage error: ") + e.what()};
    }
    const Eigen::Index n = m.rows();
    const double r = 1.0;
    const Eigen::LLT<Matrix> llt(m);
    CounterRng rng(707);
    std::size_t outside = 0;
    double touch_gap = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const Eigen::Matrix2d s = schur_projection(m, i, j);
            // the plotted plane gets the full 10^4 samples, the rest 10^3 each
            const int samples = (i == 0 && j == 1) ? 10000 : 1000;
            for (int k = 0; k < samples; ++k) {
                const Vector xi = r * llt.matrixU().solve(rng.unit_ball(n));
                const Eigen::Vector2d p(xi[i], xi[j]);
                outside += p.dot(s * p) > r * r * (1.0 + 1e-10);
            }
            std::vector<Eigen::Index> rest;
            for (Eigen::Index k = 0; k < n; ++k)
                if (k != i && k != j) rest.push_back(k);
            const auto c = static_cast<Eigen::Index>(rest.size());
            Matrix mcc(c, c), mcp(c, 2);
            for (Eigen::Index a = 0; a < c; ++a) {
                mcp(a, 0) = m(rest[static_cast<std::size_t>(a)], i);
                mcp(a, 1) = m(rest[static_cast<std::size_t>(a)], j);
                for (Eigen::Index b = 0; b < c; ++b) mcc(a, b) = m(rest[static_cast<std::size_t>(a)], rest[static_cast<std::size_t>(b)]);
            }
            for (int k = 0; k < 100; ++k) {
                const Eigen::Vector2d dir = rng.normal_vector(2);
                const Eigen::Vector2d p = dir * (r / std::sqrt(dir.dot(s * dir)));
                const Vector rest_coords = -mcc.ldlt().solve(mcp * p);
                Vector xi(n);
                xi[i] = p[0];
                xi[j] = p[1];
                for (Eigen::Index a = 0; a < c; ++a) xi[rest[static_cast<std::size_t>(a)]] = rest_coords[a];
                touch_gap = std::max(touch_gap, std::abs(xi.dot(m * xi) - r * r));
            }
        }
    }
    return {outside == 0 && touch_gap <= 1e-6,
            std::to_string(outside) + " projected samples outside, boundary touch gap " + fmt(touch_gap, 3) +
                " (VTOL metric, all 15 planes)"};
}

// ---------------------------------------------------------------- 8
Verdict tightened_planning() {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path d = fresh_dir("plan");
    try {
        run_pipeline(load_config(kSource / "configs/threeD_plan.toml"), d, nullptr);
    } catch (const std::exception& e) {
        return {false, std::string("pipeline error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const auto rep = read_json(d / "planning" / "run_report.json");
    std::size_t n = 0, bad = 0;
    for (const auto& r : rep.at("rollouts")) {
        ++n;
        bad += !(r.at("state_ok").get<bool>() && r.at("input_ok").get<bool>());
    }
    const auto summary = read_json(d / "planning" / "manifest.json");
    const auto failed = summary.at("test").at("failed_plans").get<std::size_t>();
    const double frac = n ? static_cast<double>(bad) / static_cast<double>(n) : 1.0;
    const double ceiling = 0.05 + 2.0 * std::sqrt(0.05 * 0.95 / static_cast<double>(std::max<std::size_t>(n, 1)));
    return {n == 100 && failed == 0 && frac <= ceiling,
            "violations " + std::to_string(bad) + "/" + std::to_string(n) + " = " + fmt(frac) + " (ceiling " +
                fmt(ceiling) + "), " + std::to_string(failed) + " failed plans, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- 9
Verdict determinism() {
    const auto cfg = load_config(kSource / "configs/smoke.toml");
    const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
    try {
        run_pipeline(cfg, a, nullptr);
        run_pipeline(cfg, b, nullptr);
    } catch (const std::exception& e) {
        return {false, std::string("pipeline error: ") + e.what()};
    }
    const std::string ra = read_text(a / "report.json"), rb = read_text(b / "report.json");
    return {!ra.empty() && ra == rb, ra == rb ? "report.json identical (" + std::to_string(ra.size()) + " bytes)"
                                              : "report.json differs"};
}

}  // namespace

int main() {
    bool all = true;
    auto line = [&](int id, const Verdict& v) {
        std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
        all = all && v.pass;
    };
    auto guarded = [](const std::function<Verdict()>& f) -> Verdict {
        try {
            return f();
        } catch (const std::exception& e) {
            return {false, std::string("error: ") + e.what()};
        }
    };
    line(1, guarded(conformal_exactness));
    auto desk = desk_scale();
    line(2, desk.coverage);
    line(3, desk.envelope);
    if (desk.metric) {
        const ContractionMetric metric = *desk.metric;
        line(4, guarded([&] { return nominal_contraction(metric); }));
        line(5, guarded([&] { return qp_equivalence(metric); }));
    } else {
        line(4, {false, "no desk metric"});
        line(5, {false, "no desk metric"});
    }
    line(6, guarded(geodesics));
    line(7, guarded(schur_soundness));
    line(8, guarded(tightened_planning));
    line(9, guarded(determinism));
    return all ? 0 : 1;
}
