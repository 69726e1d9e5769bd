// Command-line front end over the staged pipeline.
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cct/cct.hpp"

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
    auto* opt = sub->add_option("--config", c.config, "experiment config (TOML)")->check(CLI::ExistingFile);
    if (config_required) opt->required();
    sub->add_option("--out", c.out, "artifact directory")->required();
    sub->add_option("--seed", c.seed, "override the config seed");
    sub->add_option("--workers", c.workers, "override the worker count");
}

cct::ExperimentConfig load(const Common& c) {
    auto cfg = cct::load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.workers) cfg.workers = *c.workers;
    return cfg;
}

void print_coverage_table(const nlohmann::json& ev) {
    auto num = [](const nlohmann::json& v) {
        std::ostringstream os;
        if (v.is_number_float()) os << std::fixed << std::setprecision(4) << v.get<double>();
        else os << v.dump();
        return os.str();
    };
    std::cout << "coverage summary\n";
    std::cout << std::left << std::setw(24) << "  rollouts" << num(ev["N"]) << '\n'
              << std::setw(24) << "  contained" << num(ev["contained"]) << '\n'
              << std::setw(24) << "  containment fraction" << num(ev["containment_fraction"]) << '\n'
              << std::setw(24) << "  score coverage" << num(ev["score_coverage"]) << '\n'
              << std::setw(24) << "  target (1 - alpha)" << num(ev["target"]) << '\n'
              << std::setw(24) << "  2-sigma floor" << num(ev["binomial_floor"]) << '\n'
              << std::setw(24) << "  tube radius" << num(ev["radius"]) << '\n'
              << std::setw(24) << "  max sup distance" << num(ev["max_sup_distance"]) << '\n'
              << std::setw(24) << "  envelope violations" << num(ev["envelope_violations"]) << '\n';
}

int run_stage(const Common& c, cct::Stage last) {
    cct::Pipeline p(load(c), c.out, &std::cerr);
    p.run_until(last);
    auto& st = p.state();
    if (last == cct::Stage::calibration || last == cct::Stage::report)
        if (st.calibration) std::cout << cct::calibration_summary(*st.calibration) << '\n';
    if (last == cct::Stage::evaluation) {
        print_coverage_table(st.summaries.at(cct::Stage::evaluation));
        std::cout << "per-rollout sup distances: " << (p.out() / "evaluation" / "sup_distances.csv").string() << '\n';
        const auto ellipse = p.out() / "tube" / "ellipse.csv";
        if (cct::fs::exists(ellipse)) std::cout << "tube ellipses: " << ellipse.string() << '\n';
    }
    if (last == cct::Stage::planning) std::cout << st.summaries.at(cct::Stage::planning).dump(2) << '\n';
    if (last == cct::Stage::report) {
        if (st.summaries.count(cct::Stage::evaluation)) print_coverage_table(st.summaries.at(cct::Stage::evaluation));
        std::cout << "report: " << (p.out() / "report.json").string() << '\n';
    }
    if (!p.all_passed()) {
        for (const auto& [s, ok] : st.passed)
            if (!ok) std::cerr << "validation failed: " << cct::to_string(s) << '\n';
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contraction-metric tracking with conformal tubes"};
    app.require_subcommand(1);
    Common c;
    std::string scores_file;
    double alpha = 0.05;

    struct Cmd {
        const char* name;
        const char* help;
        cct::Stage stage;
    };
    const Cmd cmds[] = {
        {"gen-data", "synthesize the metric, sample references, simulate training data", cct::Stage::train_data},
        {"train", "fit the uncertainty predictor", cct::Stage::predictor},
        {"calibrate", "closed-loop calibration scores and the conformal quantile", cct::Stage::calibration},
        {"tube", "tube radius, tightening margins and projected ellipses", cct::Stage::tube},
        {"plan", "two-step tightened planning scenario", cct::Stage::planning},
        {"evaluate", "test rollouts, coverage table and sup-distance CSV", cct::Stage::evaluation},
        {"pipeline", "all stages and report.json", cct::Stage::report},
    };
    std::map<CLI::App*, cct::Stage> stage_of;
    CLI::App* calibrate_cmd = nullptr;
    for (const auto& cmd : cmds) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        const bool is_cal = std::string(cmd.name) == "calibrate";
        add_common(sub, c, !is_cal);
        if (is_cal) {
            calibrate_cmd = sub;
            sub->add_option("--scores", scores_file, "calibrate a persisted score CSV instead of running stages")
                ->check(CLI::ExistingFile);
            sub->add_option("--alpha", alpha, "miscoverage level for --scores");
        }
        stage_of[sub] = cmd.stage;
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (auto& [sub, stage] : stage_of) {
            if (!sub->parsed()) continue;
            if (sub == calibrate_cmd && !scores_file.empty()) {
                if (!c.config.empty()) alpha = cct::load_config(c.config).alpha;
                const auto cal = cct::calibrate(cct::read_scores_csv(scores_file), alpha);
                cct::write_json(cct::fs::path(c.out) / "calibration.json", cct::to_json(cal));
                std::cout << cct::calibration_summary(cal) << '\n';
                return 0;
            }
            if (sub == calibrate_cmd && c.config.empty()) {
                std::cerr << "calibrate: --config or --scores is required\n";
                return 1;
            }
            return run_stage(c, stage);
        }
    } catch (const cct::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return 3;
    }
    return 1;
}
