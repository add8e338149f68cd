// drrl: learn a GP model with MVR sampling, solve robust MDPs, evaluate
// policies under perturbations, and certify dual solvers.
//
// Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 certification failure.

#include "drrl/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool dry_run = false;
    std::string instances;
    std::vector<std::string> policies;
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "pipeline config JSON");
    cmd->add_option("--out", o.out, "output directory (overrides output_dir)");
    cmd->add_option("--seed", o.seed, "base seed (overrides seed)");
    cmd->add_flag("--dry-run", o.dry_run, "validate the config and print the stage plan");
}

drrl::PipelineConfig resolve(const Options& o) {
    drrl::PipelineConfig cfg = o.config.empty() ? drrl::parse_config(nlohmann::json::object())
                                                : drrl::load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.output_dir = o.out;
    return cfg;
}

int run_pipeline(const std::string& command, const Options& o) {
    const auto cfg = resolve(o);
    drrl::Pipeline p(cfg, cfg.output_dir, command);
    for (const auto& f : o.policies) p.add_policy_file(f);
    if (o.dry_run) {
        std::cout << "config ok, hash " << p.manifest().config_hash << "\n";
        for (const auto& line : p.plan(command)) std::cout << line << "\n";
        return 0;
    }
    if (command == "learn-model") p.learn_model();
    if (command == "solve-robust") p.solve_robust();
    if (command == "evaluate") p.evaluate();
    if (command == "info-gain") p.info_gain();
    const auto& m = p.finish();
    for (const auto& s : m.stages)
        std::cout << "stage " << s.name << (s.cached ? " cached" : " done") << " in " << s.seconds << " s\n";
    std::cout << "manifest: " << (p.out() / "manifest.json").string() << "\n";
    return 0;
}

int run_dro_check(const Options& o) {
    if (o.instances.empty()) throw drrl::ConfigError("dro-check: --instances is required");
    std::ifstream is(o.instances);
    if (!is) throw drrl::ConfigError("cannot open " + o.instances);
    const auto rows = drrl::dro_check(is);
    if (o.dry_run) {
        std::cout << rows.size() << " instances parsed\n";
        return 0;
    }
    const std::filesystem::path out = o.out.empty() ? "out" : o.out;
    std::ostringstream report;
    drrl::write_dro_check_csv(report, rows);
    drrl::write_file(out / "dro_check.csv", report.str());
    std::size_t failed = 0;
    for (const auto& r : rows) failed += r.pass ? 0 : 1;
    std::cout << rows.size() - failed << "/" << rows.size() << " instances certified -> "
              << (out / "dro_check.csv").string() << "\n";
    if (failed) throw drrl::CertificationError(std::to_string(failed) + " instance(s) failed certification");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distributionally robust model-based RL with GP models"};
    app.require_subcommand(1);
    Options o;

    auto* learn = app.add_subcommand("learn-model", "sample the simulator with MVR and fit the GP model");
    learn->alias("mvr");
    auto* solve = app.add_subcommand("solve-robust", "discretize the learned model and run robust value iteration");
    auto* eval = app.add_subcommand("evaluate", "roll out solved policies under the configured perturbations");
    auto* check = app.add_subcommand("dro-check", "certify dual worst-case values against primal oracles");
    auto* gain = app.add_subcommand("info-gain", "greedy information gain over the candidate pool");
    for (auto* c : {learn, solve, eval, check, gain}) add_common(c, o);
    eval->add_option("--policy", o.policies, "extra policy CSV files to evaluate");
    check->add_option("--instances", o.instances, "instance CSV: prob_0..,val_0..,divergence,rho");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (check->parsed()) return run_dro_check(o);
        for (auto* c : {learn, solve, eval, gain})
            if (c->parsed()) return run_pipeline(c->get_name(), o);
    } catch (const drrl::CertificationError& e) {
        std::cerr << "certification failure: " << e.what() << "\n";
        return 4;
    } catch (const drrl::ConvergenceError& e) {
        std::cerr << "numerical failure: " << e.what() << " (last residual " << e.residual() << ")\n";
        return 3;
    } catch (const drrl::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
