// Command-line front end: config-driven runs, sweeps, compressor
// certification, oracle dumps, and instance export.
//
// Exit codes: 0 success, 1 invalid config/spec, 2 diverged run,
//             3 step-size tuning failed, 4 degenerate instance.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdopt/cdopt.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed_override;
    bool quiet = false;
};

cdopt::ExperimentConfig load_and_override(const CommonOpts& opts) {
    cdopt::ExperimentConfig cfg = cdopt::load_config_file(opts.config_path);
    if (opts.seed_override) cfg.rebase_master_seed(*opts.seed_override);
    if (!opts.out_dir.empty()) cfg.output.dir = opts.out_dir;
    return cfg;
}

int map_error_to_exit(const std::exception& e) {
    if (dynamic_cast<const cdopt::EngineDiverged*>(&e)) return 2;
    if (dynamic_cast<const cdopt::TuningFailed*>(&e)) return 3;
    if (dynamic_cast<const cdopt::DegenerateInstance*>(&e)) return 4;
    return 1;
}

int cmd_run(const CommonOpts& opts) {
    auto cfg = load_and_override(opts);
    auto result = cdopt::run_experiment(cfg);
    if (!opts.quiet) {
        std::cout << "rounds: " << result.rounds << "\n"
                  << "final residual_sq: " << cdopt::format_double(result.final_residual_sq) << "\n";
        if (result.rate)
            std::cout << "beta_hat: " << cdopt::format_double(result.rate->beta_hat)
                      << "  r^2: " << cdopt::format_double(result.rate->r_squared) << "\n";
        for (const auto& p : result.trace_paths) std::cout << "trace: " << p << "\n";
        std::cout << "report: " << result.report_path << "\n";
    }
    return 0;
}

int cmd_sweep(const CommonOpts& opts) {
    auto cfg = load_and_override(opts);
    auto result = cdopt::run_sweep(cfg);
    if (!opts.quiet) {
        for (std::size_t i = 0; i < result.cells.size(); ++i) {
            const auto& c = result.cells[i];
            std::cout << "cell " << i << " [" << c.label << "]: " << (c.ok ? "ok" : c.error) << "\n";
        }
        std::cout << "summary: " << result.summary_path << "\n";
    }
    return result.successes > 0 ? 0 : 2;
}

int cmd_oracle(const CommonOpts& opts) {
    auto cfg = load_and_override(opts);
    auto setup = cdopt::prepare_experiment(cfg);

    double residual = 0.0;
    if (setup.dlec)
        residual = cdopt::check_kkt(*setup.dlec, setup.spectral.laplacian, setup.cert);
    else
        residual = cdopt::check_kkt(*setup.clec, setup.spectral.laplacian, setup.cert);

    cdopt::json dump;
    dump["eta"] = setup.cert.eta;
    dump["x_star"] = cdopt::detail::vector_to_json(setup.cert.x_star);
    dump["nu_star"] = cdopt::detail::vector_to_json(setup.cert.nu_star);
    dump["lambda_star"] = cdopt::detail::vector_to_json(setup.cert.lambda_star);
    if (setup.cert.z_star.size() > 0)
        dump["z_star"] = cdopt::detail::vector_to_json(setup.cert.z_star);
    dump["kkt_residual"] = residual;

    const auto path = std::filesystem::path(cfg.output.dir) / "certificate.json";
    cdopt::write_text_file(path.string(), dump.dump(2) + "\n");
    if (!opts.quiet) {
        std::cout << "x_star:";
        for (int i = 0; i < setup.cert.x_star.size(); ++i)
            std::cout << " " << cdopt::format_double(setup.cert.x_star(i));
        std::cout << "\nkkt residual: " << cdopt::format_double(residual) << "\n"
                  << "certificate: " << path.string() << "\n";
    }
    return 0;
}

int cmd_dump_instance(const CommonOpts& opts) {
    auto cfg = load_and_override(opts);
    auto setup = cdopt::prepare_experiment(cfg);
    cdopt::json j = setup.dlec ? cdopt::instance_to_json(*setup.dlec, "dlec")
                               : cdopt::instance_to_json(*setup.clec, "clec");
    const auto path = std::filesystem::path(cfg.output.dir) / "instance.json";
    cdopt::write_text_file(path.string(), j.dump(2) + "\n");
    if (!opts.quiet) std::cout << "instance: " << path.string() << "\n";
    return 0;
}

struct VerifyOpts {
    std::string spec_path;
    std::string name;
    std::string dims = "4,8";
    long horizon = 400;
    int trials = 20;
    std::uint64_t seed = 1;
    double kappa0 = -1.0;
    int k = 1;
    int levels = 16;
    double factor = 1.0;
    std::string out_dir = "out";
    bool quiet = false;
};

int cmd_verify_compressor(const VerifyOpts& v) {
    cdopt::CompressorSpec spec;
    if (!v.spec_path.empty()) {
        std::ifstream in(v.spec_path);
        if (!in) throw cdopt::ConfigError("cannot open compressor spec: " + v.spec_path);
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        cdopt::json j;
        try {
            j = cdopt::json::parse(text);
        } catch (const cdopt::json::parse_error& e) {
            throw cdopt::ConfigError(std::string("compressor spec parse error: ") + e.what());
        }
        spec.kind = cdopt::compressor_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("kappa0")) spec.kappa0 = j["kappa0"].get<double>();
        if (j.contains("k")) spec.k = j["k"].get<int>();
        if (j.contains("levels")) spec.levels = j["levels"].get<int>();
        if (j.contains("theta0")) spec.theta0 = j["theta0"].get<double>();
        if (j.contains("rho")) spec.rho = j["rho"].get<double>();
        if (j.contains("factor")) spec.factor = j["factor"].get<double>();
        if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
    } else if (!v.name.empty()) {
        spec.kind = cdopt::compressor_kind_from_string(v.name);
        spec.k = v.k;
        spec.levels = v.levels;
        spec.factor = v.factor;
        spec.seed = v.seed;
    } else {
        throw cdopt::ConfigError("verify-compressor needs --config or --name");
    }
    if (v.kappa0 > 0) spec.kappa0 = v.kappa0;

    std::vector<int> dims;
    std::stringstream ss(v.dims);
    std::string tok;
    while (std::getline(ss, tok, ',')) dims.push_back(std::stoi(tok));
    if (dims.empty()) throw cdopt::ConfigError("verify-compressor: empty --dims");

    auto outcome = cdopt::verify_compressor_report(spec, dims, v.horizon, v.trials, v.seed);
    const auto path = std::filesystem::path(v.out_dir) /
                      ("contract_" + cdopt::to_string(spec.kind) + ".json");
    cdopt::write_text_file(path.string(), outcome.report.dump(2) + "\n");
    if (!v.quiet) {
        for (const auto& r : outcome.report["results"])
            std::cout << "dim " << r["dim"] << ": gamma_hat=" << r["gamma_hat"].get<double>()
                      << " l_c_hat=" << r["l_c_hat"].get<double>()
                      << (r["pass"].get<bool>() ? " pass" : " FAIL") << "\n";
        std::cout << "report: " << path.string() << "\n";
    }
    return outcome.all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"compressed distributed constrained-optimization simulator"};
    app.require_subcommand(1);

    CommonOpts run_opts, sweep_opts, oracle_opts, dump_opts;
    VerifyOpts verify_opts;

    auto add_common = [](CLI::App* sub, CommonOpts& o) {
        sub->add_option("--config", o.config_path, "experiment config (JSON)")->required();
        sub->add_option("--out", o.out_dir, "override output directory");
        sub->add_option("--seed", o.seed_override, "override run.master_seed");
        sub->add_flag("--quiet", o.quiet, "suppress progress output");
    };

    add_common(app.add_subcommand("run", "run one experiment"), run_opts);
    add_common(app.add_subcommand("sweep", "run a one-axis sweep"), sweep_opts);
    add_common(app.add_subcommand("oracle", "print/dump the exact certificate"), oracle_opts);
    add_common(app.add_subcommand("dump-instance", "export the generated instance"), dump_opts);

    auto* vc = app.add_subcommand("verify-compressor", "certify compressor contract properties");
    vc->add_option("--config", verify_opts.spec_path, "compressor spec (JSON)");
    vc->add_option("--name", verify_opts.name, "built-in kind name");
    vc->add_option("--dims", verify_opts.dims, "comma-separated dimensions (default 4,8)");
    vc->add_option("--horizon", verify_opts.horizon, "error-system rounds (>=100)");
    vc->add_option("--trials", verify_opts.trials, "random starts (>=10)");
    vc->add_option("--seed", verify_opts.seed, "verification seed");
    vc->add_option("--kappa0", verify_opts.kappa0, "override filter step");
    vc->add_option("--k", verify_opts.k, "top_k parameter");
    vc->add_option("--levels", verify_opts.levels, "quantizer levels");
    vc->add_option("--factor", verify_opts.factor, "scaled_identity factor");
    vc->add_option("--out", verify_opts.out_dir, "output directory");
    vc->add_flag("--quiet", verify_opts.quiet, "suppress progress output");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("run")) return cmd_run(run_opts);
        if (app.got_subcommand("sweep")) return cmd_sweep(sweep_opts);
        if (app.got_subcommand("oracle")) return cmd_oracle(oracle_opts);
        if (app.got_subcommand("dump-instance")) return cmd_dump_instance(dump_opts);
        if (app.got_subcommand("verify-compressor")) return cmd_verify_compressor(verify_opts);
    } catch (const cdopt::EngineDiverged& e) {
        std::cerr << "error: " << e.what() << " (partial trace retained)\n";
        return 2;
    } catch (const cdopt::TuningFailed& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const cdopt::DegenerateInstance& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
