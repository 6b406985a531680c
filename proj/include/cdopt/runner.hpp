#pragma once

// Experiment orchestration shared by the CLI and the test suites: build the
// graph and instance from a config, compute the oracle certificate, tune or
// adopt step sizes, execute seeded replicate runs, and emit CSV traces plus
// a plain-text rate/conservation report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cdopt/config.hpp"
#include "cdopt/engine.hpp"
#include "cdopt/metrics.hpp"
#include "cdopt/problem.hpp"

namespace cdopt {

struct ExperimentSetup {
    WeightedGraph graph;
    SpectralData spectral;
    std::optional<DlecProblem> dlec;
    std::optional<ClecProblem> clec;
    OptimalityCertificate cert;
    StepSizes steps;

    bool coupled() const { return clec.has_value(); }
};

inline ExperimentSetup prepare_experiment(const ExperimentConfig& cfg) {
    ExperimentSetup s;
    s.graph = build_graph(cfg.graph);
    s.spectral = spectral(s.graph);

    if (cfg.problem.kind == ProblemKind::dlec) {
        DlecProblem p;
        if (!cfg.problem.file.empty()) {
            std::ifstream in(cfg.problem.file);
            if (!in) throw ConfigError("cannot open instance file: " + cfg.problem.file);
            json j = json::parse(in);
            instance_from_json(j, p);
        } else {
            p = generate_dlec(cfg.problem.seed, cfg.problem.n, cfg.problem.d, cfg.problem.q,
                              cfg.problem.mu);
        }
        s.dlec = std::move(p);
    } else {
        ClecProblem p;
        if (!cfg.problem.file.empty()) {
            std::ifstream in(cfg.problem.file);
            if (!in) throw ConfigError("cannot open instance file: " + cfg.problem.file);
            json j = json::parse(in);
            instance_from_json(j, p);
        } else {
            p = generate_clec(cfg.problem.seed, cfg.problem.n, cfg.problem.d, cfg.problem.q,
                              cfg.problem.mu);
        }
        s.clec = std::move(p);
    }

    if (cfg.steps_auto) {
        if (s.dlec)
            s.steps = tune_steps(*s.dlec, s.graph, s.spectral, cfg.compressor, cfg.run.master_seed);
        else
            s.steps = tune_steps(*s.clec, s.graph, s.spectral, cfg.compressor, cfg.run.master_seed);
    } else {
        s.steps = cfg.steps;
    }

    if (s.dlec)
        s.cert = kkt_oracle_dlec(*s.dlec, s.spectral.laplacian, s.steps.eta);
    else
        s.cert = kkt_oracle_clec(*s.clec, s.spectral.laplacian, s.steps.eta);
    return s;
}

// ---------------------------------------------------------------------------
// Trace CSV: fixed column order, '#'-prefixed header lines embedding the
// resolved config and seeds, %.17g doubles so reruns are byte-identical.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string trace_csv_text(const RunTrace& trace) {
    std::string out;
    for (const auto& [key, value] : trace.metadata) out += "# " + key + ": " + value + "\n";
    out +=
        "k,residual_sq,feas_norm,coupled_feas_norm,consensus_perp,consensus_par,"
        "sum_lambda_drift,sum_z_drift,comm_entries_cum,comm_bits_cum\n";
    auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    for (const auto& row : trace.rows) {
        out += std::to_string(row.k) + "," + cell(row.residual_sq) + "," + cell(row.feas_norm) +
               "," + cell(row.coupled_feas_norm) + "," + cell(row.consensus_perp) + "," +
               cell(row.consensus_par) + "," + cell(row.sum_lambda_drift) + "," +
               cell(row.sum_z_drift) + "," + std::to_string(row.comm_entries_cum) + "," +
               std::to_string(row.comm_bits_cum) + "\n";
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write file: " + path);
    out << text;
}

struct ExperimentResult {
    ExperimentConfig config;
    ExperimentSetup setup;
    std::vector<RunTrace> traces;
    std::optional<RateReport> rate;
    ConservationSummary conservation;
    double final_residual_sq = std::numeric_limits<double>::quiet_NaN();
    long rounds = 0;
    std::vector<std::string> trace_paths;
    std::string report_path;
};

namespace detail {

inline void fill_metadata(RunTrace& trace, const ExperimentConfig& cfg, std::uint64_t engine_seed,
                          const StepSizes& steps, int replicate) {
    trace.metadata["config"] = config_to_json(cfg).dump();
    trace.metadata["engine_seed"] = std::to_string(engine_seed);
    trace.metadata["graph_seed"] = std::to_string(cfg.graph.seed);
    trace.metadata["problem_seed"] = std::to_string(cfg.problem.seed);
    trace.metadata["master_seed"] = std::to_string(cfg.run.master_seed);
    trace.metadata["replicate"] = std::to_string(replicate);
    trace.metadata["steps"] = "kappa=" + format_double(steps.kappa) +
                              " kappa0=" + format_double(steps.kappa0) +
                              " eta=" + format_double(steps.eta);
}

}  // namespace detail

// Runs all replicates of a configured experiment. When write_files is set,
// emits one CSV per replicate plus a report; on divergence the partial trace
// is written before the error propagates.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_files = true) {
    ExperimentResult result;
    result.config = cfg;
    result.setup = prepare_experiment(cfg);
    ExperimentSetup& s = result.setup;

    RunOptions opts;
    opts.max_iters = cfg.run.max_iters;
    opts.target_residual = cfg.run.target_residual;
    opts.record_every = cfg.run.record_every;
    RecordContext ctx{&s.spectral, &s.cert};

    const std::filesystem::path outdir(cfg.output.dir);
    for (int rep = 0; rep < cfg.run.replicates; ++rep) {
        const std::uint64_t engine_seed =
            derive_stream(cfg.run.master_seed, "replicate/" + std::to_string(rep));
        const std::string name = cfg.run.replicates == 1
                                     ? cfg.output.trace_name + ".csv"
                                     : cfg.output.trace_name + "_r" + std::to_string(rep) + ".csv";
        const std::string path = (outdir / name).string();

        RunTrace trace;
        try {
            if (s.dlec) {
                EngineDE eng = init_de(*s.dlec, s.graph, cfg.compressor, s.steps, cfg.init,
                                       engine_seed, &s.cert);
                trace = run(eng, opts, ctx);
            } else {
                EngineCE eng = init_ce(*s.clec, s.graph, cfg.compressor, s.steps, cfg.init,
                                       engine_seed, &s.cert);
                trace = run(eng, opts, ctx);
            }
        } catch (EngineDiverged& e) {
            detail::fill_metadata(e.partial, cfg, engine_seed, s.steps, rep);
            e.partial.metadata["diverged_at_round"] = std::to_string(e.round);
            if (write_files) write_text_file(path, trace_csv_text(e.partial));
            throw;
        }
        detail::fill_metadata(trace, cfg, engine_seed, s.steps, rep);
        if (write_files) {
            write_text_file(path, trace_csv_text(trace));
            result.trace_paths.push_back(path);
        }
        result.traces.push_back(std::move(trace));
    }

    const RunTrace& last = result.traces.back();
    result.rounds = last.rows.back().k;
    if (last.rows.back().residual_sq) result.final_residual_sq = *last.rows.back().residual_sq;

    for (const auto& t : result.traces) {
        auto c = conservation_check(t);
        result.conservation.max_lambda_drift =
            std::max(result.conservation.max_lambda_drift, c.max_lambda_drift);
        result.conservation.max_z_drift = std::max(result.conservation.max_z_drift, c.max_z_drift);
        result.conservation.has_z |= c.has_z;
    }

    try {
        const RunTrace fit_input =
            result.traces.size() > 1 ? median_trace(result.traces) : result.traces.front();
        result.rate = fit_linear_rate(fit_input);
    } catch (const InsufficientData&) {
        result.rate.reset();
    }

    if (write_files) {
        std::string rep = "run report\n";
        rep += "config: " + config_to_json(cfg).dump() + "\n";
        rep += "steps.kappa: " + format_double(s.steps.kappa) + "\n";
        rep += "steps.kappa0: " + format_double(s.steps.kappa0) + "\n";
        rep += "steps.eta: " + format_double(s.steps.eta) + "\n";
        rep += "rounds: " + std::to_string(result.rounds) + "\n";
        rep += "final_residual_sq: " + format_double(result.final_residual_sq) + "\n";
        if (result.rate) {
            rep += "beta_hat: " + format_double(result.rate->beta_hat) + "\n";
            rep += "r_squared: " + format_double(result.rate->r_squared) + "\n";
            rep += "fit_window: [" + std::to_string(result.rate->window_lo) + ", " +
                   std::to_string(result.rate->window_hi) + "]\n";
            rep += std::string("floor_detected: ") + (result.rate->floor_detected ? "true" : "false") +
                   "\n";
        } else {
            rep += "beta_hat: unavailable (insufficient usable rounds)\n";
        }
        rep += "max_lambda_drift: " + format_double(result.conservation.max_lambda_drift) + "\n";
        if (result.conservation.has_z)
            rep += "max_z_drift: " + format_double(result.conservation.max_z_drift) + "\n";
        rep += "comm_entries_cum: " + std::to_string(last.rows.back().comm_entries_cum) + "\n";
        rep += "comm_bits_cum: " + std::to_string(last.rows.back().comm_bits_cum) + "\n";
        result.report_path = (outdir / (cfg.output.trace_name + "_report.txt")).string();
        write_text_file(result.report_path, rep);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Sweeps: one axis (compressor kinds, kappa grid, or seeds), one cell per
// value, plus a deterministic summary CSV. Cell failures are recorded, not
// fatal.
// ---------------------------------------------------------------------------

struct SweepCell {
    std::string label;
    bool ok = false;
    std::string error;
    std::optional<RateReport> rate;
    double final_residual_sq = std::numeric_limits<double>::quiet_NaN();
    std::optional<CommSavings> savings;  // vs identity cell, compressor axis only
    RunTrace trace;
};

struct SweepResult {
    std::vector<SweepCell> cells;
    std::string summary_path;
    int successes = 0;
};

inline SweepResult run_sweep(const ExperimentConfig& cfg, bool write_files = true) {
    if (cfg.sweep.axis == SweepAxis::none)
        throw ConfigError("sweep requested but config has no sweep axis", "sweep");

    std::vector<ExperimentConfig> cells;
    std::vector<std::string> labels;
    switch (cfg.sweep.axis) {
        case SweepAxis::compressors:
            for (const auto& comp : cfg.sweep.compressors) {
                ExperimentConfig c = cfg;
                c.compressor = comp;
                if (comp.kind == CompressorKind::stochastic_quantizer && comp.seed == 0)
                    c.compressor.seed = derive_stream(cfg.run.master_seed, "compressor");
                cells.push_back(c);
                labels.push_back(to_string(comp.kind));
            }
            break;
        case SweepAxis::kappas:
            for (double kappa : cfg.sweep.kappas) {
                ExperimentConfig c = cfg;
                c.steps_auto = false;
                if (cfg.steps_auto) c.steps = StepSizes{};
                c.steps.kappa = kappa;
                c.steps.kappa0 = cfg.compressor.kappa0;
                if (c.steps.eta <= 0) c.steps.eta = 1.0;
                cells.push_back(c);
                labels.push_back("kappa=" + format_double(kappa));
            }
            break;
        case SweepAxis::seeds:
            for (std::uint64_t seed : cfg.sweep.seeds) {
                ExperimentConfig c = cfg;
                c.rebase_master_seed(seed);
                cells.push_back(c);
                labels.push_back("seed=" + std::to_string(seed));
            }
            break;
        default:
            break;
    }

    SweepResult result;
    std::optional<std::size_t> identity_cell;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        ExperimentConfig c = cells[i];
        c.output.dir = (std::filesystem::path(cfg.output.dir) / ("cell_" + std::to_string(i))).string();
        SweepCell cell;
        cell.label = labels[i];
        try {
            auto res = run_experiment(c, write_files);
            cell.ok = true;
            cell.rate = res.rate;
            cell.final_residual_sq = res.final_residual_sq;
            cell.trace = res.traces.front();
            ++result.successes;
            if (cfg.sweep.axis == SweepAxis::compressors &&
                cells[i].compressor.kind == CompressorKind::identity && !identity_cell)
                identity_cell = i;
        } catch (const Error& e) {
            cell.error = e.what();
        }
        result.cells.push_back(std::move(cell));
    }

    if (identity_cell) {
        const RunTrace& base = result.cells[*identity_cell].trace;
        for (auto& cell : result.cells) {
            if (!cell.ok) continue;
            try {
                cell.savings = comm_savings(cell.trace, base);
            } catch (const IncomparableTraces&) {
                cell.savings.reset();
            }
        }
    }

    if (write_files) {
        std::string csv =
            "cell,label,status,beta_hat,r_squared,final_residual_sq,comm_entries_ratio,comm_bits_"
            "ratio\n";
        for (std::size_t i = 0; i < result.cells.size(); ++i) {
            const auto& cell = result.cells[i];
            csv += std::to_string(i) + "," + cell.label + "," + (cell.ok ? "ok" : "failed") + ",";
            csv += (cell.rate ? format_double(cell.rate->beta_hat) : std::string()) + ",";
            csv += (cell.rate ? format_double(cell.rate->r_squared) : std::string()) + ",";
            csv += (cell.ok ? format_double(cell.final_residual_sq) : std::string()) + ",";
            csv += (cell.savings ? format_double(cell.savings->entries_ratio) : std::string()) + ",";
            csv += (cell.savings ? format_double(cell.savings->bits_ratio) : std::string()) + "\n";
        }
        result.summary_path = (std::filesystem::path(cfg.output.dir) / "sweep_summary.csv").string();
        write_text_file(result.summary_path, csv);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Compressor certification report (structured JSON file).
// ---------------------------------------------------------------------------

struct VerifyOutcome {
    json report;
    bool all_pass = true;
};

inline VerifyOutcome verify_compressor_report(const CompressorSpec& spec,
                                              const std::vector<int>& dims, long horizon,
                                              int trials, std::uint64_t seed) {
    VerifyOutcome out;
    out.report["compressor"] = compressor_to_json(spec);
    out.report["horizon"] = horizon;
    out.report["trials"] = trials;
    out.report["seed"] = seed;
    json per_dim = json::array();
    for (int d : dims) {
        auto rep = verify_st_contract(spec, d, horizon, trials, derive_stream(seed, "verify/" + std::to_string(d)));
        json r;
        r["dim"] = d;
        r["l_c_hat"] = rep.l_c_hat;
        r["gamma_hat"] = rep.gamma_hat;
        r["pass"] = rep.pass;
        if (!rep.note.empty()) r["note"] = rep.note;
        per_dim.push_back(r);
        out.all_pass = out.all_pass && rep.pass;
    }
    out.report["results"] = per_dim;
    out.report["pass"] = out.all_pass;
    return out;
}

}  // namespace cdopt
