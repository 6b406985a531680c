#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdopt/compressor.hpp"
#include "cdopt/engine.hpp"
#include "cdopt/errors.hpp"
#include "cdopt/graph.hpp"
#include "cdopt/rng.hpp"

namespace cdopt {

using nlohmann::json;

enum class ProblemKind { dlec, clec };

struct ProblemConfig {
    ProblemKind kind = ProblemKind::dlec;
    int n = 2, d = 1, q = 1;
    double mu = 1.0;
    std::uint64_t seed = 0;   // resolved
    std::string file;         // optional: load instance instead of generating
};

struct RunConfig {
    long max_iters = 1000;
    std::optional<double> target_residual;
    long record_every = 1;
    int replicates = 1;
    std::uint64_t master_seed = 0;
};

struct OutputConfig {
    std::string dir = "out";
    std::string trace_name = "trace";
};

enum class SweepAxis { none, compressors, kappas, seeds };

struct SweepConfig {
    SweepAxis axis = SweepAxis::none;
    std::vector<CompressorSpec> compressors;
    std::vector<double> kappas;
    std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
    GraphSpec graph;
    ProblemConfig problem;
    CompressorSpec compressor;
    bool steps_auto = true;
    StepSizes steps;
    InitSpec init;
    RunConfig run;
    OutputConfig output;
    SweepConfig sweep;

    // which seeds the document pinned itself (the rest derive from master)
    bool graph_seed_explicit = false;
    bool problem_seed_explicit = false;
    bool compressor_seed_explicit = false;

    // re-derive every non-explicit seed from a new master
    void rebase_master_seed(std::uint64_t master) {
        run.master_seed = master;
        if (!graph_seed_explicit) graph.seed = derive_stream(master, "graph");
        if (!problem_seed_explicit) problem.seed = derive_stream(master, "problem");
        if (!compressor_seed_explicit && compressor.kind == CompressorKind::stochastic_quantizer)
            compressor.seed = derive_stream(master, "compressor");
    }
};

namespace detail {

// Best-effort line anchor: first line containing the quoted key.
inline int find_key_line(const std::string& text, const std::string& key) {
    const std::string needle = "\"" + key + "\"";
    int line = 1;
    std::size_t pos = 0;
    std::size_t found = text.find(needle);
    if (found == std::string::npos) return 0;
    while (pos < found) {
        if (text[pos] == '\n') ++line;
        ++pos;
    }
    return line;
}

inline int line_of_byte(const std::string& text, std::size_t byte) {
    int line = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i)
        if (text[i] == '\n') ++line;
    return line;
}

struct ConfigReader {
    const json& root;
    const std::string& text;

    [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
        const auto dot = path.rfind('.');
        const std::string leaf = dot == std::string::npos ? path : path.substr(dot + 1);
        const int line = find_key_line(text, leaf);
        std::ostringstream os;
        os << "config error at '" << path << "'";
        if (line > 0) os << " (line " << line << ")";
        os << ": " << msg;
        throw ConfigError(os.str(), path, line);
    }

    const json* find(const json& obj, const std::string& key) const {
        auto it = obj.find(key);
        return it == obj.end() ? nullptr : &*it;
    }

    const json& require(const json& obj, const std::string& path, const std::string& key) const {
        const json* v = find(obj, key);
        if (v == nullptr) fail(path + "." + key, "missing required key");
        return *v;
    }

    std::string get_string(const json& obj, const std::string& path, const std::string& key) const {
        const json& v = require(obj, path, key);
        if (!v.is_string()) fail(path + "." + key, "expected a string");
        return v.get<std::string>();
    }

    double get_number(const json& obj, const std::string& path, const std::string& key) const {
        const json& v = require(obj, path, key);
        if (!v.is_number()) fail(path + "." + key, "expected a number");
        return v.get<double>();
    }

    long get_integer(const json& obj, const std::string& path, const std::string& key) const {
        const json& v = require(obj, path, key);
        if (!v.is_number_integer()) fail(path + "." + key, "expected an integer");
        return v.get<long>();
    }

    template <class T>
    T opt(const json& obj, const std::string& key, T fallback) const {
        const json* v = find(obj, key);
        return v == nullptr ? fallback : v->get<T>();
    }
};

inline CompressorSpec parse_compressor(const ConfigReader& r, const json& obj,
                                       const std::string& path) {
    if (!obj.is_object()) r.fail(path, "expected an object");
    CompressorSpec c;
    const std::string kind = r.get_string(obj, path, "kind");
    try {
        c.kind = compressor_kind_from_string(kind);
    } catch (const InvalidSpec& e) {
        r.fail(path + ".kind", e.what());
    }
    c.kappa0 = r.opt<double>(obj, "kappa0", 0.5);
    c.k = r.opt<int>(obj, "k", 1);
    c.levels = r.opt<int>(obj, "levels", 16);
    c.theta0 = r.opt<double>(obj, "theta0", 1.0);
    c.rho = r.opt<double>(obj, "rho", 0.97);
    c.factor = r.opt<double>(obj, "factor", 1.0);
    c.seed = r.opt<std::uint64_t>(obj, "seed", 0);
    if (!(c.kappa0 > 0.0)) r.fail(path + ".kappa0", "must be > 0");
    return c;
}

}  // namespace detail

inline json compressor_to_json(const CompressorSpec& c) {
    json j;
    j["kind"] = to_string(c.kind);
    j["kappa0"] = c.kappa0;
    switch (c.kind) {
        case CompressorKind::top_k: j["k"] = c.k; break;
        case CompressorKind::norm_quantizer: j["levels"] = c.levels; break;
        case CompressorKind::stochastic_quantizer:
            j["levels"] = c.levels;
            j["seed"] = c.seed;
            break;
        case CompressorKind::event_triggered:
            j["theta0"] = c.theta0;
            j["rho"] = c.rho;
            break;
        case CompressorKind::scaled_identity: j["factor"] = c.factor; break;
        default: break;
    }
    return j;
}

// Parses and validates a config document; all seeds come out resolved.
// Throws ConfigError with a key path and line anchor on any problem.
inline ExperimentConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error (line " +
                              std::to_string(detail::line_of_byte(text, e.byte)) + "): " + e.what(),
                          "", detail::line_of_byte(text, e.byte));
    }
    if (!root.is_object()) throw ConfigError("config root must be an object");

    detail::ConfigReader r{root, text};
    ExperimentConfig cfg;

    // run block first: master_seed anchors every derived stream
    const json& run = r.require(root, "", "run");
    cfg.run.max_iters = r.get_integer(run, "run", "max_iters");
    if (cfg.run.max_iters < 1) r.fail("run.max_iters", "must be >= 1");
    if (const json* t = r.find(run, "target_residual")) cfg.run.target_residual = t->get<double>();
    cfg.run.record_every = r.opt<long>(run, "record_every", 1);
    if (cfg.run.record_every < 1) r.fail("run.record_every", "must be >= 1");
    cfg.run.replicates = r.opt<int>(run, "replicates", 1);
    if (cfg.run.replicates < 1) r.fail("run.replicates", "must be >= 1");
    if (r.find(run, "master_seed") == nullptr)
        r.fail("run.master_seed", "missing required key (all runs are seeded)");
    cfg.run.master_seed = run.at("master_seed").get<std::uint64_t>();

    // problem
    const json& prob = r.require(root, "", "problem");
    const std::string pk = r.get_string(prob, "problem", "kind");
    if (pk == "dlec")
        cfg.problem.kind = ProblemKind::dlec;
    else if (pk == "clec")
        cfg.problem.kind = ProblemKind::clec;
    else
        r.fail("problem.kind", "must be 'dlec' or 'clec'");
    cfg.problem.file = r.opt<std::string>(prob, "file", "");
    if (cfg.problem.file.empty()) {
        cfg.problem.n = static_cast<int>(r.get_integer(prob, "problem", "n"));
        cfg.problem.d = static_cast<int>(r.get_integer(prob, "problem", "d"));
        cfg.problem.q = static_cast<int>(r.get_integer(prob, "problem", "q"));
        cfg.problem.mu = r.get_number(prob, "problem", "mu");
        if (cfg.problem.n < 2) r.fail("problem.n", "must be >= 2");
        if (cfg.problem.d < 1) r.fail("problem.d", "must be >= 1");
        if (cfg.problem.q < 1 || cfg.problem.q > cfg.problem.d)
            r.fail("problem.q", "must satisfy 1 <= q <= d");
        if (!(cfg.problem.mu > 0)) r.fail("problem.mu", "must be > 0");
    }
    cfg.problem_seed_explicit = r.find(prob, "seed") != nullptr;
    cfg.problem.seed = r.opt<std::uint64_t>(prob, "seed",
                                            derive_stream(cfg.run.master_seed, "problem"));

    // graph
    const json& gr = r.require(root, "", "graph");
    const std::string gk = r.get_string(gr, "graph", "kind");
    if (gk == "ring")
        cfg.graph.kind = GraphKind::ring;
    else if (gk == "complete")
        cfg.graph.kind = GraphKind::complete;
    else if (gk == "star")
        cfg.graph.kind = GraphKind::star;
    else if (gk == "erdos_renyi")
        cfg.graph.kind = GraphKind::erdos_renyi;
    else
        r.fail("graph.kind", "must be one of ring|complete|star|erdos_renyi");
    cfg.graph.n = r.opt<int>(gr, "n", cfg.problem.n);
    if (cfg.problem.file.empty() && cfg.graph.n != cfg.problem.n)
        r.fail("graph.n", "must match problem.n");
    cfg.graph.p = r.opt<double>(gr, "p", 0.5);
    const std::string wr = r.opt<std::string>(gr, "weight_rule", "unit");
    if (wr == "unit")
        cfg.graph.weight_rule = WeightRule::unit;
    else if (wr == "uniform")
        cfg.graph.weight_rule = WeightRule::uniform;
    else
        r.fail("graph.weight_rule", "must be 'unit' or 'uniform'");
    cfg.graph_seed_explicit = r.find(gr, "seed") != nullptr;
    cfg.graph.seed = r.opt<std::uint64_t>(gr, "seed", derive_stream(cfg.run.master_seed, "graph"));

    // compressor
    const json& comp_obj = r.require(root, "", "compressor");
    cfg.compressor = detail::parse_compressor(r, comp_obj, "compressor");
    cfg.compressor_seed_explicit = r.find(comp_obj, "seed") != nullptr;
    if (cfg.compressor.kind == CompressorKind::stochastic_quantizer && !cfg.compressor_seed_explicit)
        cfg.compressor.seed = derive_stream(cfg.run.master_seed, "compressor");

    // steps
    const json& st = r.require(root, "", "steps");
    if (st.is_string()) {
        if (st.get<std::string>() != "auto") r.fail("steps", "must be 'auto' or an object");
        cfg.steps_auto = true;
    } else if (st.is_object()) {
        cfg.steps_auto = false;
        cfg.steps.kappa = r.get_number(st, "steps", "kappa");
        cfg.steps.eta = r.get_number(st, "steps", "eta");
        cfg.steps.kappa0 = r.opt<double>(st, "kappa0", cfg.compressor.kappa0);
        try {
            cfg.steps.validate();
        } catch (const InvalidSpec& e) {
            r.fail("steps", e.what());
        }
    } else {
        r.fail("steps", "must be 'auto' or an object");
    }

    // init
    if (const json* in = r.find(root, "init")) {
        const std::string mode = r.get_string(*in, "init", "mode");
        if (mode == "zeros")
            cfg.init.mode = InitMode::zeros;
        else if (mode == "gaussian")
            cfg.init.mode = InitMode::gaussian;
        else if (mode == "certificate")
            cfg.init.mode = InitMode::certificate;
        else
            r.fail("init.mode", "must be zeros|gaussian|certificate");
        cfg.init.scale = r.opt<double>(*in, "scale", 1.0);
    }

    // output
    if (const json* out = r.find(root, "output")) {
        cfg.output.dir = r.opt<std::string>(*out, "dir", "out");
        cfg.output.trace_name = r.opt<std::string>(*out, "trace_name", "trace");
    }

    // sweep (optional; exactly one axis when present)
    if (const json* sw = r.find(root, "sweep")) {
        int axes = 0;
        if (const json* cs = r.find(*sw, "compressors")) {
            ++axes;
            cfg.sweep.axis = SweepAxis::compressors;
            if (!cs->is_array() || cs->empty()) r.fail("sweep.compressors", "must be a non-empty array");
            for (const auto& item : *cs)
                cfg.sweep.compressors.push_back(detail::parse_compressor(r, item, "sweep.compressors"));
        }
        if (const json* ks = r.find(*sw, "kappas")) {
            ++axes;
            cfg.sweep.axis = SweepAxis::kappas;
            if (!ks->is_array() || ks->empty()) r.fail("sweep.kappas", "must be a non-empty array");
            for (const auto& item : *ks) cfg.sweep.kappas.push_back(item.get<double>());
        }
        if (const json* ss = r.find(*sw, "seeds")) {
            ++axes;
            cfg.sweep.axis = SweepAxis::seeds;
            if (!ss->is_array() || ss->empty()) r.fail("sweep.seeds", "must be a non-empty array");
            for (const auto& item : *ss) cfg.sweep.seeds.push_back(item.get<std::uint64_t>());
        }
        if (axes != 1) r.fail("sweep", "exactly one of compressors|kappas|seeds required");
    }

    return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

// Fully resolved round-trip form; embedded in trace CSV headers.
inline json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["graph"] = {{"kind", cfg.graph.kind == GraphKind::ring       ? "ring"
                           : cfg.graph.kind == GraphKind::complete ? "complete"
                           : cfg.graph.kind == GraphKind::star     ? "star"
                                                                   : "erdos_renyi"},
                  {"n", cfg.graph.n},
                  {"p", cfg.graph.p},
                  {"weight_rule", cfg.graph.weight_rule == WeightRule::unit ? "unit" : "uniform"},
                  {"seed", cfg.graph.seed}};
    j["problem"] = {{"kind", cfg.problem.kind == ProblemKind::dlec ? "dlec" : "clec"},
                    {"n", cfg.problem.n},
                    {"d", cfg.problem.d},
                    {"q", cfg.problem.q},
                    {"mu", cfg.problem.mu},
                    {"seed", cfg.problem.seed}};
    if (!cfg.problem.file.empty()) j["problem"]["file"] = cfg.problem.file;
    j["compressor"] = compressor_to_json(cfg.compressor);
    if (cfg.steps_auto)
        j["steps"] = "auto";
    else
        j["steps"] = {{"kappa", cfg.steps.kappa}, {"kappa0", cfg.steps.kappa0}, {"eta", cfg.steps.eta}};
    j["init"] = {{"mode", cfg.init.mode == InitMode::zeros      ? "zeros"
                          : cfg.init.mode == InitMode::gaussian ? "gaussian"
                                                                : "certificate"},
                 {"scale", cfg.init.scale}};
    j["run"] = {{"max_iters", cfg.run.max_iters},
                {"record_every", cfg.run.record_every},
                {"replicates", cfg.run.replicates},
                {"master_seed", cfg.run.master_seed}};
    if (cfg.run.target_residual.has_value()) j["run"]["target_residual"] = *cfg.run.target_residual;
    j["output"] = {{"dir", cfg.output.dir}, {"trace_name", cfg.output.trace_name}};
    return j;
}

// ---------------------------------------------------------------------------
// Problem instance (de)serialization: self-describing, row-major matrices.
// ---------------------------------------------------------------------------

namespace detail {

inline json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (int r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
    const int rows = static_cast<int>(j.size());
    const int cols = rows > 0 ? static_cast<int>(j.at(0).size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
    return m;
}

inline json vector_to_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (int i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
    Eigen::VectorXd v(static_cast<int>(j.size()));
    for (int i = 0; i < v.size(); ++i) v(i) = j.at(i).get<double>();
    return v;
}

}  // namespace detail

inline json instance_to_json(const ProblemData& p, const std::string& kind) {
    json j;
    j["type"] = kind + "_problem";
    j["n"] = p.n;
    j["d"] = p.d;
    j["q"] = p.q;
    j["mu"] = p.mu;
    j["seed"] = p.seed;
    j["witness"] = detail::vector_to_json(p.witness);
    json objs = json::array();
    for (const auto& f : p.objectives)
        objs.push_back({{"Q", detail::matrix_to_json(f.Q)}, {"c", detail::vector_to_json(f.c)}});
    j["objectives"] = objs;
    json cons = json::array();
    for (int i = 0; i < p.n; ++i)
        cons.push_back({{"A", detail::matrix_to_json(p.A[i])}, {"b", detail::vector_to_json(p.b[i])}});
    j["constraints"] = cons;
    return j;
}

inline void instance_from_json(const json& j, ProblemData& p) {
    p.n = j.at("n").get<int>();
    p.d = j.at("d").get<int>();
    p.q = j.at("q").get<int>();
    p.mu = j.at("mu").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.witness = detail::vector_from_json(j.at("witness"));
    p.objectives.clear();
    for (const auto& o : j.at("objectives")) {
        QuadraticObjective f;
        f.Q = detail::matrix_from_json(o.at("Q"));
        f.c = detail::vector_from_json(o.at("c"));
        p.objectives.push_back(std::move(f));
    }
    p.A.clear();
    p.b.clear();
    for (const auto& c : j.at("constraints")) {
        p.A.push_back(detail::matrix_from_json(c.at("A")));
        p.b.push_back(detail::vector_from_json(c.at("b")));
    }
}

}  // namespace cdopt
