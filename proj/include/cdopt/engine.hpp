#pragma once

// Synchronized-round multi-agent engines for the two compressed saddle-point
// iterations: "DE" solves the per-agent-constraint problem, "CE" the
// coupled-constraint reformulation. Only compressor payloads cross agent
// boundaries: every agent keeps filter states (sigma) for what it transmits
// and mirrors of each neighbor's filters, advanced by the identical public
// recursion on received payloads, so reconstruction never drifts.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdopt/compressor.hpp"
#include "cdopt/errors.hpp"
#include "cdopt/graph.hpp"
#include "cdopt/metrics.hpp"
#include "cdopt/problem.hpp"

namespace cdopt {

struct StepSizes {
    double kappa = 0.05;   // algorithm step
    double kappa0 = 0.5;   // filter step
    double eta = 1.0;      // objective weight

    void validate() const {
        if (!(kappa > 0.0) || !(kappa0 > 0.0) || !(eta > 0.0))
            throw InvalidSpec("steps: kappa, kappa0, eta must all be > 0");
    }
};

enum class InitMode { zeros, gaussian, certificate };

struct InitSpec {
    InitMode mode = InitMode::zeros;
    double scale = 1.0;  // gaussian mode only
};

// Wire accounting. Sizes come from each actual transmission, so
// event-triggered silence shows up as zero entries.
struct CommLedger {
    long long cum_entries = 0;
    long long cum_bits = 0;
    long long round_entries = 0;
    long long round_bits = 0;
    Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic> edge_entries;

    void init(int n) { edge_entries = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>::Zero(n, n); }
    void begin_round() { round_entries = round_bits = 0; }
    void add(int from, int to, long entries, long bits) {
        round_entries += entries;
        round_bits += bits;
        cum_entries += entries;
        cum_bits += bits;
        edge_entries(from, to) += entries;
    }
};

struct EngineDiverged : Error {
    long round;
    RunTrace partial;
    explicit EngineDiverged(long r)
        : Error("engine diverged at round " + std::to_string(r)), round(r) {}
};

namespace detail {

constexpr double kDivergenceGuard = 1e12;

inline Eigen::VectorXd random_block(std::uint64_t master, const std::string& label, int dim,
                                    double scale) {
    Xoshiro256ss rng(derive_stream(master, label));
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v(i) = scale * rng.normal();
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DE: per-agent equality constraints, transmitted variables x and lambda.
// ---------------------------------------------------------------------------

struct NeighborLinkDE {
    int j = -1;
    double lij = 0.0;  // Laplacian off-diagonal, -a_ij
    Eigen::VectorXd mirror_sigma_x;
    Eigen::VectorXd mirror_sigma_lambda;
};

struct AgentDE {
    int id = -1;
    double lii = 0.0;  // Laplacian diagonal

    // local problem data
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    Eigen::MatrixXd Q;
    Eigen::VectorXd c;

    // states
    Eigen::VectorXd x, nu, lambda;
    Eigen::VectorXd sigma_x, sigma_lambda;

    CompressorStream comp_x, comp_lambda;
    std::vector<NeighborLinkDE> links;
};

// One agent's phase-2 update. Reads nothing but its own state and the
// payloads from its neighborhood (aligned with links); mirrors advance by
// the same public recursion the owners use.
inline void advance_agent_de(AgentDE& a, const Payload& own_x, const Payload& own_l,
                             const std::vector<const Payload*>& nbr_x,
                             const std::vector<const Payload*>& nbr_l, const StepSizes& s) {
    Eigen::VectorXd sum_x = a.lii * (a.sigma_x + own_x.value);
    Eigen::VectorXd sum_l = a.lii * (a.sigma_lambda + own_l.value);
    for (std::size_t m = 0; m < a.links.size(); ++m) {
        const auto& link = a.links[m];
        sum_x += link.lij * (link.mirror_sigma_x + nbr_x[m]->value);
        sum_l += link.lij * (link.mirror_sigma_lambda + nbr_l[m]->value);
    }

    const Eigen::VectorXd resid = a.A * a.x - a.b;
    const Eigen::VectorXd x_next =
        a.x - s.kappa * (sum_x + a.A.transpose() * a.nu + sum_l + s.eta * (a.Q * a.x + a.c) +
                         a.A.transpose() * resid);
    const Eigen::VectorXd nu_next = a.nu + s.kappa * resid;
    const Eigen::VectorXd lambda_next = a.lambda + s.kappa * sum_x;

    a.x = x_next;
    a.nu = nu_next;
    a.lambda = lambda_next;
    a.sigma_x += s.kappa0 * own_x.value;
    a.sigma_lambda += s.kappa0 * own_l.value;
    for (std::size_t m = 0; m < a.links.size(); ++m) {
        a.links[m].mirror_sigma_x += s.kappa0 * nbr_x[m]->value;
        a.links[m].mirror_sigma_lambda += s.kappa0 * nbr_l[m]->value;
    }
}

class EngineDE {
public:
    DlecProblem problem;
    StepSizes steps;
    std::vector<AgentDE> agents;
    CommLedger comm;

    long round() const { return round_; }

    // One synchronized round: phase 1 produces every payload, phase 2
    // advances every agent from its local view.
    void step() {
        const int n = problem.n;
        pay_x_.resize(n);
        pay_l_.resize(n);
        for (int i = 0; i < n; ++i) {
            pay_x_[i] = agents[i].comp_x(agents[i].x - agents[i].sigma_x);
            pay_l_[i] = agents[i].comp_lambda(agents[i].lambda - agents[i].sigma_lambda);
        }
        comm.begin_round();
        for (int i = 0; i < n; ++i)
            for (const auto& link : agents[i].links)
                comm.add(i, link.j, pay_x_[i].entries + pay_l_[i].entries,
                         pay_x_[i].bits + pay_l_[i].bits);

        std::vector<const Payload*> nbr_x, nbr_l;
        for (int i = 0; i < n; ++i) {
            nbr_x.clear();
            nbr_l.clear();
            for (const auto& link : agents[i].links) {
                nbr_x.push_back(&pay_x_[link.j]);
                nbr_l.push_back(&pay_l_[link.j]);
            }
            advance_agent_de(agents[i], pay_x_[i], pay_l_[i], nbr_x, nbr_l, steps);
        }
        ++round_;
        check_finite();
    }

    Eigen::VectorXd stacked_x() const { return stack([](const AgentDE& a) { return a.x; }, problem.d); }
    Eigen::VectorXd stacked_lambda() const {
        return stack([](const AgentDE& a) { return a.lambda; }, problem.d);
    }
    Eigen::VectorXd stacked_nu() const { return stack([](const AgentDE& a) { return a.nu; }, problem.q); }

    Eigen::VectorXd sum_lambda() const {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(problem.d);
        for (const auto& a : agents) s += a.lambda;
        return s;
    }

    Eigen::VectorXd sum_lambda0;  // conserved reference captured at init

    static constexpr bool coupled = false;

private:
    long round_ = 0;
    std::vector<Payload> pay_x_, pay_l_;

    template <class F>
    Eigen::VectorXd stack(F field, int dim) const {
        Eigen::VectorXd v(problem.n * dim);
        for (int i = 0; i < problem.n; ++i) v.segment(i * dim, dim) = field(agents[i]);
        return v;
    }

    void check_finite() const {
        for (const auto& a : agents) {
            const bool bad = !a.x.allFinite() || !a.nu.allFinite() || !a.lambda.allFinite() ||
                             a.x.norm() > detail::kDivergenceGuard ||
                             a.nu.norm() > detail::kDivergenceGuard ||
                             a.lambda.norm() > detail::kDivergenceGuard;
            if (bad) throw EngineDiverged(round_);
        }
    }
};

// ---------------------------------------------------------------------------
// CE: coupled constraints; z joins the state, nu and z join the wire.
// ---------------------------------------------------------------------------

struct NeighborLinkCE {
    int j = -1;
    double lij = 0.0;
    Eigen::VectorXd mirror_sigma_x;
    Eigen::VectorXd mirror_sigma_lambda;
    Eigen::VectorXd mirror_sigma_z;
    Eigen::VectorXd mirror_sigma_nu;
};

struct AgentCE {
    int id = -1;
    double lii = 0.0;

    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    Eigen::MatrixXd Q;
    Eigen::VectorXd c;

    Eigen::VectorXd x, nu, lambda, z;
    Eigen::VectorXd sigma_x, sigma_lambda, sigma_z, sigma_nu;

    CompressorStream comp_x, comp_lambda, comp_z, comp_nu;
    std::vector<NeighborLinkCE> links;
};

inline void advance_agent_ce(AgentCE& a, const Payload& own_x, const Payload& own_l,
                             const Payload& own_z, const Payload& own_n,
                             const std::vector<const Payload*>& nbr_x,
                             const std::vector<const Payload*>& nbr_l,
                             const std::vector<const Payload*>& nbr_z,
                             const std::vector<const Payload*>& nbr_n, const StepSizes& s) {
    Eigen::VectorXd sum_x = a.lii * (a.sigma_x + own_x.value);
    Eigen::VectorXd sum_l = a.lii * (a.sigma_lambda + own_l.value);
    Eigen::VectorXd sum_z = a.lii * (a.sigma_z + own_z.value);
    Eigen::VectorXd sum_n = a.lii * (a.sigma_nu + own_n.value);
    for (std::size_t m = 0; m < a.links.size(); ++m) {
        const auto& link = a.links[m];
        sum_x += link.lij * (link.mirror_sigma_x + nbr_x[m]->value);
        sum_l += link.lij * (link.mirror_sigma_lambda + nbr_l[m]->value);
        sum_z += link.lij * (link.mirror_sigma_z + nbr_z[m]->value);
        sum_n += link.lij * (link.mirror_sigma_nu + nbr_n[m]->value);
    }

    const Eigen::VectorXd resid = a.A * a.x - a.b;
    const Eigen::VectorXd x_next =
        a.x - s.kappa * (sum_x + a.A.transpose() * a.nu + sum_l + s.eta * (a.Q * a.x + a.c) +
                         a.A.transpose() * resid);
    const Eigen::VectorXd nu_next = a.nu + s.kappa * (resid + sum_z);
    const Eigen::VectorXd lambda_next = a.lambda + s.kappa * sum_x;
    const Eigen::VectorXd z_next = a.z - s.kappa * sum_n;

    a.x = x_next;
    a.nu = nu_next;
    a.lambda = lambda_next;
    a.z = z_next;
    a.sigma_x += s.kappa0 * own_x.value;
    a.sigma_lambda += s.kappa0 * own_l.value;
    a.sigma_z += s.kappa0 * own_z.value;
    a.sigma_nu += s.kappa0 * own_n.value;
    for (std::size_t m = 0; m < a.links.size(); ++m) {
        a.links[m].mirror_sigma_x += s.kappa0 * nbr_x[m]->value;
        a.links[m].mirror_sigma_lambda += s.kappa0 * nbr_l[m]->value;
        a.links[m].mirror_sigma_z += s.kappa0 * nbr_z[m]->value;
        a.links[m].mirror_sigma_nu += s.kappa0 * nbr_n[m]->value;
    }
}

class EngineCE {
public:
    ClecProblem problem;
    StepSizes steps;
    std::vector<AgentCE> agents;
    CommLedger comm;

    long round() const { return round_; }

    void step() {
        const int n = problem.n;
        pay_x_.resize(n);
        pay_l_.resize(n);
        pay_z_.resize(n);
        pay_n_.resize(n);
        for (int i = 0; i < n; ++i) {
            pay_x_[i] = agents[i].comp_x(agents[i].x - agents[i].sigma_x);
            pay_l_[i] = agents[i].comp_lambda(agents[i].lambda - agents[i].sigma_lambda);
            pay_z_[i] = agents[i].comp_z(agents[i].z - agents[i].sigma_z);
            pay_n_[i] = agents[i].comp_nu(agents[i].nu - agents[i].sigma_nu);
        }
        comm.begin_round();
        for (int i = 0; i < n; ++i)
            for (const auto& link : agents[i].links)
                comm.add(i, link.j,
                         pay_x_[i].entries + pay_l_[i].entries + pay_z_[i].entries + pay_n_[i].entries,
                         pay_x_[i].bits + pay_l_[i].bits + pay_z_[i].bits + pay_n_[i].bits);

        std::vector<const Payload*> nbr_x, nbr_l, nbr_z, nbr_n;
        for (int i = 0; i < n; ++i) {
            nbr_x.clear();
            nbr_l.clear();
            nbr_z.clear();
            nbr_n.clear();
            for (const auto& link : agents[i].links) {
                nbr_x.push_back(&pay_x_[link.j]);
                nbr_l.push_back(&pay_l_[link.j]);
                nbr_z.push_back(&pay_z_[link.j]);
                nbr_n.push_back(&pay_n_[link.j]);
            }
            advance_agent_ce(agents[i], pay_x_[i], pay_l_[i], pay_z_[i], pay_n_[i], nbr_x, nbr_l,
                             nbr_z, nbr_n, steps);
        }
        ++round_;
        check_finite();
    }

    Eigen::VectorXd stacked_x() const { return stack([](const AgentCE& a) { return a.x; }, problem.d); }
    Eigen::VectorXd stacked_lambda() const {
        return stack([](const AgentCE& a) { return a.lambda; }, problem.d);
    }
    Eigen::VectorXd stacked_nu() const { return stack([](const AgentCE& a) { return a.nu; }, problem.q); }
    Eigen::VectorXd stacked_z() const { return stack([](const AgentCE& a) { return a.z; }, problem.q); }

    Eigen::VectorXd sum_lambda() const {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(problem.d);
        for (const auto& a : agents) s += a.lambda;
        return s;
    }
    Eigen::VectorXd sum_z() const {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(problem.q);
        for (const auto& a : agents) s += a.z;
        return s;
    }

    Eigen::VectorXd sum_lambda0;
    Eigen::VectorXd sum_z0;

    static constexpr bool coupled = true;

private:
    long round_ = 0;
    std::vector<Payload> pay_x_, pay_l_, pay_z_, pay_n_;

    template <class F>
    Eigen::VectorXd stack(F field, int dim) const {
        Eigen::VectorXd v(problem.n * dim);
        for (int i = 0; i < problem.n; ++i) v.segment(i * dim, dim) = field(agents[i]);
        return v;
    }

    void check_finite() const {
        for (const auto& a : agents) {
            const bool bad = !a.x.allFinite() || !a.nu.allFinite() || !a.lambda.allFinite() ||
                             !a.z.allFinite() || a.x.norm() > detail::kDivergenceGuard ||
                             a.nu.norm() > detail::kDivergenceGuard ||
                             a.lambda.norm() > detail::kDivergenceGuard ||
                             a.z.norm() > detail::kDivergenceGuard;
            if (bad) throw EngineDiverged(round_);
        }
    }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline void require_contract(const CompressorSpec& comp, int dim, std::uint64_t master) {
    validate_compressor(comp, dim);
    auto rep = verify_st_contract(comp, dim, 250, 10, derive_stream(master, "engine/contract"));
    if (!rep.pass)
        throw CompressorRejected("compressor failed its contract check at kappa0=" +
                                 std::to_string(comp.kappa0) +
                                 " (gamma_hat=" + std::to_string(rep.gamma_hat) + ")");
}

template <class Problem>
inline void check_instance_shapes(const Problem& p) {
    if (p.n < 2) throw InvalidSpec("engine: need n >= 2 agents");
    if (static_cast<int>(p.objectives.size()) != p.n || static_cast<int>(p.A.size()) != p.n ||
        static_cast<int>(p.b.size()) != p.n)
        throw InvalidSpec("engine: per-agent data sized inconsistently with n");
    for (int i = 0; i < p.n; ++i) {
        if (p.A[i].rows() != p.q || p.A[i].cols() != p.d || p.b[i].size() != p.q ||
            p.objectives[i].Q.rows() != p.d || p.objectives[i].Q.cols() != p.d ||
            p.objectives[i].c.size() != p.d)
            throw InvalidSpec("engine: agent " + std::to_string(i) + " has mismatched shapes");
    }
}

}  // namespace detail

inline EngineDE init_de(const DlecProblem& p, const WeightedGraph& g, const CompressorSpec& comp,
                        const StepSizes& steps, const InitSpec& init, std::uint64_t master_seed,
                        const OptimalityCertificate* cert = nullptr) {
    detail::check_instance_shapes(p);
    if (g.n != p.n) throw InvalidSpec("init_de: graph and problem disagree on n");
    steps.validate();
    detail::require_contract(comp, p.d, master_seed);
    if (init.mode == InitMode::certificate) {
        if (cert == nullptr) throw InvalidSpec("init_de: certificate init needs a certificate");
        if (cert->x_star.size() != p.d || cert->nu_star.size() != p.n * p.q ||
            cert->lambda_star.size() != p.n * p.d)
            throw InvalidSpec("init_de: certificate dimensions do not match the problem");
    }

    EngineDE eng;
    eng.problem = p;
    eng.steps = steps;
    eng.agents.resize(p.n);
    eng.comm.init(p.n);

    const Eigen::MatrixXd adj = g.adjacency();
    for (int i = 0; i < p.n; ++i) {
        AgentDE& a = eng.agents[i];
        a.id = i;
        a.A = p.A[i];
        a.b = p.b[i];
        a.Q = p.objectives[i].Q;
        a.c = p.objectives[i].c;
        a.lii = adj.row(i).sum();

        const std::string tag = "/agent/" + std::to_string(i);
        a.comp_x = make_stream(comp, p.d, master_seed, "comp/x" + tag);
        a.comp_lambda = make_stream(comp, p.d, master_seed, "comp/lambda" + tag);

        switch (init.mode) {
            case InitMode::zeros:
                a.x = Eigen::VectorXd::Zero(p.d);
                a.nu = Eigen::VectorXd::Zero(p.q);
                a.lambda = Eigen::VectorXd::Zero(p.d);
                break;
            case InitMode::gaussian:
                a.x = detail::random_block(master_seed, "init/x" + tag, p.d, init.scale);
                a.nu = detail::random_block(master_seed, "init/nu" + tag, p.q, init.scale);
                a.lambda = detail::random_block(master_seed, "init/lambda" + tag, p.d, init.scale);
                break;
            case InitMode::certificate:
                a.x = cert->x_star;
                a.nu = cert->nu_star.segment(i * p.q, p.q);
                a.lambda = cert->lambda_star.segment(i * p.d, p.d);
                break;
        }
        // filters start at a publicly known value: the transmitted variable
        // itself for certificate init, zero otherwise
        a.sigma_x = init.mode == InitMode::certificate ? a.x : Eigen::VectorXd::Zero(p.d);
        a.sigma_lambda = init.mode == InitMode::certificate ? a.lambda : Eigen::VectorXd::Zero(p.d);

        for (int j = 0; j < p.n; ++j) {
            if (j == i || adj(i, j) == 0.0) continue;
            NeighborLinkDE link;
            link.j = j;
            link.lij = -adj(i, j);
            if (init.mode == InitMode::certificate) {
                link.mirror_sigma_x = cert->x_star;
                link.mirror_sigma_lambda = cert->lambda_star.segment(j * p.d, p.d);
            } else {
                link.mirror_sigma_x = Eigen::VectorXd::Zero(p.d);
                link.mirror_sigma_lambda = Eigen::VectorXd::Zero(p.d);
            }
            a.links.push_back(std::move(link));
        }
    }
    eng.sum_lambda0 = eng.sum_lambda();
    return eng;
}

inline EngineCE init_ce(const ClecProblem& p, const WeightedGraph& g, const CompressorSpec& comp,
                        const StepSizes& steps, const InitSpec& init, std::uint64_t master_seed,
                        const OptimalityCertificate* cert = nullptr) {
    detail::check_instance_shapes(p);
    if (g.n != p.n) throw InvalidSpec("init_ce: graph and problem disagree on n");
    steps.validate();
    detail::require_contract(comp, p.d, master_seed);
    if (p.q != p.d) detail::require_contract(comp, p.q, master_seed);
    if (init.mode == InitMode::certificate) {
        if (cert == nullptr) throw InvalidSpec("init_ce: certificate init needs a certificate");
        if (cert->x_star.size() != p.d || cert->nu_star.size() != p.n * p.q ||
            cert->lambda_star.size() != p.n * p.d || cert->z_star.size() != p.n * p.q)
            throw InvalidSpec("init_ce: certificate dimensions do not match the problem");
    }

    EngineCE eng;
    eng.problem = p;
    eng.steps = steps;
    eng.agents.resize(p.n);
    eng.comm.init(p.n);

    const Eigen::MatrixXd adj = g.adjacency();
    for (int i = 0; i < p.n; ++i) {
        AgentCE& a = eng.agents[i];
        a.id = i;
        a.A = p.A[i];
        a.b = p.b[i];
        a.Q = p.objectives[i].Q;
        a.c = p.objectives[i].c;
        a.lii = adj.row(i).sum();

        const std::string tag = "/agent/" + std::to_string(i);
        a.comp_x = make_stream(comp, p.d, master_seed, "comp/x" + tag);
        a.comp_lambda = make_stream(comp, p.d, master_seed, "comp/lambda" + tag);
        a.comp_z = make_stream(comp, p.q, master_seed, "comp/z" + tag);
        a.comp_nu = make_stream(comp, p.q, master_seed, "comp/nu" + tag);

        switch (init.mode) {
            case InitMode::zeros:
                a.x = Eigen::VectorXd::Zero(p.d);
                a.nu = Eigen::VectorXd::Zero(p.q);
                a.lambda = Eigen::VectorXd::Zero(p.d);
                a.z = Eigen::VectorXd::Zero(p.q);
                break;
            case InitMode::gaussian:
                a.x = detail::random_block(master_seed, "init/x" + tag, p.d, init.scale);
                a.nu = detail::random_block(master_seed, "init/nu" + tag, p.q, init.scale);
                a.lambda = detail::random_block(master_seed, "init/lambda" + tag, p.d, init.scale);
                a.z = detail::random_block(master_seed, "init/z" + tag, p.q, init.scale);
                break;
            case InitMode::certificate:
                a.x = cert->x_star;
                a.nu = cert->nu_star.segment(i * p.q, p.q);
                a.lambda = cert->lambda_star.segment(i * p.d, p.d);
                a.z = cert->z_star.segment(i * p.q, p.q);
                break;
        }
        const bool at_cert = init.mode == InitMode::certificate;
        a.sigma_x = at_cert ? a.x : Eigen::VectorXd::Zero(p.d);
        a.sigma_lambda = at_cert ? a.lambda : Eigen::VectorXd::Zero(p.d);
        a.sigma_z = at_cert ? a.z : Eigen::VectorXd::Zero(p.q);
        a.sigma_nu = at_cert ? a.nu : Eigen::VectorXd::Zero(p.q);

        for (int j = 0; j < p.n; ++j) {
            if (j == i || adj(i, j) == 0.0) continue;
            NeighborLinkCE link;
            link.j = j;
            link.lij = -adj(i, j);
            if (at_cert) {
                link.mirror_sigma_x = cert->x_star;
                link.mirror_sigma_lambda = cert->lambda_star.segment(j * p.d, p.d);
                link.mirror_sigma_z = cert->z_star.segment(j * p.q, p.q);
                link.mirror_sigma_nu = cert->nu_star.segment(j * p.q, p.q);
            } else {
                link.mirror_sigma_x = Eigen::VectorXd::Zero(p.d);
                link.mirror_sigma_lambda = Eigen::VectorXd::Zero(p.d);
                link.mirror_sigma_z = Eigen::VectorXd::Zero(p.q);
                link.mirror_sigma_nu = Eigen::VectorXd::Zero(p.q);
            }
            a.links.push_back(std::move(link));
        }
    }
    eng.sum_lambda0 = eng.sum_lambda();
    eng.sum_z0 = eng.sum_z();
    return eng;
}

// ---------------------------------------------------------------------------
// Uncompressed baselines (stacked form); with the identity compressor the
// distributed engines must reproduce these trajectories.
// ---------------------------------------------------------------------------

struct BaselineDE {
    DlecProblem problem;
    Eigen::MatrixXd lap;
    StepSizes steps;
    Eigen::VectorXd x, nu, lambda;  // stacked

    void step() {
        const int d = problem.d;
        const Eigen::VectorXd sum_x = laplacian_kron_apply(lap, x, d);
        const Eigen::VectorXd sum_l = laplacian_kron_apply(lap, lambda, d);
        const Eigen::VectorXd resid = problem.constraint_residual(x);
        Eigen::VectorXd drive = sum_x + sum_l + steps.eta * problem.grad_stacked(x);
        for (int i = 0; i < problem.n; ++i)
            drive.segment(i * d, d) +=
                problem.A[i].transpose() * (nu.segment(i * problem.q, problem.q) + resid.segment(i * problem.q, problem.q));
        x -= steps.kappa * drive;
        nu += steps.kappa * resid;
        lambda += steps.kappa * sum_x;
    }
};

struct BaselineCE {
    ClecProblem problem;
    Eigen::MatrixXd lap;
    StepSizes steps;
    Eigen::VectorXd x, nu, lambda, z;

    void step() {
        const int d = problem.d, q = problem.q;
        const Eigen::VectorXd sum_x = laplacian_kron_apply(lap, x, d);
        const Eigen::VectorXd sum_l = laplacian_kron_apply(lap, lambda, d);
        const Eigen::VectorXd sum_z = laplacian_kron_apply(lap, z, q);
        const Eigen::VectorXd sum_n = laplacian_kron_apply(lap, nu, q);
        const Eigen::VectorXd resid = problem.constraint_residual(x);
        Eigen::VectorXd drive = sum_x + sum_l + steps.eta * problem.grad_stacked(x);
        for (int i = 0; i < problem.n; ++i)
            drive.segment(i * d, d) +=
                problem.A[i].transpose() * (nu.segment(i * q, q) + resid.segment(i * q, q));
        x -= steps.kappa * drive;
        nu += steps.kappa * (resid + sum_z);
        lambda += steps.kappa * sum_x;
        z -= steps.kappa * sum_n;
    }
};

inline BaselineDE baseline_de(const DlecProblem& p, const WeightedGraph& g, const StepSizes& s) {
    BaselineDE b;
    b.problem = p;
    b.lap = laplacian(g);
    b.steps = s;
    b.x = Eigen::VectorXd::Zero(p.n * p.d);
    b.nu = Eigen::VectorXd::Zero(p.n * p.q);
    b.lambda = Eigen::VectorXd::Zero(p.n * p.d);
    return b;
}

inline BaselineCE baseline_ce(const ClecProblem& p, const WeightedGraph& g, const StepSizes& s) {
    BaselineCE b;
    b.problem = p;
    b.lap = laplacian(g);
    b.steps = s;
    b.x = Eigen::VectorXd::Zero(p.n * p.d);
    b.nu = Eigen::VectorXd::Zero(p.n * p.q);
    b.lambda = Eigen::VectorXd::Zero(p.n * p.d);
    b.z = Eigen::VectorXd::Zero(p.n * p.q);
    return b;
}

// ---------------------------------------------------------------------------
// Exact linearization of the uncompressed baselines. Quadratic objectives
// make the error dynamics linear, so the stable range of the explicit
// update x_{k+1} = x_k + kappa * T x_k is computable from eig(T): each
// eigenvalue needs kappa < -2 Re(mu) / |mu|^2.
// ---------------------------------------------------------------------------

namespace detail {

template <class Problem>
inline void fill_common_blocks(const Problem& p, const Eigen::MatrixXd& lap, double eta,
                               Eigen::MatrixXd& T, int off_nu, int off_lambda) {
    const int n = p.n, d = p.d, q = p.q;
    Eigen::MatrixXd Ld = laplacian_kron(lap, d);
    Eigen::MatrixXd Ab = Eigen::MatrixXd::Zero(n * q, n * d);
    Eigen::MatrixXd Qb = Eigen::MatrixXd::Zero(n * d, n * d);
    for (int i = 0; i < n; ++i) {
        Ab.block(i * q, i * d, q, d) = p.A[i];
        Qb.block(i * d, i * d, d, d) = p.objectives[i].Q;
    }
    T.block(0, 0, n * d, n * d) = -(Ld + Ab.transpose() * Ab + eta * Qb);
    T.block(0, off_nu, n * d, n * q) = -Ab.transpose();
    T.block(0, off_lambda, n * d, n * d) = -Ld;
    T.block(off_nu, 0, n * q, n * d) = Ab;
    T.block(off_lambda, 0, n * d, n * d) = Ld;
}

}  // namespace detail

inline Eigen::MatrixXd baseline_transition_de(const DlecProblem& p, const Eigen::MatrixXd& lap,
                                              double eta) {
    const int n = p.n, d = p.d, q = p.q;
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(2 * n * d + n * q, 2 * n * d + n * q);
    detail::fill_common_blocks(p, lap, eta, T, n * d, n * d + n * q);
    return T;
}

inline Eigen::MatrixXd baseline_transition_ce(const ClecProblem& p, const Eigen::MatrixXd& lap,
                                              double eta) {
    const int n = p.n, d = p.d, q = p.q;
    const int off_nu = n * d, off_lambda = n * d + n * q, off_z = 2 * n * d + n * q;
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(2 * n * d + 2 * n * q, 2 * n * d + 2 * n * q);
    detail::fill_common_blocks(p, lap, eta, T, off_nu, off_lambda);
    Eigen::MatrixXd Lq = laplacian_kron(lap, q);
    T.block(off_nu, off_z, n * q, n * q) = Lq;
    T.block(off_z, off_nu, n * q, n * q) = -Lq;
    return T;
}

// kappa_max: largest explicit-Euler-stable step (0 when an undamped
// oscillatory mode exists); slowest_decay: smallest |Re| over decaying
// modes, the continuous-time rate bottleneck. Zero eigenvalues are the
// conserved multiplier directions and do not count.
struct StabilityBound {
    double kappa_max = 0.0;
    double slowest_decay = 0.0;
};

inline StabilityBound baseline_stability(const Eigen::MatrixXd& T) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(T);
    if (es.info() != Eigen::Success) throw NumericalError("baseline_stability: eigensolver failed");
    StabilityBound b{1e308, 1e308};
    for (int i = 0; i < T.rows(); ++i) {
        const std::complex<double> mu = es.eigenvalues()(i);
        if (std::abs(mu) < 1e-9) continue;
        if (mu.real() >= -1e-12) return StabilityBound{0.0, 0.0};
        b.kappa_max = std::min(b.kappa_max, -2.0 * mu.real() / std::norm(mu));
        b.slowest_decay = std::min(b.slowest_decay, -mu.real());
    }
    return b;
}

// ---------------------------------------------------------------------------
// Run loop with recording, stop rules and divergence capture.
// ---------------------------------------------------------------------------

struct RunOptions {
    long max_iters = 1000;
    std::optional<double> target_residual;  // on residual_sq, needs a certificate
    long record_every = 1;
};

struct RecordContext {
    const SpectralData* spectral = nullptr;
    const OptimalityCertificate* cert = nullptr;
};

namespace detail {

template <class Engine>
inline TraceRow record_row(const Engine& eng, const RecordContext& ctx) {
    TraceRow row;
    row.k = eng.round();
    const Eigen::VectorXd x = eng.stacked_x();
    row.feas_norm = eng.problem.constraint_residual(x).norm();
    if constexpr (Engine::coupled) row.coupled_feas_norm = eng.problem.coupled_sum(x).norm();
    if (ctx.cert != nullptr) {
        row.residual_sq = residual_sq(x, ctx.cert->x_star);
        if (ctx.spectral != nullptr) {
            const auto split = consensus_decomposition(x, *ctx.spectral, ctx.cert->x_star);
            row.consensus_perp = split.perp_norm;
            row.consensus_par = split.par_norm;
        }
    }
    row.sum_lambda_drift = (eng.sum_lambda() - eng.sum_lambda0).template lpNorm<Eigen::Infinity>();
    if constexpr (Engine::coupled)
        row.sum_z_drift = (eng.sum_z() - eng.sum_z0).template lpNorm<Eigen::Infinity>();
    row.comm_entries_cum = eng.comm.cum_entries;
    row.comm_bits_cum = eng.comm.cum_bits;
    return row;
}

}  // namespace detail

template <class Engine>
inline RunTrace run(Engine& eng, const RunOptions& opts, const RecordContext& ctx = {}) {
    if (opts.max_iters < 1) throw InvalidSpec("run: max_iters must be >= 1");
    if (opts.record_every < 1) throw InvalidSpec("run: record_every must be >= 1");
    if (opts.target_residual.has_value() && ctx.cert == nullptr)
        throw InvalidSpec("run: target_residual needs a certificate to measure against");

    RunTrace trace;
    trace.rows.push_back(detail::record_row(eng, ctx));
    for (long k = 1; k <= opts.max_iters; ++k) {
        try {
            eng.step();
        } catch (EngineDiverged& e) {
            e.partial = std::move(trace);
            throw;
        }
        const bool at_record = (k % opts.record_every == 0) || k == opts.max_iters;
        bool stop = false;
        if (opts.target_residual.has_value()) {
            const double res = residual_sq(eng.stacked_x(), ctx.cert->x_star);
            stop = res <= *opts.target_residual;
        }
        if (at_record || stop) trace.rows.push_back(detail::record_row(eng, ctx));
        if (stop) break;
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Step-size search: closed-form eta, then halve kappa from a spectral bound
// until a 500-round probe shows a decaying residual envelope.
// ---------------------------------------------------------------------------

namespace detail {

template <class Problem>
inline double eta_start(const Problem& p) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.sum_Q());
    const double lmax = es.eigenvalues().maxCoeff();
    return std::min(1.0, p.mu / std::max(lmax, 1e-12));
}

template <class Problem>
inline double kappa_start(const Problem& p, const SpectralData& sd, double eta) {
    double a_norm = 0.0;   // largest singular value over blocks
    double l_grad = 0.0;   // gradient Lipschitz constant over blocks
    for (int i = 0; i < p.n; ++i) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(p.A[i]);
        if (svd.singularValues().size() > 0)
            a_norm = std::max(a_norm, svd.singularValues()(0));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.objectives[i].Q);
        l_grad = std::max(l_grad, es.eigenvalues().maxCoeff());
    }
    return 1.0 / (sd.lambda_max() + a_norm * a_norm + eta * l_grad);
}

// Envelope test over the probe trace: finite, net decay, bounded transient.
inline bool envelope_decreasing(const std::vector<double>& res) {
    if (res.empty()) return false;
    const std::size_t window = 100;
    std::vector<double> env;
    for (std::size_t start = 0; start < res.size(); start += window) {
        double m = 0.0;
        for (std::size_t i = start; i < std::min(res.size(), start + window); ++i) {
            if (!std::isfinite(res[i])) return false;
            m = std::max(m, res[i]);
        }
        env.push_back(m);
    }
    if (env.size() < 2) return false;
    if (env.front() < 1e-300) {
        // started at the fixed point; pass only if it stayed there
        for (double e : env)
            if (e > 1e-250) return false;
        return true;
    }
    for (double e : env)
        if (e > 1.5 * env.front()) return false;
    return env.back() < env.front() * (1.0 - 1e-3);
}

// Log-linear fit quality of the probe trace; a probe that bottoms out below
// the residual floor inside 500 rounds counts as perfectly clean.
inline double probe_fit_quality(const std::vector<double>& res) {
    RunTrace t;
    for (std::size_t i = 0; i < res.size(); ++i) {
        TraceRow row;
        row.k = static_cast<long>(i + 1);
        row.residual_sq = res[i];
        t.rows.push_back(row);
    }
    try {
        return fit_linear_rate(t).r_squared;
    } catch (const InsufficientData&) {
        return 1.0;
    }
}

// Grid/halving search. eta runs a coarse geometric grid between the
// structural starting point eta0 and 1, ordered by the exact-linearization
// conditioning score kappa_max * slowest_decay (the achievable rate). kappa
// starts at the smaller of the spectral bound and kappa_max / 8 (margin for
// compression effects the linearization cannot see), halving on probe
// failure. The first candidate whose probe has a decaying envelope and a
// clean geometric fit wins; otherwise the cleanest passing candidate does.
// The reference optimum is recomputed per eta (the coupled fixed point
// moves with eta).
template <class KappaInit, class CondForEta, class CertForEta, class MakeEngine>
inline StepSizes tune_search(double eta0, double kappa0, int budget, KappaInit kappa_init,
                             CondForEta cond_for_eta, CertForEta cert_for_eta,
                             MakeEngine make_engine) {
    if (budget < 1) throw InvalidSpec("tune_steps: budget must be >= 1");

    std::vector<double> eta_grid;
    for (double eta = 1.0; eta > eta0 * 1.5; eta *= 0.25) eta_grid.push_back(eta);
    eta_grid.push_back(eta0);

    std::vector<std::pair<double, double>> scored;  // (-score, eta)
    std::vector<StabilityBound> bounds(eta_grid.size());
    for (std::size_t i = 0; i < eta_grid.size(); ++i) {
        bounds[i] = cond_for_eta(eta_grid[i]);
        scored.push_back({-bounds[i].kappa_max * bounds[i].slowest_decay, eta_grid[i]});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    StepSizes best{};
    double best_quality = -1.0;
    for (const auto& [neg_score, eta] : scored) {
        if (neg_score >= 0.0) continue;  // undamped oscillatory mode at this eta
        StabilityBound bound{};
        for (std::size_t i = 0; i < eta_grid.size(); ++i)
            if (eta_grid[i] == eta) bound = bounds[i];
        const OptimalityCertificate cert = cert_for_eta(eta);
        double kappa = std::min(kappa_init(eta), bound.kappa_max / 8.0);
        for (int attempt = 0; attempt < budget; ++attempt, kappa *= 0.5) {
            StepSizes s{kappa, kappa0, eta};
            auto eng = make_engine(s);
            std::vector<double> res;
            res.reserve(2000);
            bool diverged = false;
            for (int k = 0; k < 2000; ++k) {
                try {
                    eng.step();
                } catch (const EngineDiverged&) {
                    diverged = true;
                    break;
                }
                res.push_back(residual_sq(eng.stacked_x(), cert.x_star));
            }
            if (diverged || !envelope_decreasing(res)) continue;
            const double quality = probe_fit_quality(res);
            if (quality >= 0.98) return s;
            if (quality > best_quality) {
                best_quality = quality;
                best = s;
            }
            break;  // stable at this eta; a smaller kappa only slows it down
        }
    }
    if (best_quality >= 0.0) return best;
    throw TuningFailed("tune_steps: no stable step size within budget");
}

}  // namespace detail

inline StepSizes tune_steps(const DlecProblem& p, const WeightedGraph& g, const SpectralData& sd,
                            const CompressorSpec& comp, std::uint64_t master_seed, int budget = 12) {
    const bool exact_bound = 2 * p.n * (p.d + p.q) <= 600;  // eigensolve stays cheap
    return detail::tune_search(
        detail::eta_start(p), comp.kappa0, budget,
        [&](double eta) { return detail::kappa_start(p, sd, eta); },
        [&](double eta) {
            if (!exact_bound) return StabilityBound{8.0 * detail::kappa_start(p, sd, eta), 1.0};
            return baseline_stability(baseline_transition_de(p, sd.laplacian, eta));
        },
        [&](double eta) { return kkt_oracle_dlec(p, sd.laplacian, eta); },
        [&](const StepSizes& s) { return init_de(p, g, comp, s, InitSpec{}, master_seed); });
}

inline StepSizes tune_steps(const ClecProblem& p, const WeightedGraph& g, const SpectralData& sd,
                            const CompressorSpec& comp, std::uint64_t master_seed, int budget = 12) {
    const bool exact_bound = 2 * p.n * (p.d + p.q) <= 600;
    return detail::tune_search(
        detail::eta_start(p), comp.kappa0, budget,
        [&](double eta) { return detail::kappa_start(p, sd, eta); },
        [&](double eta) {
            if (!exact_bound) return StabilityBound{8.0 * detail::kappa_start(p, sd, eta), 1.0};
            return baseline_stability(baseline_transition_ce(p, sd.laplacian, eta));
        },
        [&](double eta) { return kkt_oracle_clec(p, sd.laplacian, eta); },
        [&](const StepSizes& s) { return init_ce(p, g, comp, s, InitSpec{}, master_seed); });
}

}  // namespace cdopt
