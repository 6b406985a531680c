#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdopt/errors.hpp"
#include "cdopt/graph.hpp"
#include "cdopt/rng.hpp"

namespace cdopt {

// f_i(x) = 1/2 x^T Q x + c^T x with Q symmetric PSD.
struct QuadraticObjective {
    Eigen::MatrixXd Q;
    Eigen::VectorXd c;

    double value(const Eigen::VectorXd& x) const {
        return 0.5 * x.dot(Q * x) + c.dot(x);
    }
    Eigen::VectorXd grad(const Eigen::VectorXd& x) const { return Q * x + c; }
};

// Shared instance data: n agents, decision dimension d, q constraint rows
// per agent, strong-convexity modulus mu of the summed objective, and the
// feasibility witness the generator built the right-hand sides from.
struct ProblemData {
    int n = 0;
    int d = 0;
    int q = 0;
    double mu = 0.0;
    std::uint64_t seed = 0;
    std::vector<QuadraticObjective> objectives;
    std::vector<Eigen::MatrixXd> A;  // each q x d
    std::vector<Eigen::VectorXd> b;  // each q
    Eigen::VectorXd witness;         // d

    Eigen::MatrixXd sum_Q() const {
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d, d);
        for (const auto& f : objectives) s += f.Q;
        return s;
    }
    Eigen::VectorXd sum_c() const {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(d);
        for (const auto& f : objectives) s += f.c;
        return s;
    }
    // gradient of F at a stacked point [x_1; ...; x_n]
    Eigen::VectorXd grad_stacked(const Eigen::VectorXd& x) const {
        Eigen::VectorXd g(n * d);
        for (int i = 0; i < n; ++i)
            g.segment(i * d, d) = objectives[i].grad(x.segment(i * d, d));
        return g;
    }
    // per-agent constraint residuals A_i x_i - b_i, stacked (nq)
    Eigen::VectorXd constraint_residual(const Eigen::VectorXd& x) const {
        Eigen::VectorXd r(n * q);
        for (int i = 0; i < n; ++i)
            r.segment(i * q, q) = A[i] * x.segment(i * d, d) - b[i];
        return r;
    }
    Eigen::VectorXd coupled_sum(const Eigen::VectorXd& x) const {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(q);
        for (int i = 0; i < n; ++i) s += A[i] * x.segment(i * d, d) - b[i];
        return s;
    }
};

// Each agent owns its own equality constraint A_i x = b_i.
struct DlecProblem : ProblemData {};

// Only the sum of per-agent constraint residuals is constrained to zero.
struct ClecProblem : ProblemData {};

struct OptimalityCertificate {
    Eigen::VectorXd x_star;       // consensus value, d
    Eigen::VectorXd nu_star;      // nq
    Eigen::VectorXd lambda_star;  // nd
    Eigen::VectorXd z_star;       // nq, coupled case only (size 0 otherwise)
    double eta = 1.0;
};

namespace detail {

struct InstanceDraw {
    Eigen::VectorXd witness;
    std::vector<QuadraticObjective> objectives;
    std::vector<Eigen::MatrixXd> A;
};

// Common core of both generators. The witness doubles as the unconstrained
// optimum of sum f_i: c_i = g_i - Q_i x_w with the g_i summing to zero, so
// per-agent gradients stay generic while the aggregate vanishes at x_w.
// That makes the DLEC and CLEC optima coincide whenever the right-hand
// sides are exact at the witness.
inline InstanceDraw draw_instance(std::uint64_t seed, int n, int d, int q, double mu,
                                  int attempt) {
    const std::string tag = "/" + std::to_string(attempt);
    InstanceDraw out;

    Xoshiro256ss wrng(derive_stream(seed, "instance/witness" + tag));
    out.witness.resize(d);
    for (int i = 0; i < d; ++i) out.witness(i) = wrng.normal();

    std::vector<Eigen::VectorXd> g(n);
    Eigen::VectorXd gbar = Eigen::VectorXd::Zero(d);
    for (int i = 0; i < n; ++i) {
        Xoshiro256ss grng(derive_stream(seed, "instance/g/" + std::to_string(i) + tag));
        g[i].resize(d);
        for (int r = 0; r < d; ++r) g[i](r) = grng.normal();
        gbar += g[i];
    }
    gbar /= static_cast<double>(n);

    out.objectives.resize(n);
    for (int i = 0; i < n; ++i) {
        Xoshiro256ss brng(derive_stream(seed, "instance/B/" + std::to_string(i) + tag));
        Eigen::MatrixXd B(d, d);
        for (int r = 0; r < d; ++r)
            for (int col = 0; col < d; ++col) B(r, col) = brng.normal();
        out.objectives[i].Q = B.transpose() * B +
                              (mu / static_cast<double>(n)) * Eigen::MatrixXd::Identity(d, d);
        // symmetrize away the last bits of rounding
        out.objectives[i].Q = 0.5 * (out.objectives[i].Q + out.objectives[i].Q.transpose()).eval();
        out.objectives[i].c = (g[i] - gbar) - out.objectives[i].Q * out.witness;
    }

    out.A.resize(n);
    for (int i = 0; i < n; ++i) {
        Xoshiro256ss arng(derive_stream(seed, "instance/A/" + std::to_string(i) + tag));
        Eigen::MatrixXd Ai(q, d);
        for (int r = 0; r < q; ++r)
            for (int col = 0; col < d; ++col) Ai(r, col) = arng.normal();
        out.A[i] = Ai;
    }
    return out;
}

inline bool full_row_rank(const Eigen::MatrixXd& m) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues().minCoeff() > 1e-6;
}

}  // namespace detail

inline void validate_dims(int n, int d, int q, double mu) {
    if (n < 1) throw InvalidSpec("generate: n must be >= 1");
    if (d < 1 || q < 1) throw InvalidSpec("generate: d and q must be >= 1");
    if (q > d) throw InvalidSpec("generate: need q <= d for full-row-rank constraints");
    if (!(mu > 0.0)) throw InvalidSpec("generate: mu must be > 0");
}

inline DlecProblem generate_dlec(std::uint64_t seed, int n, int d, int q, double mu) {
    validate_dims(n, d, q, mu);
    for (int attempt = 0; attempt < 20; ++attempt) {
        auto draw = detail::draw_instance(seed, n, d, q, mu, attempt);
        bool ok = true;
        for (const auto& Ai : draw.A)
            if (!detail::full_row_rank(Ai)) ok = false;
        if (!ok) continue;

        DlecProblem p;
        p.n = n;
        p.d = d;
        p.q = q;
        p.mu = mu;
        p.seed = seed;
        p.witness = draw.witness;
        p.objectives = std::move(draw.objectives);
        p.A = std::move(draw.A);
        p.b.resize(n);
        for (int i = 0; i < n; ++i) p.b[i] = p.A[i] * p.witness;
        return p;
    }
    throw DegenerateInstance("generate_dlec: no full-rank draw within retry budget");
}

inline ClecProblem generate_clec(std::uint64_t seed, int n, int d, int q, double mu) {
    validate_dims(n, d, q, mu);
    for (int attempt = 0; attempt < 20; ++attempt) {
        auto draw = detail::draw_instance(seed, n, d, q, mu, attempt);
        bool ok = true;
        for (const auto& Ai : draw.A)
            if (!detail::full_row_rank(Ai)) ok = false;
        if (!ok) continue;

        // per-agent perturbations with exact-as-possible zero sum
        std::vector<Eigen::VectorXd> delta(n, Eigen::VectorXd::Zero(q));
        if (n >= 2) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(q);
            for (int i = 0; i < n; ++i) {
                Xoshiro256ss drng(derive_stream(
                    seed, "instance/delta/" + std::to_string(i) + "/" + std::to_string(attempt)));
                for (int r = 0; r < q; ++r) delta[i](r) = drng.normal();
                mean += delta[i];
            }
            mean /= static_cast<double>(n);
            double max_norm = 0.0;
            for (int i = 0; i < n; ++i) {
                delta[i] -= mean;
                max_norm = std::max(max_norm, delta[i].norm());
            }
            if (max_norm <= 0.1) continue;  // degenerate draw, retry
        }

        ClecProblem p;
        p.n = n;
        p.d = d;
        p.q = q;
        p.mu = mu;
        p.seed = seed;
        p.witness = draw.witness;
        p.objectives = std::move(draw.objectives);
        p.A = std::move(draw.A);
        p.b.resize(n);
        for (int i = 0; i < n; ++i) p.b[i] = p.A[i] * p.witness + delta[i];
        return p;
    }
    throw DegenerateInstance("generate_clec: no usable draw within retry budget");
}

namespace detail {

// Minimum-norm solution of (L (x) I_block) y = rhs through the Laplacian
// pseudo-inverse; assumes rhs is (numerically) orthogonal to the null space.
inline Eigen::VectorXd laplacian_pinv_apply(const Eigen::MatrixXd& lap,
                                            const Eigen::VectorXd& rhs, int block) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lap);
    const int n = static_cast<int>(lap.rows());
    Eigen::MatrixXd lp = Eigen::MatrixXd::Zero(n, n);
    for (int m = 0; m < n; ++m) {
        const double lambda = es.eigenvalues()(m);
        if (lambda > 1e-10)
            lp += (1.0 / lambda) * es.eigenvectors().col(m) * es.eigenvectors().col(m).transpose();
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n * block);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (lp(i, j) != 0.0) out.segment(i * block, block) += lp(i, j) * rhs.segment(j * block, block);
    return out;
}

// Orthonormal null-space basis of m via SVD (empty when full column rank).
inline Eigen::MatrixXd null_basis(const Eigen::MatrixXd& m) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
    const double tol = std::max(m.rows(), m.cols()) * 1e-14 *
                       (svd.singularValues().size() ? svd.singularValues()(0) : 0.0);
    int rank = 0;
    for (int i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()(i) > std::max(tol, 1e-12)) ++rank;
    return svd.matrixV().rightCols(m.cols() - rank);
}

inline Eigen::MatrixXd blkdiag_A(const ProblemData& p) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p.n * p.q, p.n * p.d);
    for (int i = 0; i < p.n; ++i) A.block(i * p.q, i * p.d, p.q, p.d) = p.A[i];
    return A;
}

inline Eigen::VectorXd stack_b(const ProblemData& p) {
    Eigen::VectorXd b(p.n * p.q);
    for (int i = 0; i < p.n; ++i) b.segment(i * p.q, p.q) = p.b[i];
    return b;
}

}  // namespace detail

// Exact optimum and multipliers for the per-agent-constraint problem, in the
// convention the engine's update makes stationary:
//     eta * grad F(x*) + A^T nu* + (L (x) I_d) lambda* = 0,
// with (nu*, lambda*) the minimum-norm member of the multiplier family.
inline OptimalityCertificate kkt_oracle_dlec(const DlecProblem& p, const Eigen::MatrixXd& lap,
                                             double eta) {
    const int n = p.n, d = p.d, q = p.q;
    Eigen::MatrixXd A_rows(n * q, d);  // constraints seen by the consensus value
    Eigen::VectorXd b_rows(n * q);
    for (int i = 0; i < n; ++i) {
        A_rows.middleRows(i * q, q) = p.A[i];
        b_rows.segment(i * q, q) = p.b[i];
    }

    // particular feasible point: the stored witness when it checks out
    Eigen::VectorXd x_p;
    if (p.witness.size() == d && (A_rows * p.witness - b_rows).norm() <= 1e-6 * (1.0 + b_rows.norm())) {
        x_p = p.witness;
    } else {
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A_rows);
        x_p = cod.solve(b_rows);
        if ((A_rows * x_p - b_rows).norm() > 1e-8 * (1.0 + b_rows.norm()))
            throw DegenerateInstance("kkt_oracle_dlec: infeasible instance");
    }

    Eigen::MatrixXd N = detail::null_basis(A_rows);
    Eigen::VectorXd x_star = x_p;
    if (N.cols() > 0) {
        const Eigen::MatrixXd Qt = p.sum_Q();
        const Eigen::VectorXd ct = p.sum_c();
        Eigen::MatrixXd H = N.transpose() * Qt * N;
        Eigen::VectorXd rhs = -N.transpose() * (Qt * x_p + ct);
        x_star = x_p + N * H.ldlt().solve(rhs);
    }

    // minimum-norm (nu, lambda) solving A^T nu + L_d lambda = -eta grad F(x*)
    Eigen::VectorXd x_stacked(n * d);
    for (int i = 0; i < n; ++i) x_stacked.segment(i * d, d) = x_star;
    const Eigen::VectorXd grad = p.grad_stacked(x_stacked);

    Eigen::MatrixXd M(n * d, n * q + n * d);
    M.leftCols(n * q) = detail::blkdiag_A(p).transpose();
    M.rightCols(n * d) = laplacian_kron(lap, d);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(M);
    Eigen::VectorXd mult = cod.solve((-eta * grad).eval());
    if ((M * mult + eta * grad).norm() > 1e-7 * (1.0 + eta * grad.norm()))
        throw DegenerateInstance("kkt_oracle_dlec: stationarity system inconsistent");

    OptimalityCertificate cert;
    cert.x_star = x_star;
    cert.nu_star = mult.head(n * q);
    cert.lambda_star = mult.tail(n * d);
    cert.eta = eta;
    return cert;
}

// Exact fixed point of the coupled-constraint engine. Beyond consensus and
// coupled feasibility (A x* - b + L_q z* = 0, L_q nu* = 0) the stationarity
// carries the update's quadratic-penalty gradient:
//     eta * grad F(x*) + A^T nu* + L_d lambda* + A^T (A x* - b) = 0.
// z* is pinned within its affine family so that sum_i z*_i = sum_i z0_i.
inline OptimalityCertificate kkt_oracle_clec(const ClecProblem& p, const Eigen::MatrixXd& lap,
                                             double eta, const Eigen::VectorXd& z0 = {}) {
    const int n = p.n, d = p.d, q = p.q;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(q, d);   // sum A_i
    Eigen::VectorXd h = Eigen::VectorXd::Zero(q);      // sum b_i
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(d, d);   // sum A_i^T A_i
    Eigen::VectorXd atb = Eigen::VectorXd::Zero(d);    // sum A_i^T b_i
    for (int i = 0; i < n; ++i) {
        G += p.A[i];
        h += p.b[i];
        P += p.A[i].transpose() * p.A[i];
        atb += p.A[i].transpose() * p.b[i];
    }

    Eigen::VectorXd x_p;
    if (p.witness.size() == d && (G * p.witness - h).norm() <= 1e-6 * (1.0 + h.norm())) {
        x_p = p.witness;
    } else {
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(G);
        x_p = cod.solve(h);
        if ((G * x_p - h).norm() > 1e-8 * (1.0 + h.norm()))
            throw DegenerateInstance("kkt_oracle_clec: coupled constraint infeasible");
    }

    const Eigen::MatrixXd Qt = p.sum_Q();
    const Eigen::VectorXd ct = p.sum_c();
    Eigen::MatrixXd N = detail::null_basis(G);
    Eigen::VectorXd x_star = x_p;
    if (N.cols() > 0) {
        Eigen::MatrixXd H = N.transpose() * (eta * Qt + P) * N;
        Eigen::VectorXd rhs = -N.transpose() * ((eta * Qt + P) * x_p + eta * ct - atb);
        x_star = x_p + N * H.ldlt().solve(rhs);
    }

    // consensual dual for the coupled constraint, nu* = 1 (x) v
    Eigen::VectorXd g_agg = eta * (Qt * x_star + ct) + P * x_star - atb;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> codgt(
        Eigen::MatrixXd(G.transpose()));
    Eigen::VectorXd v = codgt.solve((-g_agg).eval());
    if ((G.transpose() * v + g_agg).norm() > 1e-7 * (1.0 + g_agg.norm()))
        throw DegenerateInstance("kkt_oracle_clec: aggregate stationarity inconsistent");

    OptimalityCertificate cert;
    cert.x_star = x_star;
    cert.eta = eta;
    cert.nu_star.resize(n * q);
    for (int i = 0; i < n; ++i) cert.nu_star.segment(i * q, q) = v;

    // z*: min-norm solution of L_q z = b - A x*, then shift along 1 (x) w
    Eigen::VectorXd rhs_z(n * q);
    for (int i = 0; i < n; ++i) rhs_z.segment(i * q, q) = p.b[i] - p.A[i] * x_star;
    Eigen::VectorXd z = detail::laplacian_pinv_apply(lap, rhs_z, q);
    Eigen::VectorXd zsum = Eigen::VectorXd::Zero(q);
    for (int i = 0; i < n; ++i) zsum += z.segment(i * q, q);
    Eigen::VectorXd z0sum = Eigen::VectorXd::Zero(q);
    if (z0.size() == n * q)
        for (int i = 0; i < n; ++i) z0sum += z0.segment(i * q, q);
    const Eigen::VectorXd w = (z0sum - zsum) / static_cast<double>(n);
    for (int i = 0; i < n; ++i) z.segment(i * q, q) += w;
    cert.z_star = z;

    // lambda*: min-norm solution of L_d lambda = -(eta grad + A^T nu + A^T(Ax-b))
    Eigen::VectorXd x_stacked(n * d);
    for (int i = 0; i < n; ++i) x_stacked.segment(i * d, d) = x_star;
    Eigen::VectorXd g_stat(n * d);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd res_i = p.A[i] * x_star - p.b[i];
        g_stat.segment(i * d, d) =
            eta * p.objectives[i].grad(x_star) + p.A[i].transpose() * (v + res_i);
    }
    cert.lambda_star = detail::laplacian_pinv_apply(lap, (-g_stat).eval(), d);
    return cert;
}

// Max norm over the certificate's defining conditions (engine convention).
inline double check_kkt(const DlecProblem& p, const Eigen::MatrixXd& lap,
                        const OptimalityCertificate& cert) {
    const int n = p.n, d = p.d;
    Eigen::VectorXd x_stacked(n * d);
    for (int i = 0; i < n; ++i) x_stacked.segment(i * d, d) = cert.x_star;

    const double feas = p.constraint_residual(x_stacked).norm();
    const double consensus = laplacian_kron_apply(lap, x_stacked, d).norm();
    Eigen::VectorXd stat = cert.eta * p.grad_stacked(x_stacked) +
                           detail::blkdiag_A(p).transpose() * cert.nu_star +
                           laplacian_kron_apply(lap, cert.lambda_star, d);
    return std::max({feas, consensus, stat.norm()});
}

inline double check_kkt(const ClecProblem& p, const Eigen::MatrixXd& lap,
                        const OptimalityCertificate& cert) {
    const int n = p.n, d = p.d, q = p.q;
    Eigen::VectorXd x_stacked(n * d);
    for (int i = 0; i < n; ++i) x_stacked.segment(i * d, d) = cert.x_star;

    const Eigen::VectorXd res = p.constraint_residual(x_stacked);
    const double coupled_feas = (res + laplacian_kron_apply(lap, cert.z_star, q)).norm();
    const double consensus = laplacian_kron_apply(lap, x_stacked, d).norm();
    const double nu_cons = laplacian_kron_apply(lap, cert.nu_star, q).norm();
    Eigen::VectorXd stat = cert.eta * p.grad_stacked(x_stacked) +
                           detail::blkdiag_A(p).transpose() * (cert.nu_star + res) +
                           laplacian_kron_apply(lap, cert.lambda_star, d);
    return std::max({coupled_feas, consensus, nu_cons, stat.norm()});
}

// Embedding of the coupled constraint into the distributed form: for a
// coupled-feasible stacked x, the minimum-norm z with
// A x - b + (L (x) I_q) z = 0. The sum constraint makes A x - b orthogonal
// to the Laplacian's null space, so the system is solvable.
inline Eigen::VectorXd embed_coupled(const ClecProblem& p, const Eigen::MatrixXd& lap,
                                     const Eigen::VectorXd& x_stacked) {
    if (p.coupled_sum(x_stacked).norm() > 1e-8)
        throw NotInRange("embed_coupled: point is not coupled-feasible");
    return detail::laplacian_pinv_apply(lap, (-p.constraint_residual(x_stacked)).eval(), p.q);
}

// Reverse direction of the embedding: if ||A x - b + L_q z|| <= tol then the
// coupled sum obeys ||sum_i(A_i x_i - b_i)|| <= tol * sqrt(n), because 1^T
// annihilates L_q z. Returns whether both bounds hold.
inline bool verify_embedding(const ClecProblem& p, const Eigen::MatrixXd& lap,
                             const Eigen::VectorXd& x_stacked, const Eigen::VectorXd& z,
                             double tol = 1e-9) {
    const double res_full =
        (p.constraint_residual(x_stacked) + laplacian_kron_apply(lap, z, p.q)).norm();
    const double res_sum = p.coupled_sum(x_stacked).norm();
    return res_full <= tol && res_sum <= tol * std::sqrt(static_cast<double>(p.n));
}

}  // namespace cdopt
