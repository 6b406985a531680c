#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdopt/errors.hpp"
#include "cdopt/rng.hpp"

namespace cdopt {

// Undirected weighted edge, stored once with i < j.
struct Edge {
    int i;
    int j;
    double weight;
};

struct WeightedGraph {
    int n = 0;
    std::vector<Edge> edges;

    // Dense symmetric weight matrix [a_ij], zero diagonal.
    Eigen::MatrixXd adjacency() const {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
        for (const auto& e : edges) {
            a(e.i, e.j) = e.weight;
            a(e.j, e.i) = e.weight;
        }
        return a;
    }

    std::vector<std::vector<int>> neighbor_lists() const {
        std::vector<std::vector<int>> nbr(n);
        for (const auto& e : edges) {
            nbr[e.i].push_back(e.j);
            nbr[e.j].push_back(e.i);
        }
        for (auto& v : nbr) std::sort(v.begin(), v.end());
        return nbr;
    }
};

enum class GraphKind { ring, complete, star, erdos_renyi };

enum class WeightRule { unit, uniform };  // uniform: U(0.5, 1.5), symmetric

struct GraphSpec {
    GraphKind kind = GraphKind::ring;
    int n = 2;
    double p = 0.5;  // erdos_renyi edge probability
    WeightRule weight_rule = WeightRule::unit;
    std::uint64_t seed = 0;
};

inline bool is_connected(const WeightedGraph& g) {
    if (g.n <= 0) return false;
    auto nbr = g.neighbor_lists();
    std::vector<char> seen(g.n, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
        int v = stack.back();
        stack.pop_back();
        for (int w : nbr[v]) {
            if (!seen[w]) {
                seen[w] = 1;
                ++count;
                stack.push_back(w);
            }
        }
    }
    return count == g.n;
}

inline void validate_graph(const WeightedGraph& g) {
    if (g.n < 2) throw InvalidSpec("graph: need n >= 2 agents");
    for (const auto& e : g.edges) {
        if (e.i == e.j) throw InvalidSpec("graph: self-loop on node " + std::to_string(e.i));
        if (e.i < 0 || e.j < 0 || e.i >= g.n || e.j >= g.n)
            throw InvalidSpec("graph: edge endpoint out of range");
        if (!(e.weight > 0.0)) throw InvalidSpec("graph: non-positive edge weight");
    }
    if (!is_connected(g)) throw Disconnected("graph: not connected");
}

namespace detail {

inline double draw_weight(WeightRule rule, Xoshiro256ss& rng) {
    return rule == WeightRule::unit ? 1.0 : rng.uniform(0.5, 1.5);
}

}  // namespace detail

inline WeightedGraph build_graph(const GraphSpec& spec) {
    if (spec.n < 2) throw InvalidSpec("build_graph: n must be >= 2");
    WeightedGraph g;
    g.n = spec.n;
    Xoshiro256ss rng(derive_stream(spec.seed, "graph/weights"));

    switch (spec.kind) {
        case GraphKind::ring: {
            // n = 2 degenerates to the single possible edge
            if (spec.n == 2) {
                g.edges.push_back({0, 1, detail::draw_weight(spec.weight_rule, rng)});
            } else {
                for (int i = 0; i < spec.n; ++i) {
                    int j = (i + 1) % spec.n;
                    g.edges.push_back({std::min(i, j), std::max(i, j),
                                       detail::draw_weight(spec.weight_rule, rng)});
                }
            }
            break;
        }
        case GraphKind::complete: {
            for (int i = 0; i < spec.n; ++i)
                for (int j = i + 1; j < spec.n; ++j)
                    g.edges.push_back({i, j, detail::draw_weight(spec.weight_rule, rng)});
            break;
        }
        case GraphKind::star: {
            // node 0 is the hub
            for (int j = 1; j < spec.n; ++j)
                g.edges.push_back({0, j, detail::draw_weight(spec.weight_rule, rng)});
            break;
        }
        case GraphKind::erdos_renyi: {
            if (spec.p < 0.0 || spec.p > 1.0)
                throw InvalidSpec("build_graph: erdos_renyi p must be in [0,1]");
            const int max_attempts = 200;
            for (int attempt = 0; attempt < max_attempts; ++attempt) {
                Xoshiro256ss er(derive_stream(spec.seed, "graph/er/" + std::to_string(attempt)));
                g.edges.clear();
                for (int i = 0; i < spec.n; ++i)
                    for (int j = i + 1; j < spec.n; ++j)
                        if (er.uniform01() < spec.p)
                            g.edges.push_back({i, j, detail::draw_weight(spec.weight_rule, er)});
                if (is_connected(g)) break;
                g.edges.clear();
            }
            if (g.edges.empty() || !is_connected(g))
                throw Disconnected("build_graph: erdos_renyi stayed disconnected after retries");
            break;
        }
    }

    validate_graph(g);
    return g;
}

// [L]_ij = -a_ij for i != j, [L]_ii = sum_j a_ij. Symmetric PSD, L 1 = 0.
inline Eigen::MatrixXd laplacian(const WeightedGraph& g) {
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(g.n, g.n);
    for (const auto& e : g.edges) {
        lap(e.i, e.j) -= e.weight;
        lap(e.j, e.i) -= e.weight;
        lap(e.i, e.i) += e.weight;
        lap(e.j, e.j) += e.weight;
    }
    return lap;
}

// Spectral objects the algorithms and diagnostics consume:
//   eigenvalues ascending (lambda_1 ~ 0), and the n x (n-1) basis S of the
//   consensus-orthogonal subspace, satisfying S^T 1 = 0 and
//   S S^T + 1 1^T / n = I.
struct SpectralData {
    Eigen::MatrixXd laplacian;
    Eigen::VectorXd eigenvalues;  // ascending
    Eigen::MatrixXd basis_S;      // n x (n-1), orthonormal columns

    double lambda2() const { return eigenvalues(1); }
    double lambda_max() const { return eigenvalues(eigenvalues.size() - 1); }
};

inline SpectralData spectral(const WeightedGraph& g) {
    SpectralData sd;
    sd.laplacian = laplacian(g);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sd.laplacian);
    if (es.info() != Eigen::Success)
        throw NumericalError("spectral: eigensolver failed");
    sd.eigenvalues = es.eigenvalues();  // ascending
    if (sd.eigenvalues(1) <= 1e-10)
        throw NotConnected("spectral: lambda_2 <= 1e-10, graph not connected");

    sd.basis_S = es.eigenvectors().rightCols(g.n - 1);
    // Sign convention: first entry of magnitude > 1e-12 made positive, so the
    // basis is reproducible across runs.
    for (int c = 0; c < sd.basis_S.cols(); ++c) {
        for (int r = 0; r < sd.basis_S.rows(); ++r) {
            double v = sd.basis_S(r, c);
            if (std::abs(v) > 1e-12) {
                if (v < 0) sd.basis_S.col(c) = -sd.basis_S.col(c);
                break;
            }
        }
    }
    return sd;
}

// Applies (L (x) I_d) to a stacked vector of n blocks of size d:
// out_i = sum_j L(i,j) v_j. Used by dense baselines and oracles.
inline Eigen::VectorXd laplacian_kron_apply(const Eigen::MatrixXd& lap,
                                            const Eigen::VectorXd& v, int block) {
    const int n = static_cast<int>(lap.rows());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n * block);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (lap(i, j) != 0.0)
                out.segment(i * block, block) += lap(i, j) * v.segment(j * block, block);
    return out;
}

// Dense L (x) I_block, for the minimum-norm multiplier solves.
inline Eigen::MatrixXd laplacian_kron(const Eigen::MatrixXd& lap, int block) {
    const int n = static_cast<int>(lap.rows());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n * block, n * block);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (lap(i, j) != 0.0)
                out.block(i * block, j * block, block, block) =
                    lap(i, j) * Eigen::MatrixXd::Identity(block, block);
    return out;
}

}  // namespace cdopt
