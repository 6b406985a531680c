#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdopt/errors.hpp"
#include "cdopt/graph.hpp"

namespace cdopt {

// One recorded round. Fields without a meaningful value for the run kind
// stay empty (and serialize as empty CSV cells, not zeros).
struct TraceRow {
    long k = 0;
    std::optional<double> residual_sq;
    std::optional<double> feas_norm;
    std::optional<double> coupled_feas_norm;
    std::optional<double> consensus_perp;
    std::optional<double> consensus_par;
    std::optional<double> sum_lambda_drift;
    std::optional<double> sum_z_drift;
    long long comm_entries_cum = 0;
    long long comm_bits_cum = 0;
};

struct RunTrace {
    std::vector<TraceRow> rows;
    std::map<std::string, std::string> metadata;  // resolved specs and seeds

    bool empty() const { return rows.empty(); }
};

// Empirical per-round contraction factor of a geometric residual envelope.
struct RateReport {
    double beta_hat = 1.0;
    double r_squared = 0.0;
    long window_lo = 0;  // round indices of the fit window
    long window_hi = 0;
    bool floor_detected = false;
};

struct FitPolicy {
    double window_start_frac = 0.10;
    // residual floor = floor_factor * initial residual; defaults to
    // 1e3 * eps^2 (squared-residual scale saturates near eps^2 relative)
    double floor_factor = 1e3 * std::numeric_limits<double>::epsilon() *
                          std::numeric_limits<double>::epsilon();
    long min_points = 50;
};

// sum_i ||x_i - x*||^2 over the stacked state.
inline double residual_sq(const Eigen::VectorXd& x_stacked, const Eigen::VectorXd& x_star) {
    const int d = static_cast<int>(x_star.size());
    const int n = static_cast<int>(x_stacked.size()) / d;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += (x_stacked.segment(i * d, d) - x_star).squaredNorm();
    return acc;
}

struct ConsensusSplit {
    double perp_norm = 0.0;  // disagreement component, via the S basis
    double par_norm = 0.0;   // agreement component, along 1/sqrt(n)
};

// Splits the stacked error x - 1 (x) x* into the span(1) component and its
// orthogonal complement; perp^2 + par^2 equals residual_sq.
inline ConsensusSplit consensus_decomposition(const Eigen::VectorXd& x_stacked,
                                              const SpectralData& sd,
                                              const Eigen::VectorXd& x_star) {
    const int d = static_cast<int>(x_star.size());
    const int n = static_cast<int>(sd.basis_S.rows());
    ConsensusSplit out;

    Eigen::VectorXd par = Eigen::VectorXd::Zero(d);
    for (int i = 0; i < n; ++i) par += x_stacked.segment(i * d, d) - x_star;
    par /= std::sqrt(static_cast<double>(n));
    out.par_norm = par.norm();

    double perp_sq = 0.0;
    for (int m = 0; m < n - 1; ++m) {
        Eigen::VectorXd block = Eigen::VectorXd::Zero(d);
        for (int i = 0; i < n; ++i)
            block += sd.basis_S(i, m) * (x_stacked.segment(i * d, d) - x_star);
        perp_sq += block.squaredNorm();
    }
    out.perp_norm = std::sqrt(perp_sq);
    return out;
}

// Least-squares fit of log(residual_sq) against k over
// [window_start_frac of the trace, first round below the residual floor].
inline RateReport fit_linear_rate(const RunTrace& trace, const FitPolicy& policy = {}) {
    std::vector<std::pair<long, double>> pts;
    for (const auto& row : trace.rows)
        if (row.residual_sq.has_value()) pts.push_back({row.k, *row.residual_sq});
    if (pts.empty()) throw InsufficientData("fit_linear_rate: trace has no residuals");

    const double initial = pts.front().second;
    const double floor = policy.floor_factor * initial;

    RateReport rep;
    const std::size_t start = static_cast<std::size_t>(policy.window_start_frac * pts.size());
    std::size_t stop = pts.size();
    for (std::size_t i = start; i < pts.size(); ++i) {
        if (pts[i].second < floor || pts[i].second <= 0.0) {
            stop = i;
            rep.floor_detected = true;
            break;
        }
    }
    if (stop <= start || stop - start < static_cast<std::size_t>(policy.min_points))
        throw InsufficientData("fit_linear_rate: fewer than min_points usable rounds");

    rep.window_lo = pts[start].first;
    rep.window_hi = pts[stop - 1].first;

    const std::size_t m = stop - start;
    double sk = 0, sy = 0, skk = 0, sky = 0;
    for (std::size_t i = start; i < stop; ++i) {
        const double kk = static_cast<double>(pts[i].first);
        const double y = std::log(pts[i].second);
        sk += kk;
        sy += y;
        skk += kk * kk;
        sky += kk * y;
    }
    const double dm = static_cast<double>(m);
    const double denom = dm * skk - sk * sk;
    const double slope = denom != 0.0 ? (dm * sky - sk * sy) / denom : 0.0;
    const double intercept = (sy - slope * sk) / dm;
    // log(residual_sq) slope per round; beta is the per-round factor of the
    // squared residual envelope
    rep.beta_hat = std::exp(slope);

    double ss_res = 0, ss_tot = 0;
    const double ybar = sy / dm;
    for (std::size_t i = start; i < stop; ++i) {
        const double kk = static_cast<double>(pts[i].first);
        const double y = std::log(pts[i].second);
        ss_res += (y - (intercept + slope * kk)) * (y - (intercept + slope * kk));
        ss_tot += (y - ybar) * (y - ybar);
    }
    rep.r_squared = ss_tot > 0.0 ? std::max(0.0, 1.0 - ss_res / ss_tot) : 1.0;
    return rep;
}

struct ConservationSummary {
    double max_lambda_drift = 0.0;
    double max_z_drift = 0.0;
    bool has_z = false;
};

// Maxima over recorded rounds of |1^T lambda_k - 1^T lambda_0| and the
// z analogue; both are invariants of the update algebra.
inline ConservationSummary conservation_check(const RunTrace& trace) {
    if (trace.rows.empty()) throw InsufficientData("conservation_check: empty trace");
    ConservationSummary s;
    for (const auto& row : trace.rows) {
        if (row.sum_lambda_drift.has_value())
            s.max_lambda_drift = std::max(s.max_lambda_drift, *row.sum_lambda_drift);
        if (row.sum_z_drift.has_value()) {
            s.has_z = true;
            s.max_z_drift = std::max(s.max_z_drift, *row.sum_z_drift);
        }
    }
    return s;
}

struct CommSavings {
    double entries_ratio = 1.0;
    double bits_ratio = 1.0;
};

// Cumulative wire cost of a compressed run relative to an identity baseline
// recorded on the same round grid.
inline CommSavings comm_savings(const RunTrace& compressed, const RunTrace& identity) {
    if (compressed.rows.size() != identity.rows.size())
        throw IncomparableTraces("comm_savings: different record counts");
    for (std::size_t i = 0; i < compressed.rows.size(); ++i)
        if (compressed.rows[i].k != identity.rows[i].k)
            throw IncomparableTraces("comm_savings: mismatched round grids");
    if (identity.rows.empty() || identity.rows.back().comm_entries_cum == 0)
        throw IncomparableTraces("comm_savings: baseline transmitted nothing");

    CommSavings s;
    s.entries_ratio = static_cast<double>(compressed.rows.back().comm_entries_cum) /
                      static_cast<double>(identity.rows.back().comm_entries_cum);
    s.bits_ratio = static_cast<double>(compressed.rows.back().comm_bits_cum) /
                   static_cast<double>(identity.rows.back().comm_bits_cum);
    return s;
}

// Pointwise median of residual_sq across replicate traces sharing a round
// grid; used to fit rates for stochastic compressors.
inline RunTrace median_trace(const std::vector<RunTrace>& replicates) {
    if (replicates.empty()) throw InsufficientData("median_trace: no replicates");
    for (const auto& t : replicates)
        if (t.rows.size() != replicates[0].rows.size())
            throw IncomparableTraces("median_trace: replicate grids differ");

    RunTrace out = replicates[0];
    for (std::size_t r = 0; r < out.rows.size(); ++r) {
        std::vector<double> vals;
        for (const auto& t : replicates)
            if (t.rows[r].residual_sq.has_value()) vals.push_back(*t.rows[r].residual_sq);
        if (vals.empty()) continue;
        std::sort(vals.begin(), vals.end());
        const std::size_t m = vals.size();
        out.rows[r].residual_sq =
            (m % 2 == 1) ? vals[m / 2] : 0.5 * (vals[m / 2 - 1] + vals[m / 2]);
    }
    return out;
}

}  // namespace cdopt
