#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cdopt/errors.hpp"
#include "cdopt/rng.hpp"

namespace cdopt {

// A compressor here is a map C(x_e, k) that (i) is norm-bounded relative to
// its input, and (ii) makes the error recursion x <- x - kappa0 * C(x, k)
// exponentially stable. Both properties are certified empirically by
// verify_st_contract; the round index k lets schedules vary over time.
enum class CompressorKind {
    identity,
    top_k,
    norm_quantizer,
    scalarized,
    stochastic_quantizer,
    event_triggered,
    scaled_identity,  // diagnostic only: C(x) = factor * x, deliberately breakable
};

struct CompressorSpec {
    CompressorKind kind = CompressorKind::identity;
    double kappa0 = 0.5;  // filter step size

    int k = 1;            // top_k: entries kept, 1 <= k <= d
    int levels = 16;      // quantizers: grid resolution, >= 1
    double theta0 = 1.0;  // event_triggered: threshold schedule theta0 * rho^k
    double rho = 0.97;
    double factor = 1.0;     // scaled_identity
    std::uint64_t seed = 0;  // folded into stochastic stream derivation
};

// Per-stream mutable state. A stream belongs to one (agent, variable) pair
// and must be advanced sequentially; distinct streams are independent.
struct CompressorState {
    std::uint64_t round = 1;  // k in C(., k), starts at 1
    Xoshiro256ss rng;         // stochastic kinds only
    Eigen::VectorXd last_sent;  // event_triggered trigger memory
};

inline CompressorState make_compressor_state(const CompressorSpec& spec, int dim,
                                             std::uint64_t stream_seed) {
    CompressorState st;
    st.round = 1;
    st.rng.reseed(stream_seed ^ spec.seed);
    if (spec.kind == CompressorKind::event_triggered)
        st.last_sent = Eigen::VectorXd::Zero(dim);
    return st;
}

// One compressed transmission: the reconstructed value C(x_e, k) plus its
// wire cost. Entries follow transmit_size conventions; bits assume 64-bit
// floats, 32-bit indices, ceil(log2(2*levels+1))-bit quantized symbols.
struct Payload {
    Eigen::VectorXd value;
    long entries = 0;
    long bits = 0;
};

struct TransmitSize {
    long entries = 0;
    long bits = 0;
};

inline long quantizer_symbol_bits(int levels) {
    long bits = 1;
    while ((1L << bits) < 2L * levels + 1) ++bits;
    return bits;
}

// Static per-transmission payload size for a kind. event_triggered reports
// its worst case (a triggered round); the ledger uses actual per-call sizes.
inline TransmitSize transmit_size(const CompressorSpec& spec, int d) {
    switch (spec.kind) {
        case CompressorKind::identity:
        case CompressorKind::scaled_identity:
            return {d, 64L * d};
        case CompressorKind::top_k: {
            int k = std::min(spec.k, d);
            return {2L * k, (64L + 32L) * k};
        }
        case CompressorKind::scalarized:
            return {1, 64};
        case CompressorKind::norm_quantizer:
        case CompressorKind::stochastic_quantizer:
            return {d, 64 + d * quantizer_symbol_bits(spec.levels)};
        case CompressorKind::event_triggered:
            return {d, 1 + 64L * d};
    }
    throw InvalidSpec("transmit_size: unknown compressor kind");
}

inline void validate_compressor(const CompressorSpec& spec, int d) {
    if (!(spec.kappa0 > 0.0)) throw InvalidSpec("compressor: kappa0 must be > 0");
    switch (spec.kind) {
        case CompressorKind::top_k:
            if (spec.k < 1 || spec.k > d)
                throw InvalidSpec("compressor: top_k needs 1 <= k <= d");
            break;
        case CompressorKind::norm_quantizer:
        case CompressorKind::stochastic_quantizer:
            if (spec.levels < 1) throw InvalidSpec("compressor: levels must be >= 1");
            break;
        case CompressorKind::event_triggered:
            if (!(spec.theta0 >= 0.0) || !(spec.rho > 0.0) || !(spec.rho < 1.0))
                throw InvalidSpec("compressor: event_triggered needs theta0 >= 0, rho in (0,1)");
            break;
        default:
            break;
    }
}

// C(x_e, k) as a pure transition: same (spec, state, input) always yields the
// same (payload, next state). C(0, k) = 0 exactly for every kind.
inline std::pair<Payload, CompressorState> compress(const CompressorSpec& spec,
                                                    const CompressorState& state,
                                                    const Eigen::VectorXd& x_e) {
    if (!x_e.allFinite()) throw NumericalError("compress: non-finite input");

    const int d = static_cast<int>(x_e.size());
    CompressorState next = state;
    next.round = state.round + 1;
    Payload out;
    out.value = Eigen::VectorXd::Zero(d);

    switch (spec.kind) {
        case CompressorKind::identity: {
            out.value = x_e;
            out.entries = d;
            out.bits = 64L * d;
            break;
        }
        case CompressorKind::scaled_identity: {
            out.value = spec.factor * x_e;
            out.entries = d;
            out.bits = 64L * d;
            break;
        }
        case CompressorKind::top_k: {
            const int k = std::min(spec.k, d);
            std::vector<int> idx(d);
            std::iota(idx.begin(), idx.end(), 0);
            // ties broken toward the lowest index
            std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
                return std::abs(x_e(a)) > std::abs(x_e(b));
            });
            for (int m = 0; m < k; ++m) out.value(idx[m]) = x_e(idx[m]);
            out.entries = 2L * k;
            out.bits = (64L + 32L) * k;
            break;
        }
        case CompressorKind::scalarized: {
            // cyclic sweep over the standard basis, e_1 first
            const int j = static_cast<int>((state.round - 1) % static_cast<std::uint64_t>(d));
            out.value(j) = x_e(j);
            out.entries = 1;
            out.bits = 64;
            break;
        }
        case CompressorKind::norm_quantizer: {
            const double r = x_e.norm();
            if (r > 0.0) {
                for (int i = 0; i < d; ++i) {
                    const double u = x_e(i) / r;
                    out.value(i) = r * std::round(spec.levels * u) / spec.levels;
                }
            }
            out.entries = d;
            out.bits = 64 + d * quantizer_symbol_bits(spec.levels);
            break;
        }
        case CompressorKind::stochastic_quantizer: {
            // unbiased randomized rounding between adjacent grid levels
            const double r = x_e.norm();
            if (r > 0.0) {
                for (int i = 0; i < d; ++i) {
                    const double t = spec.levels * std::abs(x_e(i)) / r;
                    const double lo = std::floor(t);
                    const double up = (next.rng.uniform01() < (t - lo)) ? 1.0 : 0.0;
                    const double mag = r * (lo + up) / spec.levels;
                    out.value(i) = x_e(i) < 0.0 ? -mag : mag;
                }
            }
            out.entries = d;
            out.bits = 64 + d * quantizer_symbol_bits(spec.levels);
            break;
        }
        case CompressorKind::event_triggered: {
            const double threshold = spec.theta0 * std::pow(spec.rho, static_cast<double>(state.round));
            if ((x_e - state.last_sent).norm() > threshold) {
                out.value = x_e;
                next.last_sent = x_e;
                out.entries = d;
                out.bits = 1 + 64L * d;
            } else {
                out.entries = 0;
                out.bits = 1;
            }
            break;
        }
    }
    return {std::move(out), std::move(next)};
}

// Convenience wrapper holding one stream's spec + state.
struct CompressorStream {
    CompressorSpec spec;
    CompressorState state;

    Payload operator()(const Eigen::VectorXd& x_e) {
        auto [payload, next] = compress(spec, state, x_e);
        state = std::move(next);
        return payload;
    }
};

inline CompressorStream make_stream(const CompressorSpec& spec, int dim,
                                    std::uint64_t master, std::string_view label) {
    return CompressorStream{spec, make_compressor_state(spec, dim, derive_stream(master, label))};
}

// Empirical certification of the two defining compressor properties:
//   boundedness  ||C(x,k)|| <= L_c ||x||   (L_c_hat = max sampled ratio)
//   stability of x_{k+1} = x_k - kappa0 C(x_k, k)
//                                          (gamma_hat = worst per-round decay)
struct ContractReport {
    double l_c_hat = 0.0;
    double gamma_hat = 0.0;
    bool pass = false;
    bool diverged = false;
    int dim = 0;
    long horizon = 0;
    int trials = 0;
    std::string note;
};

inline ContractReport verify_st_contract(const CompressorSpec& spec, int dim, long horizon,
                                         int trials, std::uint64_t seed) {
    if (horizon < 100) throw InvalidSpec("verify_st_contract: horizon must be >= 100");
    if (trials < 10) throw InvalidSpec("verify_st_contract: trials must be >= 10");
    validate_compressor(spec, dim);

    ContractReport rep;
    rep.dim = dim;
    rep.horizon = horizon;
    rep.trials = trials;
    rep.gamma_hat = 0.0;

    for (int t = 0; t < trials; ++t) {
        Xoshiro256ss init(derive_stream(seed, "contract/init/" + std::to_string(t)));
        Eigen::VectorXd x(dim);
        for (int i = 0; i < dim; ++i) x(i) = init.normal();
        auto state = make_compressor_state(spec, dim,
                                           derive_stream(seed, "contract/stream/" + std::to_string(t)));
        const double norm0 = x.norm();
        double norm_k = norm0;
        bool hit_zero = false;
        for (long k = 0; k < horizon; ++k) {
            auto [payload, next] = compress(spec, state, x);
            state = std::move(next);
            const double xn = x.norm();
            if (xn > 0.0)
                rep.l_c_hat = std::max(rep.l_c_hat, payload.value.norm() / xn);
            x -= spec.kappa0 * payload.value;
            norm_k = x.norm();
            if (norm_k > 1e12 * norm0) {
                rep.diverged = true;
                rep.note = "error system diverged at round " + std::to_string(k);
                break;
            }
            if (norm_k == 0.0) {
                hit_zero = true;
                break;
            }
        }
        if (rep.diverged) break;
        double gamma_t;
        if (hit_zero || norm_k == 0.0) {
            gamma_t = 0.0;
        } else {
            gamma_t = std::exp((std::log(norm_k) - std::log(norm0)) / static_cast<double>(horizon));
        }
        rep.gamma_hat = std::max(rep.gamma_hat, gamma_t);
    }

    rep.pass = !rep.diverged && rep.gamma_hat < 1.0 && std::isfinite(rep.l_c_hat);
    return rep;
}

// The six kinds the library ships as certified ST compressors (the
// diagnostic scaled_identity is excluded on purpose).
inline std::vector<CompressorSpec> builtin_compressors() {
    std::vector<CompressorSpec> v;
    v.push_back({CompressorKind::identity, 0.5});
    CompressorSpec topk;
    topk.kind = CompressorKind::top_k;
    topk.k = 1;
    v.push_back(topk);
    CompressorSpec nq;
    nq.kind = CompressorKind::norm_quantizer;
    v.push_back(nq);
    CompressorSpec sc;
    sc.kind = CompressorKind::scalarized;
    v.push_back(sc);
    CompressorSpec sq;
    sq.kind = CompressorKind::stochastic_quantizer;
    sq.seed = 1;
    v.push_back(sq);
    CompressorSpec ev;
    ev.kind = CompressorKind::event_triggered;
    v.push_back(ev);
    return v;
}

inline std::string to_string(CompressorKind k) {
    switch (k) {
        case CompressorKind::identity: return "identity";
        case CompressorKind::top_k: return "top_k";
        case CompressorKind::norm_quantizer: return "norm_quantizer";
        case CompressorKind::scalarized: return "scalarized";
        case CompressorKind::stochastic_quantizer: return "stochastic_quantizer";
        case CompressorKind::event_triggered: return "event_triggered";
        case CompressorKind::scaled_identity: return "scaled_identity";
    }
    return "unknown";
}

inline CompressorKind compressor_kind_from_string(const std::string& s) {
    if (s == "identity") return CompressorKind::identity;
    if (s == "top_k") return CompressorKind::top_k;
    if (s == "norm_quantizer") return CompressorKind::norm_quantizer;
    if (s == "scalarized") return CompressorKind::scalarized;
    if (s == "stochastic_quantizer") return CompressorKind::stochastic_quantizer;
    if (s == "event_triggered") return CompressorKind::event_triggered;
    if (s == "scaled_identity") return CompressorKind::scaled_identity;
    throw InvalidSpec("unknown compressor kind: " + s);
}

// Documented L_c bound per built-in kind at library defaults (quantizer
// bounds assume d <= (2*levels)^2 so the grid always makes progress).
inline double documented_lc_bound(CompressorKind k) {
    switch (k) {
        case CompressorKind::norm_quantizer: return 2.0;
        case CompressorKind::stochastic_quantizer: return 2.0;
        default: return 1.0;
    }
}

}  // namespace cdopt
