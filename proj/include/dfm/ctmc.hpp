#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/guidance.hpp"
#include "dfm/paths.hpp"
#include "dfm/posterior.hpp"
#include "dfm/statespace.hpp"

namespace dfm {

// Dense joint generator. entries[z*N + x] = u_t(z, x): the intensity of x -> z,
// so every column sums to zero.
struct RateMatrixDense {
    StateSpace space;
    std::vector<double> entries;

    std::uint64_t n() const { return space.checked_state_count(); }

    double operator()(std::uint64_t z, std::uint64_t x) const { return entries[z * n() + x]; }
    double& at(std::uint64_t z, std::uint64_t x) { return entries[z * n() + x]; }

    void validate(double tol = 1e-9) const {
        const std::uint64_t N = n();
        for (std::uint64_t x = 0; x < N; ++x) {
            double col = 0.0;
            for (std::uint64_t z = 0; z < N; ++z) {
                const double v = entries[z * N + x];
                if (z != x && v < -tol) throw precondition_error("RateMatrixDense: negative off-diagonal");
                col += v;
            }
            if (std::abs(col) > tol) throw precondition_error("RateMatrixDense: column sum not zero");
        }
    }

    // dq[z] = sum_x u(z, x) q[x]
    void apply(std::span<const double> q, std::span<double> dq) const {
        const std::uint64_t N = n();
        for (std::uint64_t z = 0; z < N; ++z) {
            double s = 0.0;
            const double* row = entries.data() + z * N;
            for (std::uint64_t x = 0; x < N; ++x) s += row[x] * q[x];
            dq[z] = s;
        }
    }
};

// Joint generator of the conditional path toward a fixed clean state x1.
inline RateMatrixDense dense_conditional_generator(const ConditionalPath& path, double t,
                                                   std::span<const int> x1) {
    const StateSpace& sp = path.space();
    const std::uint64_t N = sp.checked_state_count();
    RateMatrixDense U{sp, std::vector<double>(N * N, 0.0)};
    for (std::uint64_t xi = 0; xi < N; ++xi) {
        const auto x = sp.state_of(xi);
        for (int d = 0; d < sp.dims; ++d) {
            const auto row = path.cond_rate_row(t, x[static_cast<std::size_t>(d)], x1[static_cast<std::size_t>(d)]);
            auto z = x;
            for (int s = 0; s < sp.alphabet_size; ++s) {
                z[static_cast<std::size_t>(d)] = s;
                U.at(sp.index_of(z), xi) += row[static_cast<std::size_t>(s)];
            }
        }
    }
    return U;
}

// Joint generator obtained by marginalizing the conditional rate over
// caller-supplied factorized rows (source posterior, guided posterior, ...).
inline RateMatrixDense dense_rate_from_rows(
    const ConditionalPath& path, double t,
    const std::function<FactorizedPosterior(std::span<const int>)>& rows_for) {
    const StateSpace& sp = path.space();
    const std::uint64_t N = sp.checked_state_count();
    RateMatrixDense U{sp, std::vector<double>(N * N, 0.0)};
    for (std::uint64_t xi = 0; xi < N; ++xi) {
        const auto x = sp.state_of(xi);
        const auto rows = rows_for(x);
        for (int d = 0; d < sp.dims; ++d) {
            const auto rate = path.marginal_rate_row(t, x[static_cast<std::size_t>(d)], rows.row(d));
            auto z = x;
            for (int s = 0; s < sp.alphabet_size; ++s) {
                z[static_cast<std::size_t>(d)] = s;
                U.at(sp.index_of(z), xi) += rate[static_cast<std::size_t>(s)];
            }
        }
    }
    return U;
}

// Off-diagonal rescaling U'(z,x) = factor(z,x) * U(z,x); diagonals rebuilt.
inline RateMatrixDense dense_rate_scaled(
    const RateMatrixDense& base,
    const std::function<double(std::span<const int>, std::span<const int>)>& factor) {
    const StateSpace& sp = base.space;
    const std::uint64_t N = base.n();
    RateMatrixDense U{sp, std::vector<double>(N * N, 0.0)};
    for (std::uint64_t x = 0; x < N; ++x) {
        const auto xs = sp.state_of(x);
        double col = 0.0;
        for (std::uint64_t z = 0; z < N; ++z) {
            if (z == x) continue;
            const double v = base.entries[z * N + x];
            if (v == 0.0) continue;
            const double w = v * factor(sp.state_of(z), xs);
            U.entries[z * N + x] = w;
            col += w;
        }
        U.entries[x * N + x] = -col;
    }
    return U;
}

struct KolmogorovResult {
    std::vector<double> grid_times;
    std::vector<Pmf> trajectory;
    double max_drift = 0.0;  // worst |sum - 1| before renormalization
};

// RK4 integration of the forward equation dq/dt = U_t q on [t0, t1], with
// per-step renormalization. The rate callback is evaluated at the usual four
// stage times (midpoint shared).
inline KolmogorovResult kolmogorov_integrate(const std::function<RateMatrixDense(double)>& rate_fn,
                                             const Pmf& q0, std::int64_t steps, double t0 = 0.0,
                                             double t1 = 1.0) {
    if (steps < 1) throw precondition_error("kolmogorov_integrate: steps must be >= 1");
    if (!(t1 > t0)) throw precondition_error("kolmogorov_integrate: empty time interval");
    const StateSpace sp = q0.space();
    const std::uint64_t N = sp.checked_state_count();
    const double h = (t1 - t0) / static_cast<double>(steps);

    KolmogorovResult res;
    res.grid_times.push_back(t0);
    res.trajectory.push_back(q0);
    std::vector<double> q(q0.weights());
    std::vector<double> k1(N), k2(N), k3(N), k4(N), tmp(N);

    for (std::int64_t k = 0; k < steps; ++k) {
        const double t = t0 + static_cast<double>(k) * h;
        const auto U1 = rate_fn(t);
        const auto U2 = rate_fn(t + 0.5 * h);
        const auto U4 = rate_fn(t + h);
        U1.apply(q, k1);
        for (std::uint64_t i = 0; i < N; ++i) tmp[i] = q[i] + 0.5 * h * k1[i];
        U2.apply(tmp, k2);
        for (std::uint64_t i = 0; i < N; ++i) tmp[i] = q[i] + 0.5 * h * k2[i];
        U2.apply(tmp, k3);
        for (std::uint64_t i = 0; i < N; ++i) tmp[i] = q[i] + h * k3[i];
        U4.apply(tmp, k4);
        double sum = 0.0;
        double mn = 0.0;
        for (std::uint64_t i = 0; i < N; ++i) {
            q[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            mn = std::min(mn, q[i]);
            if (q[i] < 0.0) q[i] = 0.0;
            sum += q[i];
        }
        if (mn < -1e-8) throw numeric_error("kolmogorov_integrate: negative mass beyond tolerance");
        res.max_drift = std::max(res.max_drift, std::abs(sum - 1.0));
        for (std::uint64_t i = 0; i < N; ++i) q[i] /= sum;
        res.grid_times.push_back(t0 + static_cast<double>(k + 1) * h);
        res.trajectory.push_back(Pmf::normalized(sp, q));
    }
    return res;
}

// First-order transition kernel of Eq.-2 form: delta_current + h * rate_row,
// valid only while h <= 1/|rate(current,current)|.
inline std::vector<double> euler_step_prob(std::span<const double> rate_row, double h, int current) {
    if (!(h > 0.0)) throw precondition_error("euler_step_prob: h must be positive");
    const double diag = rate_row[static_cast<std::size_t>(current)];
    if (diag < 0.0 && h > 1.0 / std::abs(diag))
        throw precondition_error("euler_step_prob: step too large for first-order validity");
    std::vector<double> p(rate_row.size());
    double sum = 0.0;
    for (std::size_t a = 0; a < rate_row.size(); ++a) {
        double v = (static_cast<int>(a) == current ? 1.0 : 0.0) + h * rate_row[a];
        if (v < 0.0) v = 0.0;
        p[a] = v;
        sum += v;
    }
    if (!(sum > 0.0)) throw numeric_error("euler_step_prob: degenerate row");
    for (double& v : p) v /= sum;
    return p;
}

// ---------------------------------------------------------------------------
// Always-valid jump sampling
// ---------------------------------------------------------------------------

struct SamplerConfig {
    std::int64_t steps = 64;
    InitKind initial = InitKind::uniform;
    std::vector<double> custom_init;  // used when initial == custom
    std::uint64_t seed = 0;
    bool final_posterior_draw = true;
    int threads = 0;                 // 0 = hardware concurrency
    double rate_time_floor = 1e-3;   // rates evaluated at min(t, 1 - floor)
    std::vector<double> dump_times;  // optional trajectory snapshots

    void validate() const {
        if (steps < 1) throw precondition_error("SamplerConfig: steps must be >= 1");
    }
};

struct CallStats {
    std::int64_t chains = 0;
    std::int64_t jump_steps = 0;
    std::uint64_t posterior_calls = 0;
    std::uint64_t guidance_calls = 0;        // during the jump loop
    std::uint64_t guidance_final_calls = 0;  // final posterior draw

    // exact per-chain-per-step count; integer division is checked by callers
    std::int64_t guidance_calls_per_step() const {
        const std::int64_t denom = chains * jump_steps;
        return denom > 0 ? static_cast<std::int64_t>(guidance_calls) / denom : 0;
    }
};

struct SampleRun {
    SampleBatch terminal;
    CallStats stats;
    std::vector<std::pair<double, SampleBatch>> dumps;
};

namespace rngtag {
constexpr std::uint64_t kInit = 1, kDraw = 2, kJump = 3, kDest = 4, kFinal = 5;
}

namespace detail {

// One coordinate of the always-valid update: total intensity lambda out of
// `xd`, jump with probability 1 - exp(-h*lambda), destination ~ rates.
inline int jump_from_rates(std::span<const double> rate_row, int xd, double h, double u_jump,
                           double u_dest) {
    double lambda = 0.0;
    for (std::size_t s = 0; s < rate_row.size(); ++s)
        if (static_cast<int>(s) != xd && rate_row[s] > 0.0) lambda += rate_row[s];
    if (lambda <= 0.0) return xd;
    const double p_jump = -std::expm1(-h * lambda);
    if (u_jump > p_jump) return xd;
    double acc = 0.0;
    const double target = u_dest * lambda;
    for (std::size_t s = 0; s < rate_row.size(); ++s) {
        if (static_cast<int>(s) == xd || rate_row[s] <= 0.0) continue;
        acc += rate_row[s];
        if (target < acc) return static_cast<int>(s);
    }
    for (std::size_t s = rate_row.size(); s-- > 0;)
        if (static_cast<int>(s) != xd && rate_row[s] > 0.0) return static_cast<int>(s);
    return xd;
}

inline std::vector<double> cdf_of(std::span<const double> row) {
    std::vector<double> cdf(row.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        acc += row[i];
        cdf[i] = acc;
    }
    if (!cdf.empty()) cdf.back() = std::max(cdf.back(), 1.0);
    return cdf;
}

}  // namespace detail

// Spec-level op: one parallel coordinate update of the whole batch given
// already-drawn clean draws x1. Mixture paths jump straight to x1^d; general
// paths sample the destination from the conditional rate row.
inline SampleBatch jump_step(const SampleBatch& x_t, std::span<const std::int32_t> x1_draws,
                             const ConditionalPath& path, double t, double h, std::uint64_t seed,
                             std::int64_t step_index = 0) {
    if (!(h > 0.0) || t + h > 1.0 + 1e-12) throw precondition_error("jump_step: need h > 0 and t + h <= 1");
    const StateSpace& sp = x_t.space;
    SampleBatch out = x_t;
    const bool mixture = path.kind() == PathKind::mixture;
    const double coeff = mixture ? path.mixture_coeff(t) : 0.0;
    for (std::int64_t i = 0; i < x_t.size(); ++i) {
        const auto cur = x_t.state(i);
        auto nxt = out.state(i);
        for (int d = 0; d < sp.dims; ++d) {
            const int xd = cur[static_cast<std::size_t>(d)];
            const int x1d = static_cast<int>(x1_draws[static_cast<std::size_t>(i * sp.dims + d)]);
            const double uj = rng::uniform(seed, rngtag::kJump, static_cast<std::uint64_t>(step_index),
                                           static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(d));
            if (mixture) {
                if (x1d == xd) continue;
                const double p_jump = -std::expm1(-h * coeff);
                if (uj <= p_jump) nxt[static_cast<std::size_t>(d)] = x1d;
            } else {
                const auto row = path.cond_rate_row(t, xd, x1d);
                const double ud = rng::uniform(seed, rngtag::kDest, static_cast<std::uint64_t>(step_index),
                                               static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(d));
                nxt[static_cast<std::size_t>(d)] = detail::jump_from_rates(row, xd, h, 1.0 - uj, ud);
            }
        }
    }
    out.time = t + h;
    return out;
}

// ---------------------------------------------------------------------------
// Chain sampler (Algorithms 1-3 family)
//
// Runs the jump loop while t + h < 1, then performs one final posterior draw
// at the last grid time. Guidance-model invocations are counted per chain per
// step at their semantic call sites, independent of any caching.
// ---------------------------------------------------------------------------

class ChainSampler {
  public:
    ChainSampler(const PosteriorModel& posterior, const ConditionalPath& path,
                 const GuidanceModel* guidance, GuidanceScheme scheme, SamplerConfig config)
        : posterior_(posterior), path_(path), guidance_(guidance), scheme_(scheme), cfg_(config) {
        cfg_.validate();
        scheme_.validate();
        if (scheme_.kind != GuidanceSchemeKind::none && guidance_ == nullptr)
            throw config_error("sampler: guidance scheme requires a guidance model");
        if (scheme_.kind == GuidanceSchemeKind::posterior_based &&
            guidance_->kind() != GuidanceKind::posterior_based)
            throw config_error("sampler: posterior-based scheme needs a matrix-valued guidance model");
        if ((scheme_.kind == GuidanceSchemeKind::rate_based ||
             scheme_.kind == GuidanceSchemeKind::predictor ||
             scheme_.kind == GuidanceSchemeKind::first_order) &&
            guidance_->kind() != GuidanceKind::rate_based)
            throw config_error("sampler: rate-family schemes need a scalar guidance model");
        if (rate_family() && path_.kind() != PathKind::mixture && cfg_.initial != InitKind::masked)
            throw config_error("sampler: marginal-mode rate guidance requires the mixture path");
    }

    SampleRun run(std::int64_t chains) {
        const StateSpace& sp = posterior_.space();
        const int D = sp.dims;
        const double h = 1.0 / static_cast<double>(cfg_.steps);

        SampleRun out;
        out.stats.chains = chains;
        out.terminal.space = sp;
        out.terminal.states.assign(static_cast<std::size_t>(chains * D), 0);

        // initial states from q0
        const auto q0cdf = detail::cdf_of(init_pmf());
        parallel_for(chains, cfg_.threads, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t c = lo; c < hi; ++c) {
                auto st = out.terminal.state(c);
                for (int d = 0; d < D; ++d) {
                    const double u = rng::uniform(cfg_.seed, rngtag::kInit, static_cast<std::uint64_t>(c),
                                                  static_cast<std::uint64_t>(d));
                    st[static_cast<std::size_t>(d)] = rng::categorical_from_cdf(q0cdf, u);
                }
            }
        });

        std::atomic<std::uint64_t> guidance_calls{0};
        const std::int64_t jump_steps = cfg_.steps - 1;
        for (std::int64_t k = 0; k < jump_steps; ++k) {
            const double t = static_cast<double>(k) * h;
            advance_step(out.terminal, t, h, k, chains, guidance_calls);
            maybe_dump(out, t + h);
        }
        out.stats.jump_steps = jump_steps;
        out.stats.posterior_calls = static_cast<std::uint64_t>(chains * jump_steps);
        out.stats.guidance_calls = guidance_calls.load();

        // final posterior draw at the last grid time
        const double t_final = static_cast<double>(jump_steps) * h;
        if (cfg_.final_posterior_draw) {
            final_draw(out.terminal, t_final, chains, out.stats);
            out.terminal.time = 1.0;
        } else {
            out.terminal.time = t_final;
        }
        return out;
    }

  private:
    bool rate_family() const {
        return scheme_.kind == GuidanceSchemeKind::rate_based ||
               scheme_.kind == GuidanceSchemeKind::predictor ||
               scheme_.kind == GuidanceSchemeKind::first_order;
    }

    bool conditional_mode() const { return cfg_.initial == InitKind::masked; }

    std::vector<double> init_pmf() const {
        if (cfg_.initial == InitKind::custom) {
            if (cfg_.custom_init.size() != static_cast<std::size_t>(posterior_.space().alphabet_size))
                throw config_error("sampler: custom init pmf has wrong length");
            return cfg_.custom_init;
        }
        // mixture paths carry their q0; derive the same for metric (uniform)
        if (cfg_.initial == InitKind::masked) {
            if (!posterior_.space().mask_symbol)
                throw config_error("sampler: masked init requires a mask symbol");
            std::vector<double> q0(static_cast<std::size_t>(posterior_.space().alphabet_size), 0.0);
            q0[static_cast<std::size_t>(*posterior_.space().mask_symbol)] = 1.0;
            return q0;
        }
        return std::vector<double>(static_cast<std::size_t>(posterior_.space().alphabet_size),
                                   1.0 / static_cast<double>(posterior_.space().alphabet_size));
    }

    // deduplicate chain states; returns slot per chain plus the distinct list
    void collect_states(const SampleBatch& batch, std::int64_t chains, std::vector<int>& slot_of,
                        std::vector<std::vector<int>>& distinct) const {
        const StateSpace& sp = batch.space;
        slot_of.assign(static_cast<std::size_t>(chains), -1);
        distinct.clear();
        std::unordered_map<std::uint64_t, int> seen;
        seen.reserve(1024);
        for (std::int64_t c = 0; c < chains; ++c) {
            const auto st = batch.state(c);
            std::uint64_t key = 1469598103934665603ULL;
            for (int d = 0; d < sp.dims; ++d)
                key = rng::splitmix64(key ^ static_cast<std::uint64_t>(st[static_cast<std::size_t>(d)] + 1));
            auto [it, inserted] = seen.emplace(key, static_cast<int>(distinct.size()));
            if (inserted) distinct.emplace_back(st.begin(), st.end());
            slot_of[static_cast<std::size_t>(c)] = it->second;
        }
    }

    void advance_step(SampleBatch& batch, double t, double h, std::int64_t step, std::int64_t chains,
                      std::atomic<std::uint64_t>& guidance_calls) {
        const StateSpace& sp = batch.space;
        const int D = sp.dims;
        const int A = sp.alphabet_size;
        const double t_rate = std::min(t, 1.0 - cfg_.rate_time_floor);

        std::vector<int> slot_of;
        std::vector<std::vector<int>> distinct;
        collect_states(batch, chains, slot_of, distinct);
        const std::int64_t n_distinct = static_cast<std::int64_t>(distinct.size());

        // per-distinct-state tables
        struct StateTable {
            std::vector<double> draw_cdf;    // D x A sampling rows (guided or source), cumulative
            std::vector<double> src_rows;    // D x A source posterior rows
            double h_x = 1.0;                // scalar h at the state (rate family)
            std::vector<double> grad_log;    // first-order gradient
            std::vector<double> neighbor_h;  // D x A scalar h at single-coordinate modifications
        };
        std::vector<StateTable> tables(static_cast<std::size_t>(n_distinct));
        const bool need_neighbors =
            rate_family() && scheme_.kind != GuidanceSchemeKind::first_order;

        parallel_for(n_distinct, cfg_.threads, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                auto& tab = tables[static_cast<std::size_t>(i)];
                const auto& x = distinct[static_cast<std::size_t>(i)];
                const auto post = eval_posterior(t, x);
                tab.src_rows = post.data();
                std::vector<double> draw_rows;
                if (scheme_.kind == GuidanceSchemeKind::posterior_based) {
                    const auto hmat = guidance_->matrix(t, x);
                    draw_rows = guided_posterior(post, hmat).data();
                } else {
                    draw_rows = normalized_rows(post);
                }
                tab.draw_cdf.resize(draw_rows.size());
                for (int d = 0; d < D; ++d) {
                    double acc = 0.0;
                    for (int a = 0; a < A; ++a) {
                        acc += draw_rows[static_cast<std::size_t>(d * A + a)];
                        tab.draw_cdf[static_cast<std::size_t>(d * A + a)] = acc;
                    }
                    tab.draw_cdf[static_cast<std::size_t>(d * A + A - 1)] = 1.0;
                }
                if (rate_family()) tab.h_x = guidance_->value(t, x);
                if (scheme_.kind == GuidanceSchemeKind::first_order)
                    tab.grad_log = guidance_->grad_log_value(t, x);
                if (need_neighbors && !conditional_mode()) {
                    // marginal mode touches every single-coordinate modification
                    tab.neighbor_h.assign(static_cast<std::size_t>(D) * static_cast<std::size_t>(A), 0.0);
                    std::vector<int> z(x);
                    for (int d = 0; d < D; ++d) {
                        const int orig = z[static_cast<std::size_t>(d)];
                        for (int a = 0; a < A; ++a) {
                            z[static_cast<std::size_t>(d)] = a;
                            tab.neighbor_h[static_cast<std::size_t>(d * A + a)] =
                                (a == orig) ? tab.h_x : guidance_->value(t, z);
                        }
                        z[static_cast<std::size_t>(d)] = orig;
                    }
                }
            }
        });

        // conditional mode needs h at per-chain candidate destinations; draw the
        // clean symbols first, then batch-evaluate h over the distinct candidates.
        std::vector<std::int32_t> x1_draws(static_cast<std::size_t>(chains * D));
        parallel_for(chains, cfg_.threads, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t c = lo; c < hi; ++c) {
                const auto& tab = tables[static_cast<std::size_t>(slot_of[static_cast<std::size_t>(c)])];
                for (int d = 0; d < D; ++d) {
                    const double u = rng::uniform(cfg_.seed, rngtag::kDraw, static_cast<std::uint64_t>(step),
                                                  static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(d));
                    const std::span<const double> cdf{tab.draw_cdf.data() + static_cast<std::size_t>(d) * A,
                                                      static_cast<std::size_t>(A)};
                    x1_draws[static_cast<std::size_t>(c * D + d)] =
                        static_cast<std::int32_t>(rng::categorical_from_cdf(cdf, u));
                }
            }
        });

        std::unordered_map<std::uint64_t, double> cond_h;
        if (need_neighbors && conditional_mode())
            cond_h = conditional_neighbor_h(batch, x1_draws, t, chains);

        const double coeff = path_.kind() == PathKind::mixture ? path_.mixture_coeff(t_rate) : 0.0;
        std::atomic<std::uint64_t> calls{0};

        parallel_for(chains, cfg_.threads, [&](std::int64_t lo, std::int64_t hi) {
            std::uint64_t local_calls = 0;
            std::vector<double> rate_row(static_cast<std::size_t>(A));
            std::vector<int> next(static_cast<std::size_t>(D));
            for (std::int64_t c = lo; c < hi; ++c) {
                auto st = batch.state(c);
                const auto& tab = tables[static_cast<std::size_t>(slot_of[static_cast<std::size_t>(c)])];
                if (scheme_.kind == GuidanceSchemeKind::posterior_based) local_calls += 1;  // H matrix
                if (rate_family()) local_calls += 1;  // h at the current state
                if (scheme_.kind == GuidanceSchemeKind::first_order) local_calls += 1;  // gradient pass
                for (int d = 0; d < D; ++d) {
                    const int xd = st[static_cast<std::size_t>(d)];
                    const int x1d = static_cast<int>(x1_draws[static_cast<std::size_t>(c * D + d)]);
                    const double uj = rng::uniform(cfg_.seed, rngtag::kJump, static_cast<std::uint64_t>(step),
                                                   static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(d));
                    int nd = xd;
                    switch (scheme_.kind) {
                        case GuidanceSchemeKind::none:
                        case GuidanceSchemeKind::posterior_based: {
                            if (path_.kind() == PathKind::mixture) {
                                if (x1d != xd && uj <= -std::expm1(-h * coeff)) nd = x1d;
                            } else {
                                const auto row = path_.cond_rate_row(t_rate, xd, x1d);
                                const double ud = rng::uniform(cfg_.seed, rngtag::kDest,
                                                               static_cast<std::uint64_t>(step),
                                                               static_cast<std::uint64_t>(c),
                                                               static_cast<std::uint64_t>(d));
                                nd = detail::jump_from_rates(row, xd, h, uj, ud);
                            }
                            break;
                        }
                        case GuidanceSchemeKind::rate_based:
                        case GuidanceSchemeKind::predictor: {
                            const double power =
                                scheme_.kind == GuidanceSchemeKind::predictor ? scheme_.gamma : 1.0;
                            if (conditional_mode()) {
                                local_calls += 1;  // h at the candidate destination
                                if (x1d != xd) {
                                    const double hz = cond_h.at(neighbor_key(st, d, x1d));
                                    const double f = std::pow(hz / tab.h_x, power);
                                    const double lam = f * coeff;
                                    if (uj <= -std::expm1(-h * lam)) nd = x1d;
                                }
                            } else {
                                local_calls += static_cast<std::uint64_t>(A - 1);
                                const std::span<const double> post_row{
                                    tab.src_rows.data() + static_cast<std::size_t>(d) * A,
                                    static_cast<std::size_t>(A)};
                                for (int a = 0; a < A; ++a) {
                                    rate_row[static_cast<std::size_t>(a)] =
                                        (a == xd) ? 0.0
                                                  : coeff * post_row[static_cast<std::size_t>(a)] *
                                                        std::pow(tab.neighbor_h[static_cast<std::size_t>(d * A + a)] /
                                                                     tab.h_x,
                                                                 power);
                                }
                                const double ud = rng::uniform(cfg_.seed, rngtag::kDest,
                                                               static_cast<std::uint64_t>(step),
                                                               static_cast<std::uint64_t>(c),
                                                               static_cast<std::uint64_t>(d));
                                nd = detail::jump_from_rates(rate_row, xd, h, uj, ud);
                            }
                            break;
                        }
                        case GuidanceSchemeKind::first_order: {
                            const std::span<const double> post_row{
                                tab.src_rows.data() + static_cast<std::size_t>(d) * A,
                                static_cast<std::size_t>(A)};
                            const double gd = tab.grad_log[static_cast<std::size_t>(d)];
                            for (int a = 0; a < A; ++a) {
                                rate_row[static_cast<std::size_t>(a)] =
                                    (a == xd) ? 0.0
                                              : coeff * post_row[static_cast<std::size_t>(a)] *
                                                    std::exp(static_cast<double>(a - xd) * gd);
                            }
                            const double ud = rng::uniform(cfg_.seed, rngtag::kDest,
                                                           static_cast<std::uint64_t>(step),
                                                           static_cast<std::uint64_t>(c),
                                                           static_cast<std::uint64_t>(d));
                            nd = detail::jump_from_rates(rate_row, xd, h, uj, ud);
                            break;
                        }
                    }
                    next[static_cast<std::size_t>(d)] = nd;
                }
                for (int d = 0; d < D; ++d) st[static_cast<std::size_t>(d)] = next[static_cast<std::size_t>(d)];
            }
            calls.fetch_add(local_calls, std::memory_order_relaxed);
        });
        guidance_calls.fetch_add(calls.load(), std::memory_order_relaxed);
    }

    // batch-evaluate h at the distinct single-coordinate candidate states
    std::unordered_map<std::uint64_t, double> conditional_neighbor_h(
        const SampleBatch& batch, const std::vector<std::int32_t>& x1_draws, double t,
        std::int64_t chains) const {
        const StateSpace& sp = batch.space;
        const int D = sp.dims;
        std::unordered_map<std::uint64_t, std::vector<int>> candidates;
        for (std::int64_t c = 0; c < chains; ++c) {
            const auto st = batch.state(c);
            for (int d = 0; d < D; ++d) {
                std::vector<int> z(st.begin(), st.end());
                z[static_cast<std::size_t>(d)] = static_cast<int>(x1_draws[static_cast<std::size_t>(c * D + d)]);
                candidates.emplace(state_key(z), std::move(z));
            }
        }
        std::vector<std::pair<std::uint64_t, std::vector<int>>> flat(candidates.begin(), candidates.end());
        std::vector<double> values(flat.size());
        parallel_for(static_cast<std::int64_t>(flat.size()), cfg_.threads,
                     [&](std::int64_t lo, std::int64_t hi) {
                         for (std::int64_t i = lo; i < hi; ++i)
                             values[static_cast<std::size_t>(i)] =
                                 guidance_->value(t, flat[static_cast<std::size_t>(i)].second);
                     });
        std::unordered_map<std::uint64_t, double> out;
        out.reserve(flat.size());
        for (std::size_t i = 0; i < flat.size(); ++i) out.emplace(flat[i].first, values[i]);
        return out;
    }

    static std::uint64_t state_key(std::span<const int> st) {
        std::uint64_t key = 1469598103934665603ULL;
        for (const int s : st) key = rng::splitmix64(key ^ static_cast<std::uint64_t>(s + 1));
        return key;
    }

    static std::uint64_t neighbor_key(std::span<const std::int32_t> st, int d, int value) {
        std::uint64_t key = 1469598103934665603ULL;
        for (std::size_t i = 0; i < st.size(); ++i) {
            const int s = (i == static_cast<std::size_t>(d)) ? value : static_cast<int>(st[i]);
            key = rng::splitmix64(key ^ static_cast<std::uint64_t>(s + 1));
        }
        return key;
    }

    FactorizedPosterior eval_posterior(double t, std::span<const int> x) const {
        if (const auto* exact = dynamic_cast<const ExactPosterior*>(&posterior_)) {
            auto ev = exact->evaluate_full(t, x, true);
            return FactorizedPosterior(posterior_.space().dims, posterior_.space().alphabet_size,
                                       std::move(ev.rows));
        }
        return posterior_.evaluate(t, x);
    }

    // re-normalized copy; shares the normalize step with the guided branch so
    // that r == 1 reproduces unguided sampling bit for bit
    static std::vector<double> normalized_rows(const FactorizedPosterior& post) {
        std::vector<double> rows = post.data();
        const int D = post.dims();
        const int A = post.alphabet();
        for (int d = 0; d < D; ++d) {
            double z = 0.0;
            for (int a = 0; a < A; ++a) z += rows[static_cast<std::size_t>(d * A + a)];
            for (int a = 0; a < A; ++a) rows[static_cast<std::size_t>(d * A + a)] /= z;
        }
        return rows;
    }

    void final_draw(SampleBatch& batch, double t, std::int64_t chains, CallStats& stats) {
        const StateSpace& sp = batch.space;
        const int D = sp.dims;
        const int A = sp.alphabet_size;
        std::vector<int> slot_of;
        std::vector<std::vector<int>> distinct;
        collect_states(batch, chains, slot_of, distinct);

        std::vector<std::vector<double>> cdfs(distinct.size());
        parallel_for(static_cast<std::int64_t>(distinct.size()), cfg_.threads,
                     [&](std::int64_t lo, std::int64_t hi) {
                         for (std::int64_t i = lo; i < hi; ++i) {
                             const auto& x = distinct[static_cast<std::size_t>(i)];
                             const auto post = eval_posterior(t, x);
                             std::vector<double> rows;
                             if (scheme_.kind == GuidanceSchemeKind::posterior_based) {
                                 rows = guided_posterior(post, guidance_->matrix(t, x)).data();
                             } else {
                                 rows = normalized_rows(post);
                             }
                             auto& cdf = cdfs[static_cast<std::size_t>(i)];
                             cdf.resize(rows.size());
                             for (int d = 0; d < D; ++d) {
                                 double acc = 0.0;
                                 for (int a = 0; a < A; ++a) {
                                     acc += rows[static_cast<std::size_t>(d * A + a)];
                                     cdf[static_cast<std::size_t>(d * A + a)] = acc;
                                 }
                                 cdf[static_cast<std::size_t>(d * A + A - 1)] = 1.0;
                             }
                         }
                     });
        stats.posterior_calls += static_cast<std::uint64_t>(chains);
        if (scheme_.kind == GuidanceSchemeKind::posterior_based)
            stats.guidance_final_calls += static_cast<std::uint64_t>(chains);

        parallel_for(chains, cfg_.threads, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t c = lo; c < hi; ++c) {
                auto st = batch.state(c);
                const auto& cdf = cdfs[static_cast<std::size_t>(slot_of[static_cast<std::size_t>(c)])];
                for (int d = 0; d < D; ++d) {
                    const double u = rng::uniform(cfg_.seed, rngtag::kFinal, static_cast<std::uint64_t>(c),
                                                  static_cast<std::uint64_t>(d));
                    const std::span<const double> row{cdf.data() + static_cast<std::size_t>(d) * A,
                                                      static_cast<std::size_t>(A)};
                    st[static_cast<std::size_t>(d)] = rng::categorical_from_cdf(row, u);
                }
            }
        });
    }

    void maybe_dump(SampleRun& run, double t_now) {
        for (const double want : cfg_.dump_times) {
            const double h = 1.0 / static_cast<double>(cfg_.steps);
            if (std::abs(want - t_now) < 0.5 * h) {
                bool already = false;
                for (const auto& d : run.dumps)
                    if (std::abs(d.first - want) < 0.25 * h) already = true;
                if (!already) run.dumps.emplace_back(t_now, run.terminal);
            }
        }
    }

    const PosteriorModel& posterior_;
    const ConditionalPath& path_;
    const GuidanceModel* guidance_;
    GuidanceScheme scheme_;
    SamplerConfig cfg_;
};

// Algorithm-1 style sampling from the source posterior alone.
inline SampleRun sample_unguided(const PosteriorModel& posterior, const ConditionalPath& path,
                                 const SamplerConfig& config, std::int64_t chains) {
    ChainSampler s(posterior, path, nullptr, GuidanceScheme{GuidanceSchemeKind::none, 1.0}, config);
    return s.run(chains);
}

inline SampleRun sample_guided(const PosteriorModel& posterior, const ConditionalPath& path,
                               const GuidanceModel& guidance, GuidanceScheme scheme,
                               const SamplerConfig& config, std::int64_t chains) {
    ChainSampler s(posterior, path, &guidance, scheme, config);
    return s.run(chains);
}

}  // namespace dfm
