#pragma once

#include <memory>
#include <span>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/nn.hpp"
#include "dfm/paths.hpp"
#include "dfm/statespace.hpp"

namespace dfm {

// p_{1|t}(x_1 | x): factorized posterior over clean states given the current
// noisy state. Backends: exact enumeration, tabular, MLP.
class PosteriorModel {
  public:
    virtual ~PosteriorModel() = default;
    virtual const StateSpace& space() const = 0;
    virtual FactorizedPosterior evaluate(double t, std::span<const int> x) const = 0;
};

// Full-joint evaluation result of the exact backend.
struct ExactPosteriorEval {
    std::vector<double> joint;    // weights over the p1 support list, normalized
    std::vector<double> rows;     // D x |S| factorized marginals
    double normalizer = 0.0;      // p_t(x) before normalization
    bool backoff_used = false;
};

// Exact posterior by enumeration over the support of p1.
//
// p_{1|t}(x1|x) ∝ p_{t|1}(x|x1) p1(x1). States that are unreachable at time t
// (zero total mass) raise by default; samplers opt into a per-coordinate
// backoff that conditions each coordinate only on its own observation. Such
// states arise only through simultaneous parallel jumps and carry O(h) mass.
class ExactPosterior : public PosteriorModel {
  public:
    ExactPosterior(Pmf p1, ConditionalPath path, std::uint64_t cap = kDefaultEnumerationCap)
        : p1_(std::move(p1)), path_(std::move(path)) {
        if (!(p1_.space() == path_.space()))
            throw precondition_error("ExactPosterior: pmf and path disagree on the state space");
        p1_.space().checked_state_count(cap);
        const StateSpace& sp = p1_.space();
        if (sp.mask_symbol) {
            // the mask is pure noise; the data distribution must not use it
            for (std::uint64_t i = 0; i < p1_.size(); ++i) {
                if (p1_[i] <= 0.0) continue;
                for (const int s : sp.state_of(i))
                    if (sp.is_mask(s))
                        throw precondition_error("ExactPosterior: p1 puts mass on the mask symbol");
            }
        }
        for (std::uint64_t i = 0; i < p1_.size(); ++i) {
            if (p1_[i] > 0.0) {
                support_index_.push_back(i);
                support_weight_.push_back(p1_[i]);
                const auto st = sp.state_of(i);
                support_states_.insert(support_states_.end(), st.begin(), st.end());
            }
        }
        // per-coordinate marginals of p1, for the backoff path
        coord_marginal_.assign(static_cast<std::size_t>(sp.dims) * static_cast<std::size_t>(sp.alphabet_size), 0.0);
        for (std::size_t k = 0; k < support_index_.size(); ++k) {
            for (int d = 0; d < sp.dims; ++d) {
                const int s = support_states_[k * static_cast<std::size_t>(sp.dims) + static_cast<std::size_t>(d)];
                coord_marginal_[static_cast<std::size_t>(d * sp.alphabet_size + s)] += support_weight_[k];
            }
        }
    }

    const StateSpace& space() const override { return p1_.space(); }
    const Pmf& p1() const { return p1_; }
    const ConditionalPath& path() const { return path_; }
    std::size_t support_size() const { return support_index_.size(); }
    std::span<const std::uint64_t> support_indices() const { return support_index_; }
    std::span<const int> support_state(std::size_t k) const {
        return {support_states_.data() + k * static_cast<std::size_t>(space().dims),
                static_cast<std::size_t>(space().dims)};
    }

    FactorizedPosterior evaluate(double t, std::span<const int> x) const override {
        auto ev = evaluate_full(t, x, false);
        return FactorizedPosterior(space().dims, space().alphabet_size, std::move(ev.rows));
    }

    ExactPosteriorEval evaluate_full(double t, std::span<const int> x, bool allow_backoff) const {
        const StateSpace& sp = space();
        const int D = sp.dims;
        const int A = sp.alphabet_size;
        // one likelihood table per time: Q[a][b] = q_{t|1}(a | b)
        std::vector<double> Q(static_cast<std::size_t>(A) * static_cast<std::size_t>(A));
        for (int b = 0; b < A; ++b) {
            const auto col = path_.cond_prob_row(t, b);
            for (int a = 0; a < A; ++a)
                Q[static_cast<std::size_t>(a) * static_cast<std::size_t>(A) + static_cast<std::size_t>(b)] =
                    col[static_cast<std::size_t>(a)];
        }
        ExactPosteriorEval ev;
        ev.joint.resize(support_index_.size());
        double total = 0.0;
        for (std::size_t k = 0; k < support_index_.size(); ++k) {
            double w = support_weight_[k];
            const int* x1 = support_state_ptr(k);
            for (int d = 0; d < D; ++d)
                w *= Q[static_cast<std::size_t>(x[static_cast<std::size_t>(d)]) * static_cast<std::size_t>(A) +
                       static_cast<std::size_t>(x1[d])];
            ev.joint[k] = w;
            total += w;
        }
        ev.normalizer = total;
        ev.rows.assign(static_cast<std::size_t>(D) * static_cast<std::size_t>(A), 0.0);
        if (total > 0.0) {
            const double inv = 1.0 / total;
            for (double& w : ev.joint) w *= inv;
            for (std::size_t k = 0; k < support_index_.size(); ++k) {
                const int* x1 = support_state_ptr(k);
                for (int d = 0; d < D; ++d)
                    ev.rows[static_cast<std::size_t>(d * A + x1[d])] += ev.joint[k];
            }
            return ev;
        }
        if (!allow_backoff)
            throw numeric_error("exact posterior: state unreachable at this time (zero total mass)");
        // Per-coordinate update: row_d(s) ∝ p1-marginal_d(s) * q_{t|1}(x^d | s).
        ev.backoff_used = true;
        ev.joint.assign(support_index_.size(), 0.0);
        for (int d = 0; d < D; ++d) {
            double rs = 0.0;
            for (int s = 0; s < A; ++s) {
                const double v = coord_marginal_[static_cast<std::size_t>(d * A + s)] *
                                 Q[static_cast<std::size_t>(x[static_cast<std::size_t>(d)]) * static_cast<std::size_t>(A) +
                                   static_cast<std::size_t>(s)];
                ev.rows[static_cast<std::size_t>(d * A + s)] = v;
                rs += v;
            }
            if (!(rs > 0.0))
                throw numeric_error("exact posterior: backoff row has zero mass");
            for (int s = 0; s < A; ++s) ev.rows[static_cast<std::size_t>(d * A + s)] /= rs;
        }
        return ev;
    }

  private:
    const int* support_state_ptr(std::size_t k) const {
        return support_states_.data() + k * static_cast<std::size_t>(space().dims);
    }

    Pmf p1_;
    ConditionalPath path_;
    std::vector<std::uint64_t> support_index_;
    std::vector<double> support_weight_;
    std::vector<int> support_states_;
    std::vector<double> coord_marginal_;  // D x |S|
};

// Spec-level op: full posterior plus factorized marginals.
struct ExactPosteriorResult {
    std::vector<double> joint_over_support;
    std::vector<std::uint64_t> support_indices;
    FactorizedPosterior marginals;
};

inline ExactPosteriorResult exact_posterior(const Pmf& p1, const ConditionalPath& path, double t,
                                            std::span<const int> x,
                                            std::uint64_t cap = kDefaultEnumerationCap) {
    ExactPosterior model(p1, path, cap);
    auto ev = model.evaluate_full(t, x, false);
    std::vector<std::uint64_t> idx(model.support_indices().begin(), model.support_indices().end());
    return {std::move(ev.joint), std::move(idx),
            FactorizedPosterior(p1.space().dims, p1.space().alphabet_size, std::move(ev.rows))};
}

// Posterior backed by a trained net producing D x |S| logits; rows softmaxed.
class NetPosterior : public PosteriorModel {
  public:
    NetPosterior(StateSpace space, std::shared_ptr<nn::Net> net)
        : space_(space), net_(std::move(net)) {
        if (net_->output_dim() != space_.dims * space_.alphabet_size)
            throw config_error("NetPosterior: net output must be D*|S| logits");
    }

    const StateSpace& space() const override { return space_; }
    const nn::Net& net() const { return *net_; }
    nn::Net& net() { return *net_; }

    FactorizedPosterior evaluate(double t, std::span<const int> x) const override {
        const int D = space_.dims;
        const int A = space_.alphabet_size;
        std::vector<double> logits(static_cast<std::size_t>(D) * static_cast<std::size_t>(A));
        net_->eval(t, x, logits);
        for (int d = 0; d < D; ++d) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < A; ++a) mx = std::max(mx, logits[static_cast<std::size_t>(d * A + a)]);
            double z = 0.0;
            for (int a = 0; a < A; ++a) {
                double& v = logits[static_cast<std::size_t>(d * A + a)];
                v = std::exp(v - mx);
                z += v;
            }
            for (int a = 0; a < A; ++a) logits[static_cast<std::size_t>(d * A + a)] /= z;
        }
        return FactorizedPosterior(D, A, std::move(logits));
    }

  private:
    StateSpace space_;
    std::shared_ptr<nn::Net> net_;
};

// ---------------------------------------------------------------------------
// Cross-entropy training of posteriors (the standard discrete-flow objective).
// ---------------------------------------------------------------------------

struct PathSample {
    double t;
    std::vector<int> x1;
    std::vector<int> xt;
};

// x1 ~ data pmf, t stratified over [0,1], x_t ~ q_{t|1}(.|x1) coordinate-wise.
inline std::vector<PathSample> draw_path_batch(const PmfSampler& data, const ConditionalPath& path,
                                               int batch, std::uint64_t seed, std::int64_t step) {
    const StateSpace& sp = data.space();
    std::vector<PathSample> out;
    out.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        PathSample s;
        const double u = rng::uniform(seed, 0x7431, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i), 1);
        s.t = (static_cast<double>(i) + u) / static_cast<double>(batch);
        s.x1 = data.draw_state(rng::uniform(seed, 0x7431, static_cast<std::uint64_t>(step),
                                            static_cast<std::uint64_t>(i), 2));
        s.xt.resize(static_cast<std::size_t>(sp.dims));
        for (int d = 0; d < sp.dims; ++d) {
            const auto row = path.cond_prob_row(s.t, s.x1[static_cast<std::size_t>(d)]);
            std::vector<double> cdf(row.size());
            double acc = 0.0;
            for (std::size_t a = 0; a < row.size(); ++a) {
                acc += row[a];
                cdf[a] = acc;
            }
            cdf.back() = 1.0;
            const double ux = rng::uniform(seed, 0x7431, static_cast<std::uint64_t>(step),
                                           static_cast<std::uint64_t>(i), 3 + static_cast<std::uint64_t>(d));
            s.xt[static_cast<std::size_t>(d)] = rng::categorical_from_cdf(cdf, ux);
        }
        out.push_back(std::move(s));
    }
    return out;
}

struct CrossEntropyResult {
    double loss = 0.0;
    std::int64_t clamped = 0;  // model probabilities floored at 1e-12
};

// Mean over the batch of -sum_d log model(t, x_t)[d, x1^d].
inline CrossEntropyResult cross_entropy_loss(const PosteriorModel& model,
                                             std::span<const PathSample> batch) {
    if (batch.empty()) throw precondition_error("cross_entropy_loss: empty batch");
    CrossEntropyResult res;
    for (const auto& s : batch) {
        const auto post = model.evaluate(s.t, s.xt);
        for (int d = 0; d < model.space().dims; ++d) {
            double p = post(d, s.x1[static_cast<std::size_t>(d)]);
            if (p < 1e-12) {
                p = 1e-12;
                ++res.clamped;
            }
            res.loss -= std::log(p);
        }
    }
    res.loss /= static_cast<double>(batch.size());
    return res;
}

struct FitReport {
    std::vector<std::pair<std::int64_t, double>> loss_curve;  // (step, windowed mean loss)
    double final_loss = 0.0;
    double heldout_gap = 0.0;      // vs exact-posterior loss on a held-out batch
    double exact_max_abs = -1.0;   // vs exact oracle where enumerable; -1 if skipped
    std::int64_t clamped = 0;
    double grad_check_max_rel = -1.0;
};

struct PosteriorBackendConfig {
    std::string backend = "tabular";  // "tabular" | "mlp"
    int buckets = 32;
    std::vector<int> hidden = {64, 64};
    bool one_hot = true;
    std::uint64_t init_seed = 1;
};

// Minimizes the cross-entropy objective with mini-batch gradients.
// Training is single-writer and deterministic for a fixed seed.
inline std::pair<std::shared_ptr<NetPosterior>, FitReport> fit_posterior(
    const Pmf& p1, const ConditionalPath& path, const PosteriorBackendConfig& backend,
    nn::OptimizerConfig opt, const ExactPosterior* oracle = nullptr) {
    opt.validate();
    const StateSpace& sp = p1.space();
    const int D = sp.dims;
    const int A = sp.alphabet_size;
    std::shared_ptr<nn::Net> net;
    if (backend.backend == "tabular") {
        net = std::make_shared<nn::TabularNet>(sp, backend.buckets, D * A);
    } else if (backend.backend == "mlp") {
        nn::FeatureSpec fs{D, A, backend.one_hot, true, !backend.one_hot};
        net = std::make_shared<nn::MlpNet>(fs, backend.hidden, D * A, backend.init_seed);
    } else {
        throw config_error("fit_posterior: unknown backend '" + backend.backend + "'");
    }

    PmfSampler data(p1);
    nn::Optimizer optimizer(opt, net->params().size());
    nn::TailAverager averager(opt.steps, opt.tail_average_frac);
    FitReport report;
    std::vector<double> grad(net->params().size());
    std::vector<double> logits(static_cast<std::size_t>(D) * static_cast<std::size_t>(A));
    std::vector<double> dout(logits.size());
    double window = 0.0;
    std::int64_t window_n = 0;

    for (std::int64_t step = 0; step < opt.steps; ++step) {
        const auto batch = draw_path_batch(data, path, opt.batch_size, opt.seed, step);
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (const auto& s : batch) {
            net->eval(s.t, s.xt, logits);
            std::fill(dout.begin(), dout.end(), 0.0);
            for (int d = 0; d < D; ++d) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int a = 0; a < A; ++a) mx = std::max(mx, logits[static_cast<std::size_t>(d * A + a)]);
                double z = 0.0;
                for (int a = 0; a < A; ++a) z += std::exp(logits[static_cast<std::size_t>(d * A + a)] - mx);
                const int obs = s.x1[static_cast<std::size_t>(d)];
                loss += std::log(z) + mx - logits[static_cast<std::size_t>(d * A + obs)];
                const double invb = 1.0 / static_cast<double>(opt.batch_size);
                for (int a = 0; a < A; ++a) {
                    const double sm = std::exp(logits[static_cast<std::size_t>(d * A + a)] - mx) / z;
                    dout[static_cast<std::size_t>(d * A + a)] = sm * invb;
                }
                dout[static_cast<std::size_t>(d * A + obs)] -= invb;
            }
            net->backprop(s.t, s.xt, dout, grad);
        }
        loss /= static_cast<double>(opt.batch_size);
        if (!std::isfinite(loss)) throw numeric_error("fit_posterior: loss diverged");
        optimizer.step(net->params(), grad);
        averager.observe(step, net->params());
        window += loss;
        ++window_n;
        if ((step + 1) % std::max<std::int64_t>(1, opt.steps / 50) == 0) {
            report.loss_curve.emplace_back(step + 1, window / static_cast<double>(window_n));
            window = 0.0;
            window_n = 0;
        }
    }
    averager.finalize(net->params());

    auto model = std::make_shared<NetPosterior>(sp, net);
    const auto heldout = draw_path_batch(data, path, 512, opt.seed ^ 0xabcdef, opt.steps + 7);
    const auto fitted = cross_entropy_loss(*model, heldout);
    report.final_loss = fitted.loss;
    report.clamped = fitted.clamped;
    if (oracle) {
        report.heldout_gap = fitted.loss - cross_entropy_loss(*oracle, heldout).loss;
        double max_abs = 0.0;
        for (const auto& s : heldout) {
            const auto a = model->evaluate(s.t, s.xt);
            const auto b = oracle->evaluate(s.t, s.xt);
            for (int d = 0; d < D; ++d)
                for (int sym = 0; sym < A; ++sym)
                    max_abs = std::max(max_abs, std::abs(a(d, sym) - b(d, sym)));
        }
        report.exact_max_abs = max_abs;
    }
    return {model, report};
}

}  // namespace dfm
