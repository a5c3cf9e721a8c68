#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/guidance.hpp"
#include "dfm/nn.hpp"
#include "dfm/posterior.hpp"

namespace dfm {

// ---------------------------------------------------------------------------
// Losses.
//
// Guidance nets are log-parameterized: the net output o is log h, so h > 0 by
// construction and the Bregman log term needs no clamping. The theta-free
// constant of the divergence is dropped throughout.
// ---------------------------------------------------------------------------

namespace detail {
inline double safe_exp(double o) { return std::exp(std::min(o, 30.0)); }
}

// F(x) = <x, log x> Bregman matching of the D x |S| guidance head:
// mean over the batch of sum_d [ h^d(x1^d, x_t) - r(x1) log h^d(x1^d, x_t) ].
inline double bregman_loss_posterior(const nn::Net& net, std::span<const PathSample> batch,
                                     std::span<const double> r_values,
                                     std::vector<double>* grad = nullptr) {
    if (batch.empty()) throw precondition_error("bregman_loss_posterior: empty batch");
    if (r_values.size() != batch.size())
        throw precondition_error("bregman_loss_posterior: one ratio value per sample required");
    const int out = net.output_dim();
    std::vector<double> o(static_cast<std::size_t>(out));
    std::vector<double> dout(static_cast<std::size_t>(out));
    const double invb = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        const double r = r_values[i];
        const int D = static_cast<int>(s.x1.size());
        const int A = out / D;
        net.eval(s.t, s.xt, o);
        std::fill(dout.begin(), dout.end(), 0.0);
        for (int d = 0; d < D; ++d) {
            const std::size_t cell =
                static_cast<std::size_t>(d * A + s.x1[static_cast<std::size_t>(d)]);
            const double h = detail::safe_exp(o[cell]);
            loss += h - r * o[cell];
            dout[cell] = (h - r) * invb;
        }
        if (grad) net.backprop(s.t, s.xt, dout, *grad);
    }
    loss *= invb;
    if (!std::isfinite(loss)) throw numeric_error("bregman_loss_posterior: non-finite loss");
    return loss;
}

// Scalar variant: mean of h(x_t) - r(x1) log h(x_t).
inline double bregman_loss_rate(const nn::Net& net, std::span<const PathSample> batch,
                                std::span<const double> r_values,
                                std::vector<double>* grad = nullptr) {
    if (batch.empty()) throw precondition_error("bregman_loss_rate: empty batch");
    if (r_values.size() != batch.size())
        throw precondition_error("bregman_loss_rate: one ratio value per sample required");
    if (net.output_dim() != 1) throw precondition_error("bregman_loss_rate: scalar net required");
    const double invb = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        double o = 0.0;
        net.eval(s.t, s.xt, {&o, 1});
        const double h = detail::safe_exp(o);
        const double r = r_values[i];
        loss += h - r * o;
        if (grad) {
            const double d = (h - r) * invb;
            net.backprop(s.t, s.xt, {&d, 1}, *grad);
        }
    }
    loss *= invb;
    if (!std::isfinite(loss)) throw numeric_error("bregman_loss_rate: non-finite loss");
    return loss;
}

// Cross-entropy of the reweighted posterior (h.p, row-normalized) against
// clean draws from the target: the regularizer that lets target samples shape
// the guidance. The frozen posterior contributes no gradient.
inline double regularization_loss(const nn::Net& net, const PosteriorModel& frozen_posterior,
                                  std::span<const PathSample> batch,
                                  std::vector<double>* grad = nullptr) {
    if (batch.empty()) throw precondition_error("regularization_loss: empty batch");
    const int out = net.output_dim();
    std::vector<double> o(static_cast<std::size_t>(out));
    std::vector<double> dout(static_cast<std::size_t>(out));
    const double invb = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        const int D = static_cast<int>(s.x1.size());
        const int A = out / D;
        net.eval(s.t, s.xt, o);
        std::fill(dout.begin(), dout.end(), 0.0);
        const auto post = frozen_posterior.evaluate(s.t, s.xt);
        for (int d = 0; d < D; ++d) {
            const int obs = s.x1[static_cast<std::size_t>(d)];
            if (post(d, obs) <= 0.0)
                throw numeric_error("regularization_loss: observed symbol outside the posterior support");
            // logits of the reweighted row: o + log p on the support
            double mx = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < A; ++a) {
                if (post(d, a) <= 0.0) continue;
                mx = std::max(mx, o[static_cast<std::size_t>(d * A + a)] + std::log(post(d, a)));
            }
            double z = 0.0;
            for (int a = 0; a < A; ++a) {
                if (post(d, a) <= 0.0) continue;
                z += std::exp(o[static_cast<std::size_t>(d * A + a)] + std::log(post(d, a)) - mx);
            }
            if (!(z > 0.0)) throw numeric_error("regularization_loss: zero normalizer");
            const std::size_t obs_cell = static_cast<std::size_t>(d * A + obs);
            loss += std::log(z) + mx - (o[obs_cell] + std::log(post(d, obs)));
            for (int a = 0; a < A; ++a) {
                if (post(d, a) <= 0.0) continue;
                const double sm =
                    std::exp(o[static_cast<std::size_t>(d * A + a)] + std::log(post(d, a)) - mx) / z;
                dout[static_cast<std::size_t>(d * A + a)] += sm * invb;
            }
            dout[obs_cell] -= invb;
        }
        if (grad) net.backprop(s.t, s.xt, dout, *grad);
    }
    loss *= invb;
    if (!std::isfinite(loss)) throw numeric_error("regularization_loss: non-finite loss");
    return loss;
}

// Density-ratio model with a smoothly bounded log ratio, trained by logistic
// discrimination of source against target samples.
struct RatioModel {
    std::shared_ptr<nn::Net> net;
    double cap = 8.0;
    StateSpace space;

    double log_ratio(std::span<const int> x) const {
        double o = 0.0;
        net->eval(0.0, x, {&o, 1});
        return cap * std::tanh(o / cap);
    }
    double ratio(std::span<const int> x) const { return std::exp(log_ratio(x)); }

    DensityRatio as_density_ratio() const {
        auto self = *this;
        return {[self](std::span<const int> x) { return self.ratio(x); }, nullptr};
    }
};

// L_r = mean_p log(1 + r) + mean_q log((1 + r)/r); population minimizer q/p.
inline double density_ratio_loss(const RatioModel& model, std::span<const std::vector<int>> batch_p,
                                 std::span<const std::vector<int>> batch_q,
                                 std::vector<double>* grad = nullptr) {
    if (batch_p.empty() || batch_q.empty())
        throw precondition_error("density_ratio_loss: both batches must be non-empty");
    double loss = 0.0;
    const double cap = model.cap;
    auto softplus = [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); };
    const double inv_p = 1.0 / static_cast<double>(batch_p.size());
    for (const auto& x : batch_p) {
        double o = 0.0;
        model.net->eval(0.0, x, {&o, 1});
        const double th = std::tanh(o / cap);
        const double l = cap * th;
        loss += softplus(l) * inv_p;
        if (grad) {
            const double d = (1.0 / (1.0 + std::exp(-l))) * (1.0 - th * th) * inv_p;
            model.net->backprop(0.0, x, {&d, 1}, *grad);
        }
    }
    const double inv_q = 1.0 / static_cast<double>(batch_q.size());
    for (const auto& x : batch_q) {
        double o = 0.0;
        model.net->eval(0.0, x, {&o, 1});
        const double th = std::tanh(o / cap);
        const double l = cap * th;
        loss += softplus(-l) * inv_q;
        if (grad) {
            const double d = -(1.0 / (1.0 + std::exp(l))) * (1.0 - th * th) * inv_q;
            model.net->backprop(0.0, x, {&d, 1}, *grad);
        }
    }
    if (!std::isfinite(loss)) throw numeric_error("density_ratio_loss: non-finite loss");
    return loss;
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct RatioFitConfig {
    int n_samples = 20000;
    std::vector<int> hidden = {16, 16};
    double cap = 8.0;
    std::uint64_t init_seed = 5;
};

inline std::vector<std::vector<int>> draw_states(const Pmf& pmf, int n, std::uint64_t seed,
                                                 std::uint64_t tag) {
    PmfSampler sampler(pmf);
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        out.push_back(sampler.draw_state(rng::uniform(seed, tag, static_cast<std::uint64_t>(i))));
    return out;
}

inline RatioModel fit_ratio(const Pmf& source, const Pmf& target, const RatioFitConfig& cfg,
                            nn::OptimizerConfig opt) {
    opt.validate();
    if (!(source.space() == target.space()))
        throw precondition_error("fit_ratio: source and target must share a state space");
    const StateSpace& sp = source.space();
    nn::FeatureSpec fs{sp.dims, sp.alphabet_size, false, false, true};
    auto net = std::make_shared<nn::MlpNet>(fs, cfg.hidden, 1, cfg.init_seed);
    RatioModel model{net, cfg.cap, sp};

    const auto xs_p = draw_states(source, cfg.n_samples, opt.seed, 0x5051);
    const auto xs_q = draw_states(target, cfg.n_samples, opt.seed, 0x5052);
    nn::Optimizer optimizer(opt, net->params().size());
    nn::TailAverager averager(opt.steps, opt.tail_average_frac);
    std::vector<double> grad(net->params().size());
    std::vector<std::vector<int>> bp(static_cast<std::size_t>(opt.batch_size)),
        bq(static_cast<std::size_t>(opt.batch_size));
    for (std::int64_t step = 0; step < opt.steps; ++step) {
        for (int i = 0; i < opt.batch_size; ++i) {
            const auto ip = rng::mix(opt.seed, 0x60, static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(i)) % xs_p.size();
            const auto iq = rng::mix(opt.seed, 0x61, static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(i)) % xs_q.size();
            bp[static_cast<std::size_t>(i)] = xs_p[ip];
            bq[static_cast<std::size_t>(i)] = xs_q[iq];
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        density_ratio_loss(model, bp, bq, &grad);
        optimizer.step(net->params(), grad);
        averager.observe(step, net->params());
    }
    averager.finalize(net->params());
    return model;
}

struct GuidanceBackendConfig {
    GuidanceKind kind = GuidanceKind::posterior_based;
    std::string backend = "mlp";  // "tabular" | "mlp"
    int buckets = 32;
    std::vector<int> hidden = {64, 64};
    bool one_hot = true;
    std::uint64_t init_seed = 3;
};

struct GuidanceFitReport {
    std::vector<std::pair<std::int64_t, double>> bregman_curve;
    std::vector<std::pair<std::int64_t, double>> regularization_curve;
    double final_bregman = 0.0;
    double final_regularization = 0.0;
    double exact_max_abs = -1.0;  // vs exact guidance on heldout states; -1 if skipped
};

// L_h = L_{h,p} + lambda * L_{h,q}. The source term always runs; the target
// term requires target data and a frozen source posterior.
inline std::pair<std::shared_ptr<NetGuidance>, GuidanceFitReport> fit_guidance(
    const GuidanceBackendConfig& backend, const Pmf& source_p1, const ConditionalPath& path,
    const std::function<double(std::span<const int>)>& ratio, nn::OptimizerConfig opt,
    const Pmf* target_q1 = nullptr, const PosteriorModel* frozen_posterior = nullptr,
    const ExactGuidance* oracle = nullptr) {
    opt.validate();
    const StateSpace& sp = source_p1.space();
    const int D = sp.dims;
    const int A = sp.alphabet_size;
    if (opt.lambda > 0.0 && (target_q1 == nullptr || frozen_posterior == nullptr))
        throw config_error("fit_guidance: lambda > 0 requires target samples and a frozen posterior");

    const int out_dim = backend.kind == GuidanceKind::posterior_based ? D * A : 1;
    std::shared_ptr<nn::Net> net;
    if (backend.backend == "tabular") {
        net = std::make_shared<nn::TabularNet>(sp, backend.buckets, out_dim);
    } else if (backend.backend == "mlp") {
        nn::FeatureSpec fs{D, A, backend.one_hot, true, !backend.one_hot};
        net = std::make_shared<nn::MlpNet>(fs, backend.hidden, out_dim, backend.init_seed);
    } else {
        throw config_error("fit_guidance: unknown backend '" + backend.backend + "'");
    }

    PmfSampler source(source_p1);
    std::unique_ptr<PmfSampler> target;
    if (opt.lambda > 0.0) target = std::make_unique<PmfSampler>(*target_q1);

    nn::Optimizer optimizer(opt, net->params().size());
    nn::TailAverager averager(opt.steps, opt.tail_average_frac);
    GuidanceFitReport report;
    std::vector<double> grad(net->params().size());
    std::vector<double> r_values(static_cast<std::size_t>(opt.batch_size));
    double wb = 0.0, wr = 0.0;
    std::int64_t wn = 0;

    for (std::int64_t step = 0; step < opt.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        const auto batch_p = draw_path_batch(source, path, opt.batch_size, opt.seed ^ 0xb1, step);
        for (std::size_t i = 0; i < batch_p.size(); ++i) r_values[i] = ratio(batch_p[i].x1);
        const double lb =
            backend.kind == GuidanceKind::posterior_based
                ? bregman_loss_posterior(*net, batch_p, r_values, &grad)
                : bregman_loss_rate(*net, batch_p, r_values, &grad);
        double lr = 0.0;
        if (opt.lambda > 0.0) {
            const auto batch_q = draw_path_batch(*target, path, opt.batch_size, opt.seed ^ 0xb2, step);
            std::vector<double> reg_grad(grad.size(), 0.0);
            lr = regularization_loss(*net, *frozen_posterior, batch_q, &reg_grad);
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += opt.lambda * reg_grad[i];
        }
        if (!std::isfinite(lb) || !std::isfinite(lr))
            throw numeric_error("fit_guidance: loss diverged");
        optimizer.step(net->params(), grad);
        averager.observe(step, net->params());
        wb += lb;
        wr += lr;
        ++wn;
        if ((step + 1) % std::max<std::int64_t>(1, opt.steps / 50) == 0) {
            report.bregman_curve.emplace_back(step + 1, wb / static_cast<double>(wn));
            report.regularization_curve.emplace_back(step + 1, wr / static_cast<double>(wn));
            wb = wr = 0.0;
            wn = 0;
        }
    }
    averager.finalize(net->params());

    auto model = std::make_shared<NetGuidance>(sp, net, backend.kind);
    const auto heldout = draw_path_batch(source, path, 256, opt.seed ^ 0xd11ULL, opt.steps + 11);
    if (oracle) {
        double max_abs = 0.0;
        for (const auto& s : heldout) {
            if (backend.kind == GuidanceKind::posterior_based) {
                const auto got = model->matrix(s.t, s.xt);
                const auto want = oracle->matrix(s.t, s.xt);
                const auto post = oracle->posterior().evaluate_full(s.t, s.xt, true);
                for (int d = 0; d < D; ++d)
                    for (int a = 0; a < A; ++a) {
                        const std::size_t cell = static_cast<std::size_t>(d * A + a);
                        if (post.rows[cell] > 1e-9)
                            max_abs = std::max(max_abs, std::abs(got[cell] - want[cell]));
                    }
            } else {
                max_abs = std::max(max_abs, std::abs(model->value(s.t, s.xt) - oracle->value(s.t, s.xt)));
            }
        }
        report.exact_max_abs = max_abs;
    }
    const auto final_probe = draw_path_batch(source, path, 256, opt.seed ^ 0xfe, opt.steps + 13);
    std::vector<double> rv(final_probe.size());
    for (std::size_t i = 0; i < final_probe.size(); ++i) rv[i] = ratio(final_probe[i].x1);
    report.final_bregman = backend.kind == GuidanceKind::posterior_based
                               ? bregman_loss_posterior(*net, final_probe, rv)
                               : bregman_loss_rate(*net, final_probe, rv);
    return {model, report};
}

}  // namespace dfm
