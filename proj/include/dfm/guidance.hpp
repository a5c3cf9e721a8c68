#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/nn.hpp"
#include "dfm/posterior.hpp"

namespace dfm {

enum class GuidanceKind { posterior_based, rate_based };

enum class GuidanceSchemeKind { none, posterior_based, rate_based, predictor, first_order };

struct GuidanceScheme {
    GuidanceSchemeKind kind = GuidanceSchemeKind::none;
    double gamma = 1.0;  // strength; predictor variant only

    void validate() const {
        if (kind == GuidanceSchemeKind::predictor && gamma < 0.0)
            throw precondition_error("GuidanceScheme: gamma must be >= 0");
    }
};

inline GuidanceScheme scheme_by_name(const std::string& name) {
    if (name == "none") return {GuidanceSchemeKind::none, 1.0};
    if (name == "posterior") return {GuidanceSchemeKind::posterior_based, 1.0};
    if (name == "rate") return {GuidanceSchemeKind::rate_based, 1.0};
    if (name == "first-order") return {GuidanceSchemeKind::first_order, 1.0};
    if (name.rfind("predictor", 0) == 0) {
        GuidanceScheme s{GuidanceSchemeKind::predictor, 1.0};
        const auto colon = name.find(':');
        if (colon != std::string::npos) s.gamma = std::stod(name.substr(colon + 1));
        s.validate();
        return s;
    }
    throw config_error("unknown guidance scheme '" + name +
                       "' (expected none|posterior|rate|predictor[:gamma]|first-order)");
}

// Conditional-expectation-of-density-ratio models.
//
// posterior_based kind: the D x |S| matrix h_t^d(s, x) = E[r(x_1) | x_1^d = s, x_t = x]
// rate_based kind:      the scalar h_t(x) = E[r(x_1) | x_t = x]
class GuidanceModel {
  public:
    virtual ~GuidanceModel() = default;
    virtual GuidanceKind kind() const = 0;
    virtual const StateSpace& space() const = 0;

    // posterior_based: D x |S| strictly positive entries
    virtual std::vector<double> matrix(double /*t*/, std::span<const int> /*x*/) const {
        throw precondition_error("guidance model does not provide a matrix");
    }
    // rate_based: strictly positive scalar
    virtual double value(double /*t*/, std::span<const int> /*x*/) const {
        throw precondition_error("guidance model does not provide a scalar value");
    }

    // Gradient of log value over the integer symbol embedding, by central
    // differences with unit step (one-sided at the alphabet edges). The input
    // is genuinely discrete; this is the honest surrogate for the first-order
    // baseline.
    virtual std::vector<double> grad_log_value(double t, std::span<const int> x) const {
        const StateSpace& sp = space();
        std::vector<int> probe(x.begin(), x.end());
        std::vector<double> g(static_cast<std::size_t>(sp.dims), 0.0);
        const double base = std::log(value(t, x));
        for (int d = 0; d < sp.dims; ++d) {
            const int orig = probe[static_cast<std::size_t>(d)];
            const int up = std::min(orig + 1, sp.alphabet_size - 1);
            const int dn = std::max(orig - 1, 0);
            if (up == dn) continue;
            probe[static_cast<std::size_t>(d)] = up;
            const double lu = (up == orig) ? base : std::log(value(t, probe));
            probe[static_cast<std::size_t>(d)] = dn;
            const double ld = (dn == orig) ? base : std::log(value(t, probe));
            probe[static_cast<std::size_t>(d)] = orig;
            g[static_cast<std::size_t>(d)] = (lu - ld) / static_cast<double>(up - dn);
        }
        return g;
    }
};

namespace detail {

// h-matrix and scalar from one exact posterior evaluation.
// Rows with zero posterior mass get h = 1: the value multiplies a zero and
// must not poison the row.
inline std::vector<double> h_matrix_from_eval(const ExactPosterior& post,
                                              const ExactPosteriorEval& ev, const DensityRatio& r) {
    const StateSpace& sp = post.space();
    const int D = sp.dims;
    const int A = sp.alphabet_size;
    std::vector<double> num(static_cast<std::size_t>(D) * static_cast<std::size_t>(A), 0.0);
    if (!ev.backoff_used) {
        for (std::size_t k = 0; k < post.support_size(); ++k) {
            const double w = ev.joint[k];
            if (w <= 0.0) continue;
            const auto x1 = post.support_state(k);
            const double rv = r(x1) * w;
            for (int d = 0; d < D; ++d)
                num[static_cast<std::size_t>(d * A + x1[static_cast<std::size_t>(d)])] += rv;
        }
    } else {
        // per-coordinate conditioning: h^d(s) = E_{p1}[r | x_1^d = s]
        std::vector<double> cond_num(static_cast<std::size_t>(D) * static_cast<std::size_t>(A), 0.0);
        std::vector<double> cond_den(cond_num.size(), 0.0);
        for (std::size_t k = 0; k < post.support_size(); ++k) {
            const auto x1 = post.support_state(k);
            const double w = post.p1()[post.support_indices()[k]];
            const double rv = r(x1);
            for (int d = 0; d < D; ++d) {
                const std::size_t cell = static_cast<std::size_t>(d * A + x1[static_cast<std::size_t>(d)]);
                cond_num[cell] += w * rv;
                cond_den[cell] += w;
            }
        }
        std::vector<double> h(cond_num.size(), 1.0);
        for (std::size_t i = 0; i < h.size(); ++i)
            if (cond_den[i] > 0.0) h[i] = cond_num[i] / cond_den[i];
        return h;
    }
    std::vector<double> h(num.size(), 1.0);
    for (int d = 0; d < D; ++d)
        for (int s = 0; s < A; ++s) {
            const std::size_t cell = static_cast<std::size_t>(d * A + s);
            const double den = ev.rows[cell];
            if (den > 0.0) h[cell] = num[cell] / den;
        }
    return h;
}

inline double h_scalar_from_eval(const ExactPosterior& post, const ExactPosteriorEval& ev,
                                 const DensityRatio& r) {
    const StateSpace& sp = post.space();
    if (!ev.backoff_used) {
        double s = 0.0;
        for (std::size_t k = 0; k < post.support_size(); ++k)
            if (ev.joint[k] > 0.0) s += ev.joint[k] * r(post.support_state(k));
        return s;
    }
    // Backoff states carry O(h) mass; average the per-coordinate identities
    // h = sum_s h^d(s, x) row_d(s) over d.
    const auto h = h_matrix_from_eval(post, ev, r);
    const int D = sp.dims;
    const int A = sp.alphabet_size;
    double acc = 0.0;
    for (int d = 0; d < D; ++d) {
        double s = 0.0;
        for (int a = 0; a < A; ++a)
            s += h[static_cast<std::size_t>(d * A + a)] * ev.rows[static_cast<std::size_t>(d * A + a)];
        acc += s;
    }
    return acc / static_cast<double>(D);
}

}  // namespace detail

// Enumeration-backed guidance over (p1, r, path).
class ExactGuidance : public GuidanceModel {
  public:
    ExactGuidance(std::shared_ptr<const ExactPosterior> posterior, DensityRatio ratio,
                  GuidanceKind kind, bool allow_backoff = true)
        : posterior_(std::move(posterior)), ratio_(std::move(ratio)), kind_(kind),
          allow_backoff_(allow_backoff) {}

    GuidanceKind kind() const override { return kind_; }
    const StateSpace& space() const override { return posterior_->space(); }
    const ExactPosterior& posterior() const { return *posterior_; }
    const DensityRatio& ratio() const { return ratio_; }

    std::vector<double> matrix(double t, std::span<const int> x) const override {
        const auto ev = posterior_->evaluate_full(t, x, allow_backoff_);
        return detail::h_matrix_from_eval(*posterior_, ev, ratio_);
    }

    double value(double t, std::span<const int> x) const override {
        const auto ev = posterior_->evaluate_full(t, x, allow_backoff_);
        const double v = detail::h_scalar_from_eval(*posterior_, ev, ratio_);
        if (!(v > 0.0)) throw numeric_error("exact guidance: zero expectation");
        return v;
    }

  private:
    std::shared_ptr<const ExactPosterior> posterior_;
    DensityRatio ratio_;
    GuidanceKind kind_;
    bool allow_backoff_;
};

// Net-backed guidance; positivity through the log parameterization.
class NetGuidance : public GuidanceModel {
  public:
    NetGuidance(StateSpace space, std::shared_ptr<nn::Net> net, GuidanceKind kind)
        : space_(space), net_(std::move(net)), kind_(kind) {
        const int want = kind_ == GuidanceKind::posterior_based ? space_.dims * space_.alphabet_size : 1;
        if (net_->output_dim() != want)
            throw config_error("NetGuidance: net output dim does not match the guidance kind");
    }

    GuidanceKind kind() const override { return kind_; }
    const StateSpace& space() const override { return space_; }
    const nn::Net& net() const { return *net_; }
    nn::Net& net() { return *net_; }

    std::vector<double> matrix(double t, std::span<const int> x) const override {
        if (kind_ != GuidanceKind::posterior_based)
            throw precondition_error("NetGuidance: matrix requested from a scalar model");
        std::vector<double> out(static_cast<std::size_t>(net_->output_dim()));
        net_->eval(t, x, out);
        for (double& v : out) v = std::exp(std::min(v, 60.0));
        return out;
    }

    double value(double t, std::span<const int> x) const override {
        if (kind_ != GuidanceKind::rate_based)
            throw precondition_error("NetGuidance: value requested from a matrix model");
        double out = 0.0;
        net_->eval(t, x, {&out, 1});
        return std::exp(std::min(out, 60.0));
    }

  private:
    StateSpace space_;
    std::shared_ptr<nn::Net> net_;
    GuidanceKind kind_;
};

// ---------------------------------------------------------------------------
// Guidance algebra
// ---------------------------------------------------------------------------

// Row-wise reweighting of the source posterior: row d ∝ h[d, .] * p[d, .].
// Normalization replaces the shared denominator, which cancels exactly.
inline FactorizedPosterior guided_posterior(const FactorizedPosterior& p_post,
                                            std::span<const double> h_matrix) {
    const int D = p_post.dims();
    const int A = p_post.alphabet();
    if (h_matrix.size() != static_cast<std::size_t>(D) * static_cast<std::size_t>(A))
        throw precondition_error("guided_posterior: h matrix has wrong shape");
    std::vector<double> rows(static_cast<std::size_t>(D) * static_cast<std::size_t>(A));
    for (int d = 0; d < D; ++d) {
        double z = 0.0;
        for (int a = 0; a < A; ++a) {
            const std::size_t cell = static_cast<std::size_t>(d * A + a);
            const double v = h_matrix[cell] * p_post(d, a);
            if (v < 0.0) throw precondition_error("guided_posterior: negative product entry");
            rows[cell] = v;
            z += v;
        }
        if (!(z > 0.0)) throw numeric_error("guided_posterior: all-zero row after reweighting");
        for (int a = 0; a < A; ++a) rows[static_cast<std::size_t>(d * A + a)] /= z;
    }
    return FactorizedPosterior(D, A, std::move(rows));
}

// Spec-level op: exact h matrix by enumeration (strict; no backoff).
inline std::vector<double> exact_guidance_h(const Pmf& p1, const DensityRatio& r,
                                            const ConditionalPath& path, double t,
                                            std::span<const int> x,
                                            std::uint64_t cap = kDefaultEnumerationCap) {
    auto post = std::make_shared<ExactPosterior>(p1, path, cap);
    ExactGuidance g(post, r, GuidanceKind::posterior_based, false);
    return g.matrix(t, x);
}

// h_t(z)/h_t(x): multiplies the source marginal rate into the guided rate.
// z must equal x except in at most one coordinate.
inline double rate_based_factor(const GuidanceModel& h, double t, std::span<const int> x,
                                std::span<const int> z) {
    int diff = 0;
    for (std::size_t d = 0; d < x.size(); ++d)
        if (x[d] != z[d]) ++diff;
    if (diff > 1)
        throw precondition_error("rate_based_factor: z must differ from x in exactly one coordinate");
    if (diff == 0) return 1.0;
    const double den = h.value(t, x);
    if (!(den > 0.0)) throw numeric_error("rate_based_factor: zero denominator");
    return h.value(t, z) / den;
}

// [ E_{p(.|z)} c(x1) / E_{p(.|x)} c(x1) ]^gamma  with a classifier c = p(y=1|x1).
inline double predictor_strength_factor(const std::function<double(std::span<const int>)>& classifier,
                                        double gamma, const ExactPosterior& posterior, double t,
                                        std::span<const int> x, std::span<const int> z) {
    if (gamma < 0.0) throw precondition_error("predictor_strength_factor: gamma must be >= 0");
    DensityRatio c{classifier, nullptr};
    ExactGuidance g(std::make_shared<ExactPosterior>(posterior.p1(), posterior.path()), c,
                    GuidanceKind::rate_based);
    const double den = g.value(t, x);
    if (!(den > 0.0)) throw numeric_error("predictor_strength_factor: zero denominator");
    if (gamma == 0.0) return 1.0;
    return std::pow(g.value(t, z) / den, gamma);
}

// exp(<z - x, grad log E[r]>), the first-order Taylor baseline of Eq-style
// guidance over an integer embedding.
inline double first_order_factor(std::span<const double> grad_log_h, std::span<const int> z,
                                 std::span<const int> x) {
    double dot = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d)
        dot += static_cast<double>(z[d] - x[d]) * grad_log_h[d];
    return std::exp(dot);
}

// Guidance-model invocations per sampling step (the published accounting):
//   posterior_based                 1
//   rate_based, masked init         D + 1
//   rate_based, uniform init        D*(|S|-1) + 1
//   predictor                       same as rate_based
//   first_order                     2   (one value + one gradient pass)
inline std::int64_t call_count(const GuidanceScheme& scheme, const StateSpace& space, InitKind init) {
    const std::int64_t D = space.dims;
    const std::int64_t A = space.alphabet_size;
    switch (scheme.kind) {
        case GuidanceSchemeKind::none:
            return 0;
        case GuidanceSchemeKind::posterior_based:
            return 1;
        case GuidanceSchemeKind::rate_based:
        case GuidanceSchemeKind::predictor:
            return init == InitKind::masked ? D + 1 : D * (A - 1) + 1;
        case GuidanceSchemeKind::first_order:
            return 2;
    }
    return 0;
}

}  // namespace dfm
