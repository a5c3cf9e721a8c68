#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/statespace.hpp"

namespace dfm::nn {

// Feature encoding for networks over (t, x). Either per-coordinate one-hots or
// normalized coordinates with a few trigonometric features, plus [t, 1-t].
struct FeatureSpec {
    int dims = 1;
    int alphabet = 2;
    bool one_hot = true;
    bool time_features = true;
    bool trig_features = false;  // only meaningful with one_hot = false

    int feature_dim() const {
        int n = one_hot ? dims * alphabet : dims * (trig_features ? 4 : 1);
        if (time_features) n += 2;
        return n;
    }

    void build(double t, std::span<const int> x, std::span<double> out) const {
        std::size_t k = 0;
        if (one_hot) {
            std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(dims * alphabet), 0.0);
            for (int d = 0; d < dims; ++d)
                out[static_cast<std::size_t>(d * alphabet + x[static_cast<std::size_t>(d)])] = 1.0;
            k = static_cast<std::size_t>(dims * alphabet);
        } else {
            for (int d = 0; d < dims; ++d) {
                const double z = static_cast<double>(x[static_cast<std::size_t>(d)]) /
                                 static_cast<double>(alphabet - 1);
                out[k++] = z;
                if (trig_features) {
                    out[k++] = std::sin(M_PI * z);
                    out[k++] = std::cos(M_PI * z);
                    out[k++] = std::sin(2.0 * M_PI * z);
                }
            }
        }
        if (time_features) {
            out[k++] = t;
            out[k++] = 1.0 - t;
        }
    }
};

// A parametric map (t, x) -> R^out with hand-written reverse-mode gradients.
class Net {
  public:
    virtual ~Net() = default;
    virtual int output_dim() const = 0;
    virtual std::vector<double>& params() = 0;
    virtual const std::vector<double>& params() const = 0;
    virtual void eval(double t, std::span<const int> x, std::span<double> out) const = 0;
    // Accumulates d(loss)/d(params) into grad, given d(loss)/d(out) at (t, x).
    virtual void backprop(double t, std::span<const int> x, std::span<const double> dout,
                          std::span<double> grad) const = 0;
    virtual std::unique_ptr<Net> clone() const = 0;
};

// Lookup table over (time bucket, state index) cells, out_dim values per cell.
// States are indexed lexicographically, so the space must be enumerable.
class TabularNet : public Net {
  public:
    TabularNet(const StateSpace& space, int buckets, int out_dim)
        : space_(space),
          buckets_(buckets),
          out_dim_(out_dim),
          n_states_(space.checked_state_count()) {
        if (buckets_ < 1) throw config_error("TabularNet: buckets must be >= 1");
        params_.assign(static_cast<std::size_t>(buckets_) * n_states_ * static_cast<std::size_t>(out_dim_), 0.0);
    }

    int buckets() const { return buckets_; }
    const StateSpace& space() const { return space_; }
    int output_dim() const override { return out_dim_; }
    std::vector<double>& params() override { return params_; }
    const std::vector<double>& params() const override { return params_; }

    int bucket_of(double t) const {
        int b = static_cast<int>(t * buckets_);
        return std::min(std::max(b, 0), buckets_ - 1);
    }

    void eval(double t, std::span<const int> x, std::span<double> out) const override {
        const std::size_t base = cell_base(t, x);
        for (int i = 0; i < out_dim_; ++i)
            out[static_cast<std::size_t>(i)] = params_[base + static_cast<std::size_t>(i)];
    }

    void backprop(double t, std::span<const int> x, std::span<const double> dout,
                  std::span<double> grad) const override {
        const std::size_t base = cell_base(t, x);
        for (int i = 0; i < out_dim_; ++i)
            grad[base + static_cast<std::size_t>(i)] += dout[static_cast<std::size_t>(i)];
    }

    std::unique_ptr<Net> clone() const override { return std::make_unique<TabularNet>(*this); }

  private:
    std::size_t cell_base(double t, std::span<const int> x) const {
        const std::uint64_t si = space_.index_of(x);
        return (static_cast<std::size_t>(bucket_of(t)) * n_states_ + si) * static_cast<std::size_t>(out_dim_);
    }

    StateSpace space_;
    int buckets_;
    int out_dim_;
    std::uint64_t n_states_;
    std::vector<double> params_;
};

// Fully connected tanh network over the feature encoding.
class MlpNet : public Net {
  public:
    MlpNet(FeatureSpec features, std::vector<int> hidden, int out_dim, std::uint64_t init_seed,
           double out_scale = 1e-2)
        : features_(features), out_dim_(out_dim) {
        sizes_.push_back(features_.feature_dim());
        for (const int h : hidden) sizes_.push_back(h);
        sizes_.push_back(out_dim);
        std::size_t total = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
            total += static_cast<std::size_t>(sizes_[l]) * static_cast<std::size_t>(sizes_[l + 1]) +
                     static_cast<std::size_t>(sizes_[l + 1]);
        params_.resize(total);
        std::size_t k = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
            const bool last = (l + 2 == sizes_.size());
            for (int i = 0; i < sizes_[l] * sizes_[l + 1]; ++i)
                params_[k++] = rng::normal(init_seed, 0x11, l, static_cast<std::uint64_t>(i)) * scale *
                               (last ? out_scale : 1.0);
            for (int i = 0; i < sizes_[l + 1]; ++i) params_[k++] = 0.0;
        }
    }

    const FeatureSpec& features() const { return features_; }
    const std::vector<int>& layer_sizes() const { return sizes_; }
    int output_dim() const override { return out_dim_; }
    std::vector<double>& params() override { return params_; }
    const std::vector<double>& params() const override { return params_; }

    void eval(double t, std::span<const int> x, std::span<double> out) const override {
        std::vector<double> act(static_cast<std::size_t>(features_.feature_dim()));
        features_.build(t, x, act);
        forward_from(act, nullptr, out);
    }

    void backprop(double t, std::span<const int> x, std::span<const double> dout,
                  std::span<double> grad) const override {
        std::vector<std::vector<double>> acts(sizes_.size());
        acts[0].resize(static_cast<std::size_t>(features_.feature_dim()));
        features_.build(t, x, acts[0]);
        std::vector<double> out(static_cast<std::size_t>(out_dim_));
        forward_from(acts[0], &acts, out);

        std::vector<double> delta(dout.begin(), dout.end());
        for (int l = static_cast<int>(sizes_.size()) - 2; l >= 0; --l) {
            const int in_n = sizes_[static_cast<std::size_t>(l)];
            const int out_n = sizes_[static_cast<std::size_t>(l) + 1];
            const std::size_t wofs = weight_offset(static_cast<std::size_t>(l));
            const std::size_t bofs = wofs + static_cast<std::size_t>(in_n) * static_cast<std::size_t>(out_n);
            const auto& a = acts[static_cast<std::size_t>(l)];
            for (int j = 0; j < out_n; ++j) grad[bofs + static_cast<std::size_t>(j)] += delta[static_cast<std::size_t>(j)];
            for (int i = 0; i < in_n; ++i) {
                const double ai = a[static_cast<std::size_t>(i)];
                const std::size_t row = wofs + static_cast<std::size_t>(i) * static_cast<std::size_t>(out_n);
                for (int j = 0; j < out_n; ++j)
                    grad[row + static_cast<std::size_t>(j)] += ai * delta[static_cast<std::size_t>(j)];
            }
            if (l == 0) break;
            std::vector<double> prev(static_cast<std::size_t>(in_n), 0.0);
            for (int i = 0; i < in_n; ++i) {
                const std::size_t row = wofs + static_cast<std::size_t>(i) * static_cast<std::size_t>(out_n);
                double s = 0.0;
                for (int j = 0; j < out_n; ++j) s += params_[row + static_cast<std::size_t>(j)] * delta[static_cast<std::size_t>(j)];
                const double ai = a[static_cast<std::size_t>(i)];
                prev[static_cast<std::size_t>(i)] = s * (1.0 - ai * ai);  // tanh'
            }
            delta = std::move(prev);
        }
    }

    std::unique_ptr<Net> clone() const override { return std::make_unique<MlpNet>(*this); }

  private:
    std::size_t weight_offset(std::size_t layer) const {
        std::size_t ofs = 0;
        for (std::size_t l = 0; l < layer; ++l)
            ofs += static_cast<std::size_t>(sizes_[l]) * static_cast<std::size_t>(sizes_[l + 1]) +
                   static_cast<std::size_t>(sizes_[l + 1]);
        return ofs;
    }

    // acts, when non-null, receives post-activation values per layer
    void forward_from(const std::vector<double>& input, std::vector<std::vector<double>>* acts,
                      std::span<double> out) const {
        std::vector<double> cur = input;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            const int in_n = sizes_[l];
            const int out_n = sizes_[l + 1];
            const std::size_t wofs = weight_offset(l);
            const std::size_t bofs = wofs + static_cast<std::size_t>(in_n) * static_cast<std::size_t>(out_n);
            std::vector<double> nxt(static_cast<std::size_t>(out_n));
            for (int j = 0; j < out_n; ++j) nxt[static_cast<std::size_t>(j)] = params_[bofs + static_cast<std::size_t>(j)];
            for (int i = 0; i < in_n; ++i) {
                const double v = cur[static_cast<std::size_t>(i)];
                if (v == 0.0) continue;
                const std::size_t row = wofs + static_cast<std::size_t>(i) * static_cast<std::size_t>(out_n);
                for (int j = 0; j < out_n; ++j) nxt[static_cast<std::size_t>(j)] += v * params_[row + static_cast<std::size_t>(j)];
            }
            const bool last = (l + 2 == sizes_.size());
            if (!last)
                for (double& v : nxt) v = std::tanh(v);
            if (acts) (*acts)[l + 1] = nxt;
            cur = std::move(nxt);
        }
        std::copy(cur.begin(), cur.end(), out.begin());
    }

    FeatureSpec features_;
    int out_dim_;
    std::vector<int> sizes_;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerAlgorithm { sgd, adam };

struct OptimizerConfig {
    OptimizerAlgorithm algorithm = OptimizerAlgorithm::adam;
    double learning_rate = 1e-3;
    double lr_decay_steps = 0.0;  // lr / (1 + step/decay); 0 disables decay
    int batch_size = 64;
    std::int64_t steps = 10000;
    std::uint64_t seed = 0;
    double lambda = 0.0;            // regularization weight, >= 0
    double tail_average_frac = 0.3; // parameters averaged over the trailing fraction of steps

    void validate() const {
        if (lambda < 0.0) throw config_error("OptimizerConfig: lambda must be >= 0");
        if (batch_size < 1 || steps < 1) throw config_error("OptimizerConfig: batch/steps must be >= 1");
        if (!(learning_rate > 0.0)) throw config_error("OptimizerConfig: learning rate must be > 0");
        if (tail_average_frac < 0.0 || tail_average_frac > 1.0)
            throw config_error("OptimizerConfig: tail_average_frac must lie in [0, 1]");
    }
};

inline OptimizerAlgorithm optimizer_by_name(const std::string& name) {
    if (name == "sgd") return OptimizerAlgorithm::sgd;
    if (name == "adam") return OptimizerAlgorithm::adam;
    throw config_error("unknown optimizer '" + name + "'");
}

class Optimizer {
  public:
    Optimizer(const OptimizerConfig& cfg, std::size_t n_params) : cfg_(cfg) {
        if (cfg_.algorithm == OptimizerAlgorithm::adam) {
            m_.assign(n_params, 0.0);
            v_.assign(n_params, 0.0);
        }
    }

    void step(std::vector<double>& params, const std::vector<double>& grad) {
        ++t_;
        const double lr = cfg_.lr_decay_steps > 0.0
                              ? cfg_.learning_rate / (1.0 + static_cast<double>(t_ - 1) / cfg_.lr_decay_steps)
                              : cfg_.learning_rate;
        if (cfg_.algorithm == OptimizerAlgorithm::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
            return;
        }
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
        }
    }

  private:
    OptimizerConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<double> m_, v_;
};

// Accumulates iterates over the training tail; classic averaging to kill the
// stochastic-gradient noise floor.
class TailAverager {
  public:
    TailAverager(std::int64_t total_steps, double frac)
        : start_(total_steps - static_cast<std::int64_t>(frac * static_cast<double>(total_steps))) {}

    void observe(std::int64_t step, const std::vector<double>& params) {
        if (step < start_) return;
        if (acc_.empty()) acc_.assign(params.size(), 0.0);
        for (std::size_t i = 0; i < params.size(); ++i) acc_[i] += params[i];
        ++n_;
    }

    void finalize(std::vector<double>& params) const {
        if (n_ == 0) return;
        for (std::size_t i = 0; i < params.size(); ++i) params[i] = acc_[i] / static_cast<double>(n_);
    }

  private:
    std::int64_t start_;
    std::int64_t n_ = 0;
    std::vector<double> acc_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

// Compares an analytic gradient against central differences on a random subset
// of coordinates; returns the max relative error.
inline double grad_check(const std::function<double(std::span<const double>)>& loss,
                         const std::function<void(std::span<const double>, std::span<double>)>& analytic,
                         std::vector<double> params, int n_coords = 64, double fd_step = 1e-5,
                         std::uint64_t seed = 0) {
    if (!std::isfinite(loss(params))) throw precondition_error("grad_check: loss not finite at params");
    std::vector<double> grad(params.size(), 0.0);
    analytic(params, grad);
    double max_rel = 0.0;
    const int n = std::min<int>(n_coords, static_cast<int>(params.size()));
    for (int k = 0; k < n; ++k) {
        const std::size_t i =
            (params.size() <= static_cast<std::size_t>(n_coords))
                ? static_cast<std::size_t>(k)
                : static_cast<std::size_t>(rng::mix(seed, 0x6f, static_cast<std::uint64_t>(k)) % params.size());
        const double orig = params[i];
        params[i] = orig + fd_step;
        const double up = loss(params);
        params[i] = orig - fd_step;
        const double dn = loss(params);
        params[i] = orig;
        const double fd = (up - dn) / (2.0 * fd_step);
        const double an = grad[i];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        if (std::abs(fd) < 1e-12 && std::abs(an) < 1e-12) continue;
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
    return max_rel;
}

}  // namespace dfm::nn
