#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "dfm/common.hpp"

namespace dfm {

constexpr std::uint64_t kDefaultEnumerationCap = 1ULL << 20;

// Finite product space S^D with one shared alphabet per coordinate. The mask
// symbol, when present, is an ordinary index flagged as the absorbing state.
struct StateSpace {
    int dims = 1;
    int alphabet_size = 2;
    std::optional<int> mask_symbol;

    StateSpace() = default;
    StateSpace(int d, int s, std::optional<int> mask = std::nullopt)
        : dims(d), alphabet_size(s), mask_symbol(mask) {
        if (dims < 1) throw precondition_error("StateSpace: dims must be >= 1");
        if (alphabet_size < 2) throw precondition_error("StateSpace: alphabet_size must be >= 2");
        if (mask_symbol && (*mask_symbol < 0 || *mask_symbol >= alphabet_size))
            throw precondition_error("StateSpace: mask_symbol out of range");
    }

    bool operator==(const StateSpace& o) const {
        return dims == o.dims && alphabet_size == o.alphabet_size && mask_symbol == o.mask_symbol;
    }

    bool is_mask(int symbol) const { return mask_symbol && *mask_symbol == symbol; }

    // number of data symbols (alphabet minus the mask, if any)
    int data_symbols() const { return alphabet_size - (mask_symbol ? 1 : 0); }

    // |S|^D, or nullopt on overflow past `cap`
    std::optional<std::uint64_t> state_count(std::uint64_t cap = kDefaultEnumerationCap) const {
        std::uint64_t n = 1;
        for (int d = 0; d < dims; ++d) {
            if (n > cap / static_cast<std::uint64_t>(alphabet_size)) {
                if (static_cast<double>(n) * alphabet_size > static_cast<double>(cap)) return std::nullopt;
            }
            n *= static_cast<std::uint64_t>(alphabet_size);
            if (n > cap) return std::nullopt;
        }
        return n;
    }

    std::uint64_t checked_state_count(std::uint64_t cap = kDefaultEnumerationCap) const {
        const auto n = state_count(cap);
        if (!n) throw precondition_error("enumeration infeasible: |S|^D exceeds the cap");
        return *n;
    }

    // lexicographic index <-> state (first coordinate most significant)
    std::uint64_t index_of(std::span<const int> state) const {
        std::uint64_t idx = 0;
        for (int d = 0; d < dims; ++d) {
            const int s = state[static_cast<std::size_t>(d)];
            if (s < 0 || s >= alphabet_size) throw precondition_error("index_of: symbol out of range");
            idx = idx * static_cast<std::uint64_t>(alphabet_size) + static_cast<std::uint64_t>(s);
        }
        return idx;
    }

    std::vector<int> state_of(std::uint64_t index) const {
        std::vector<int> state(static_cast<std::size_t>(dims));
        for (int d = dims - 1; d >= 0; --d) {
            state[static_cast<std::size_t>(d)] = static_cast<int>(index % alphabet_size);
            index /= static_cast<std::uint64_t>(alphabet_size);
        }
        return state;
    }
};

// All states of S^D in lexicographic order. Errors when |S|^D exceeds the cap.
inline std::vector<std::vector<int>> enumerate_states(const StateSpace& space,
                                                      std::uint64_t cap = kDefaultEnumerationCap) {
    const std::uint64_t n = space.checked_state_count(cap);
    std::vector<std::vector<int>> out;
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) out.push_back(space.state_of(i));
    return out;
}

// Dense pmf over S^D, indexed lexicographically.
class Pmf {
  public:
    // Strict constructor: rejects negatives, renormalizes only tiny drift.
    static Pmf from_weights(const StateSpace& space, std::vector<double> w,
                            std::uint64_t cap = kDefaultEnumerationCap) {
        check_size(space, w, cap);
        double sum = 0.0;
        for (const double v : w) {
            if (v < 0.0) throw precondition_error("Pmf: negative weight");
            sum += v;
        }
        if (std::abs(sum - 1.0) >= 1e-9)
            throw precondition_error("Pmf: weights must sum to 1 (got drift >= 1e-9)");
        for (double& v : w) v /= sum;
        return Pmf(space, std::move(w));
    }

    // Normalizing constructor for unnormalized non-negative weights.
    static Pmf normalized(const StateSpace& space, std::vector<double> w,
                          std::uint64_t cap = kDefaultEnumerationCap) {
        check_size(space, w, cap);
        double sum = 0.0;
        for (const double v : w) {
            if (v < 0.0) throw precondition_error("Pmf: negative weight");
            sum += v;
        }
        if (!(sum > 0.0)) throw numeric_error("Pmf: total mass is zero");
        for (double& v : w) v /= sum;
        return Pmf(space, std::move(w));
    }

    static Pmf point_mass(const StateSpace& space, std::span<const int> state) {
        std::vector<double> w(space.checked_state_count(), 0.0);
        w[space.index_of(state)] = 1.0;
        return Pmf(space, std::move(w));
    }

    static Pmf uniform(const StateSpace& space) {
        const std::uint64_t n = space.checked_state_count();
        return Pmf(space, std::vector<double>(n, 1.0 / static_cast<double>(n)));
    }

    const StateSpace& space() const { return space_; }
    const std::vector<double>& weights() const { return w_; }
    double operator[](std::uint64_t i) const { return w_[i]; }
    double at_state(std::span<const int> state) const { return w_[space_.index_of(state)]; }
    std::uint64_t size() const { return w_.size(); }

    double entropy() const {
        double h = 0.0;
        for (const double v : w_)
            if (v > 0.0) h -= v * std::log(v);
        return h;
    }

  private:
    Pmf(const StateSpace& space, std::vector<double> w) : space_(space), w_(std::move(w)) {}

    static void check_size(const StateSpace& space, const std::vector<double>& w, std::uint64_t cap) {
        if (w.size() != space.checked_state_count(cap))
            throw precondition_error("Pmf: weight vector length != |S|^D");
    }

    StateSpace space_;
    std::vector<double> w_;
};

// TV(a,b) = 1/2 * sum |a - b|
inline double pmf_total_variation(const Pmf& a, const Pmf& b) {
    if (!(a.space() == b.space())) throw precondition_error("pmf_total_variation: mismatched spaces");
    double s = 0.0;
    for (std::uint64_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return 0.5 * s;
}

// KL(a||b) over the support of a; infinite mass mismatches raise.
inline double pmf_kl_divergence(const Pmf& a, const Pmf& b) {
    if (!(a.space() == b.space())) throw precondition_error("pmf_kl_divergence: mismatched spaces");
    double s = 0.0;
    for (std::uint64_t i = 0; i < a.size(); ++i) {
        if (a[i] > 0.0) {
            if (b[i] <= 0.0) throw numeric_error("pmf_kl_divergence: support of a not contained in b");
            s += a[i] * std::log(a[i] / b[i]);
        }
    }
    return s;
}

// Per-coordinate posterior rows: entry (d, s) = P(x_1^d = s | current state).
class FactorizedPosterior {
  public:
    FactorizedPosterior(int dims, int alphabet, std::vector<double> rows)
        : dims_(dims), alphabet_(alphabet), rows_(std::move(rows)) {
        if (rows_.size() != static_cast<std::size_t>(dims_) * static_cast<std::size_t>(alphabet_))
            throw precondition_error("FactorizedPosterior: wrong matrix size");
        for (int d = 0; d < dims_; ++d) {
            double s = 0.0;
            for (int a = 0; a < alphabet_; ++a) {
                const double v = row(d)[static_cast<std::size_t>(a)];
                if (v < 0.0) throw precondition_error("FactorizedPosterior: negative entry");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-10)
                throw precondition_error("FactorizedPosterior: row does not sum to 1");
        }
    }

    int dims() const { return dims_; }
    int alphabet() const { return alphabet_; }
    std::span<const double> row(int d) const {
        return {rows_.data() + static_cast<std::size_t>(d) * static_cast<std::size_t>(alphabet_),
                static_cast<std::size_t>(alphabet_)};
    }
    double operator()(int d, int s) const {
        return rows_[static_cast<std::size_t>(d) * static_cast<std::size_t>(alphabet_) +
                     static_cast<std::size_t>(s)];
    }
    const std::vector<double>& data() const { return rows_; }

  private:
    int dims_;
    int alphabet_;
    std::vector<double> rows_;
};

// N samples of S^D at a common time.
struct SampleBatch {
    StateSpace space;
    std::vector<std::int32_t> states;  // row-major N x D
    double time = 1.0;

    std::int64_t size() const {
        return static_cast<std::int64_t>(states.size()) / space.dims;
    }
    std::span<const std::int32_t> state(std::int64_t i) const {
        return {states.data() + i * space.dims, static_cast<std::size_t>(space.dims)};
    }
    std::span<std::int32_t> state(std::int64_t i) {
        return {states.data() + i * space.dims, static_cast<std::size_t>(space.dims)};
    }
};

// Density ratio r(x) = q_1(x)/p_1(x), known up to a constant. Must be strictly
// positive on the support of p_1.
struct DensityRatio {
    std::function<double(std::span<const int>)> evaluator;
    std::function<bool(std::span<const int>)> support_mask;  // optional: true where p_1 > 0

    double operator()(std::span<const int> x) const {
        const double r = evaluator(x);
        if (!(r > 0.0) && (!support_mask || support_mask(x)))
            throw numeric_error("DensityRatio: non-positive ratio on the support");
        return r;
    }

    static DensityRatio constant(double c) {
        if (!(c > 0.0)) throw precondition_error("DensityRatio: constant must be positive");
        return {[c](std::span<const int>) { return c; }, nullptr};
    }

    // Tabulated ratio between two dense pmfs (target/source) on small spaces.
    static DensityRatio from_pmfs(const Pmf& target, const Pmf& source) {
        if (!(target.space() == source.space()))
            throw precondition_error("DensityRatio: mismatched spaces");
        const StateSpace space = source.space();
        std::vector<double> table(source.size(), 1.0);
        for (std::uint64_t i = 0; i < source.size(); ++i) {
            if (source[i] > 0.0) {
                table[i] = target[i] / source[i];
            } else if (target[i] > 0.0) {
                throw precondition_error("DensityRatio: target support exceeds source support");
            }
        }
        std::vector<double> src(source.weights());
        return {[space, table = std::move(table)](std::span<const int> x) {
                    return table[space.index_of(x)];
                },
                [space, src = std::move(src)](std::span<const int> x) {
                    return src[space.index_of(x)] > 0.0;
                }};
    }
};

// Inverse-CDF sampler over a dense pmf, driven by counter-based uniforms.
class PmfSampler {
  public:
    explicit PmfSampler(const Pmf& pmf) : space_(pmf.space()), cdf_(pmf.weights()) {
        double acc = 0.0;
        for (double& v : cdf_) {
            acc += v;
            v = acc;
        }
        if (!cdf_.empty()) cdf_.back() = 1.0;
    }

    std::uint64_t draw_index(double u) const { return static_cast<std::uint64_t>(rng::categorical_from_cdf(cdf_, u)); }

    std::vector<int> draw_state(double u) const { return space_.state_of(draw_index(u)); }

    const StateSpace& space() const { return space_; }

  private:
    StateSpace space_;
    std::vector<double> cdf_;
};

// Histogram of a batch, normalized by N.
inline Pmf empirical_pmf(const SampleBatch& batch, const StateSpace& space,
                         std::uint64_t cap = kDefaultEnumerationCap) {
    if (batch.size() == 0) throw precondition_error("empirical_pmf: empty batch");
    std::vector<double> w(space.checked_state_count(cap), 0.0);
    std::vector<int> tmp(static_cast<std::size_t>(space.dims));
    for (std::int64_t i = 0; i < batch.size(); ++i) {
        const auto st = batch.state(i);
        for (int d = 0; d < space.dims; ++d) tmp[static_cast<std::size_t>(d)] = st[static_cast<std::size_t>(d)];
        w[space.index_of(tmp)] += 1.0;
    }
    return Pmf::normalized(space, std::move(w), cap);
}

}  // namespace dfm
