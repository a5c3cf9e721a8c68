#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/statespace.hpp"

namespace dfm {

// Interpolation schedule kappa: [0,1] -> [0,1], non-decreasing, kappa(0)=0,
// kappa(1)=1, carried together with its analytic derivative.
struct Scheduler {
    std::string name;
    std::function<double(double)> kappa;
    std::function<double(double)> kappa_dot;

    void validate(int grid_points = 1000) const {
        if (std::abs(kappa(0.0)) > 1e-12 || std::abs(kappa(1.0) - 1.0) > 1e-12)
            throw precondition_error("Scheduler: kappa must satisfy kappa(0)=0, kappa(1)=1");
        double prev = kappa(0.0);
        for (int i = 1; i <= grid_points; ++i) {
            const double t = static_cast<double>(i) / grid_points;
            const double k = kappa(t);
            if (k < prev - 1e-12) throw precondition_error("Scheduler: kappa must be non-decreasing");
            if (kappa_dot(t) < -1e-12) throw precondition_error("Scheduler: kappa_dot must be >= 0");
            prev = k;
        }
    }
};

inline Scheduler scheduler_linear() {
    Scheduler s{"linear", [](double t) { return t; }, [](double) { return 1.0; }};
    s.validate();
    return s;
}

// kappa(t) = cos^2((pi/2)(1-t))
inline Scheduler scheduler_cosine() {
    Scheduler s{"cosine",
                [](double t) {
                    const double c = std::cos(0.5 * M_PI * (1.0 - t));
                    return c * c;
                },
                [](double t) { return 0.5 * M_PI * std::sin(M_PI * (1.0 - t)); }};
    s.validate();
    return s;
}

inline Scheduler scheduler_by_name(const std::string& name) {
    if (name == "linear") return scheduler_linear();
    if (name == "cosine") return scheduler_cosine();
    throw config_error("unknown scheduler '" + name + "' (expected 'linear' or 'cosine')");
}

enum class PathKind { mixture, metric_induced };
enum class InitKind { uniform, masked, custom };

inline InitKind init_by_name(const std::string& name) {
    if (name == "uniform") return InitKind::uniform;
    if (name == "masked") return InitKind::masked;
    throw config_error("unknown init '" + name + "' (expected 'uniform' or 'masked')");
}

// Coordinate-wise conditional probability path and its transition rate.
//
// mixture:        q_t(a|b) = (1-kappa)*q0(a) + kappa*delta_b(a)
//                 u_t(z,x|b) = kappa_dot/(1-kappa) * (delta_b(z) - delta_b(x))
// metric_induced: q_t(a|b) = softmax(-beta_t * dist(a,b)) with the
//                 kinetic-optimal rate
//                 u_t(z,x|b) = q_t(z|b) * beta_dot * [dist(x,b) - dist(z,b)]_+
class ConditionalPath {
  public:
    static ConditionalPath mixture(const StateSpace& space, const Scheduler& sched, InitKind init,
                                   std::vector<double> custom_q0 = {}) {
        ConditionalPath p;
        p.kind_ = PathKind::mixture;
        p.space_ = space;
        p.sched_ = sched;
        p.init_ = init;
        const std::size_t n = static_cast<std::size_t>(space.alphabet_size);
        switch (init) {
            case InitKind::uniform:
                p.q0_.assign(n, 1.0 / static_cast<double>(n));
                break;
            case InitKind::masked: {
                if (!space.mask_symbol)
                    throw config_error("masked path requires a state space with a mask symbol");
                p.q0_.assign(n, 0.0);
                p.q0_[static_cast<std::size_t>(*space.mask_symbol)] = 1.0;
                break;
            }
            case InitKind::custom: {
                if (custom_q0.size() != n)
                    throw config_error("custom q0 must have one entry per alphabet symbol");
                double s = 0.0;
                for (const double v : custom_q0) {
                    if (v < 0.0) throw config_error("custom q0 must be non-negative");
                    s += v;
                }
                if (!(s > 0.0)) throw config_error("custom q0 must have positive mass");
                for (double& v : custom_q0) v /= s;
                p.q0_ = std::move(custom_q0);
                break;
            }
        }
        return p;
    }

    // Default metric path: dist(a,b) = |a-b| on the integer alphabet and
    // beta_t = -log(1 - kappa_t), so beta_0 = 0 and beta_1 = inf.
    static ConditionalPath metric_induced(const StateSpace& space, const Scheduler& sched,
                                          std::function<double(int, int)> dist = {}) {
        ConditionalPath p;
        p.kind_ = PathKind::metric_induced;
        p.space_ = space;
        p.sched_ = sched;
        p.init_ = InitKind::uniform;  // beta_0 = 0 gives the uniform start
        p.dist_ = dist ? std::move(dist)
                       : [](int a, int b) { return std::abs(static_cast<double>(a - b)); };
        p.q0_.assign(static_cast<std::size_t>(space.alphabet_size),
                     1.0 / static_cast<double>(space.alphabet_size));
        return p;
    }

    PathKind kind() const { return kind_; }
    InitKind init() const { return init_; }
    const StateSpace& space() const { return space_; }
    const Scheduler& scheduler() const { return sched_; }
    const std::vector<double>& init_pmf() const { return q0_; }

    // q_{t|1}^d(.|x1d): one pmf row over the alphabet
    std::vector<double> cond_prob_row(double t, int x1d) const {
        check_time(t);
        check_symbol(x1d);
        const int n = space_.alphabet_size;
        std::vector<double> row(static_cast<std::size_t>(n));
        if (kind_ == PathKind::mixture) {
            const double k = sched_.kappa(t);
            for (int a = 0; a < n; ++a)
                row[static_cast<std::size_t>(a)] = (1.0 - k) * q0_[static_cast<std::size_t>(a)] +
                                                   (a == x1d ? k : 0.0);
        } else {
            const double beta = beta_of(t);
            double mx = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < n; ++a) {
                row[static_cast<std::size_t>(a)] = -beta * dist_(a, x1d);
                mx = std::max(mx, row[static_cast<std::size_t>(a)]);
            }
            double z = 0.0;
            for (int a = 0; a < n; ++a) {
                row[static_cast<std::size_t>(a)] = std::exp(row[static_cast<std::size_t>(a)] - mx);
                z += row[static_cast<std::size_t>(a)];
            }
            for (double& v : row) v /= z;
        }
        return row;
    }

    double cond_prob(double t, int xd, int x1d) const {
        check_symbol(xd);
        return cond_prob_row(t, x1d)[static_cast<std::size_t>(xd)];
    }

    // Conditional rate entry u_t^d(zd, xd | x1d). The diagonal equals minus the
    // off-diagonal row sum. Undefined at the kappa -> 1 pole.
    double cond_rate(double t, int zd, int xd, int x1d) const {
        check_symbol(zd);
        check_symbol(xd);
        check_symbol(x1d);
        if (t < 0.0 || t >= 1.0) throw precondition_error("cond_rate: t must lie in [0, 1)");
        if (kind_ == PathKind::mixture) {
            const double coeff = mixture_coeff(t);
            return coeff * ((zd == x1d ? 1.0 : 0.0) - (zd == xd ? 1.0 : 0.0));
        }
        const auto row = cond_rate_row(t, xd, x1d);
        return row[static_cast<std::size_t>(zd)];
    }

    // Full destination row of u_t^d(. , xd | x1d), diagonal included.
    std::vector<double> cond_rate_row(double t, int xd, int x1d) const {
        check_symbol(xd);
        check_symbol(x1d);
        if (t < 0.0 || t >= 1.0) throw precondition_error("cond_rate: t must lie in [0, 1)");
        const int n = space_.alphabet_size;
        std::vector<double> row(static_cast<std::size_t>(n), 0.0);
        if (kind_ == PathKind::mixture) {
            const double coeff = mixture_coeff(t);
            if (xd != x1d) {
                row[static_cast<std::size_t>(x1d)] = coeff;
                row[static_cast<std::size_t>(xd)] = -coeff;
            }
            return row;
        }
        const double bdot = beta_dot_of(t);
        const auto prob = cond_prob_row(t, x1d);
        const double dx = dist_(xd, x1d);
        double total = 0.0;
        for (int z = 0; z < n; ++z) {
            if (z == xd) continue;
            const double gap = dx - dist_(z, x1d);
            if (gap > 0.0) {
                const double v = prob[static_cast<std::size_t>(z)] * bdot * gap;
                row[static_cast<std::size_t>(z)] = v;
                total += v;
            }
        }
        row[static_cast<std::size_t>(xd)] = -total;
        return row;
    }

    // Marginal rate row u_t^d(., x) = sum_{x1d} u_t^d(., xd|x1d) * posterior(x1d),
    // given one factorized posterior row for coordinate d.
    std::vector<double> marginal_rate_row(double t, int xd, std::span<const double> posterior_row) const {
        check_symbol(xd);
        const int n = space_.alphabet_size;
        if (posterior_row.size() != static_cast<std::size_t>(n))
            throw precondition_error("marginal_rate_row: posterior row has wrong length");
        std::vector<double> row(static_cast<std::size_t>(n), 0.0);
        if (kind_ == PathKind::mixture) {
            const double coeff = mixture_coeff(t);
            double total = 0.0;
            for (int z = 0; z < n; ++z) {
                if (z == xd) continue;
                const double v = coeff * posterior_row[static_cast<std::size_t>(z)];
                row[static_cast<std::size_t>(z)] = v;
                total += v;
            }
            row[static_cast<std::size_t>(xd)] = -total;
            return row;
        }
        for (int b = 0; b < n; ++b) {
            const double w = posterior_row[static_cast<std::size_t>(b)];
            if (w <= 0.0) continue;
            const auto r = cond_rate_row(t, xd, b);
            for (int z = 0; z < n; ++z) row[static_cast<std::size_t>(z)] += w * r[static_cast<std::size_t>(z)];
        }
        return row;
    }

    // kappa_dot/(1-kappa), the shared scale of every mixture rate entry
    double mixture_coeff(double t) const {
        const double k = sched_.kappa(t);
        if (k >= 1.0) throw numeric_error("terminal-time rate undefined (kappa(t) = 1)");
        return sched_.kappa_dot(t) / (1.0 - k);
    }

  private:
    void check_time(double t) const {
        if (t < 0.0 || t > 1.0) throw precondition_error("time must lie in [0, 1]");
    }
    void check_symbol(int s) const {
        if (s < 0 || s >= space_.alphabet_size) throw precondition_error("symbol out of range");
    }
    double beta_of(double t) const {
        const double k = sched_.kappa(t);
        if (k >= 1.0) return std::numeric_limits<double>::infinity();
        return -std::log1p(-k);
    }
    double beta_dot_of(double t) const { return mixture_coeff(t); }

    PathKind kind_ = PathKind::mixture;
    StateSpace space_;
    Scheduler sched_;
    InitKind init_ = InitKind::uniform;
    std::vector<double> q0_;
    std::function<double(int, int)> dist_;
};

// CLI spelling: "mixture-uniform", "mixture-masked", "metric".
inline ConditionalPath path_by_name(const std::string& name, const StateSpace& space,
                                    const Scheduler& sched) {
    if (name == "mixture-uniform") return ConditionalPath::mixture(space, sched, InitKind::uniform);
    if (name == "mixture-masked") return ConditionalPath::mixture(space, sched, InitKind::masked);
    if (name == "metric") return ConditionalPath::metric_induced(space, sched);
    throw config_error("unknown path '" + name +
                       "' (expected 'mixture-uniform', 'mixture-masked' or 'metric')");
}

}  // namespace dfm
