#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfm/common.hpp"
#include "dfm/ctmc.hpp"
#include "dfm/guidance.hpp"
#include "dfm/posterior.hpp"
#include "dfm/statespace.hpp"

namespace dfm::energy2d {

constexpr int kGridSymbols = 33;  // data alphabet {0,...,32} per axis
constexpr double kBoxHalfWidth = 1.25;

inline StateSpace grid_space() { return StateSpace(2, kGridSymbols); }
// masked variant appends the absorbing symbol at index 33
inline StateSpace masked_grid_space() { return StateSpace(2, kGridSymbols + 1, kGridSymbols); }

inline int quantize_coord(double v) {
    const double g = (v + kBoxHalfWidth) / (2.0 * kBoxHalfWidth) * (kGridSymbols - 1);
    const int b = static_cast<int>(std::lround(g));
    return std::min(std::max(b, 0), kGridSymbols - 1);
}

struct ShapeDataset {
    std::string name;
    std::vector<double> raw;          // N x 2
    std::vector<std::int32_t> quantized;  // N x 2, in [0, 32]
    std::uint64_t seed = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(quantized.size()) / 2; }
};

// 4x4 checkerboard cell of a grid bin; the generator and its test share this.
inline int checker_cell_of_bin(int bin) { return std::min(3, (4 * bin) / kGridSymbols); }

namespace detail {

inline void emit(ShapeDataset& ds, double x, double y) {
    ds.raw.push_back(x);
    ds.raw.push_back(y);
    ds.quantized.push_back(quantize_coord(x));
    ds.quantized.push_back(quantize_coord(y));
}

}  // namespace detail

// Standard synthetic 2-D shapes, affinely mapped into the grid box and rounded.
inline ShapeDataset generate_dataset(const std::string& name, std::int64_t n, std::uint64_t seed) {
    if (n < 1) throw precondition_error("generate_dataset: n must be >= 1");
    ShapeDataset ds;
    ds.name = name;
    ds.seed = seed;
    ds.raw.reserve(static_cast<std::size_t>(2 * n));
    ds.quantized.reserve(static_cast<std::size_t>(2 * n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint64_t ii = static_cast<std::uint64_t>(i);
        const double u1 = rng::uniform(seed, 0xd, ii, 1);
        const double u2 = rng::uniform(seed, 0xd, ii, 2);
        const double g1 = rng::normal(seed, 0xd, ii, 3);
        const double g2 = rng::normal(seed, 0xd, ii, 4);
        if (name == "rings") {
            const double radii[4] = {0.25, 0.5, 0.75, 1.0};
            const double r = radii[static_cast<int>(u1 * 4.0) & 3] + 0.02 * g1;
            const double th = 2.0 * M_PI * u2;
            detail::emit(ds, r * std::cos(th), r * std::sin(th));
        } else if (name == "moons") {
            const double th = M_PI * u2;
            double x, y;
            if (u1 < 0.5) {
                x = std::cos(th);
                y = std::sin(th);
            } else {
                x = 1.0 - std::cos(th);
                y = 0.5 - std::sin(th);
            }
            x += 0.05 * g1;
            y += 0.05 * g2;
            detail::emit(ds, (x - 0.5) / 1.2, (y - 0.25) / 1.2);
        } else if (name == "8gaussians") {
            const int k = static_cast<int>(u1 * 8.0) & 7;
            const double ang = k * (2.0 * M_PI / 8.0);
            detail::emit(ds, 0.8 * std::cos(ang) + 0.07 * g1, 0.8 * std::sin(ang) + 0.07 * g2);
        } else if (name == "2spirals") {
            const double a = 3.0 * M_PI * std::sqrt(u1);
            const double r = a / (3.0 * M_PI);
            const double sgn = u2 < 0.5 ? 1.0 : -1.0;
            detail::emit(ds, sgn * r * std::sin(a) + 0.02 * g1, sgn * r * std::cos(a) + 0.02 * g2);
        } else if (name == "checkerboard") {
            // bin-aligned: pick an "on" cell, then a bin inside it, then jitter
            // within the bin so rounding lands back on the same bin
            const int cell_id = static_cast<int>(u1 * 8.0) & 7;
            const int ci = cell_id / 2;
            const int cj = 2 * (cell_id % 2) + (ci % 2 == 0 ? 0 : 1);
            auto bin_in_cell = [](int c, double u) {
                int lo = 0;
                while (checker_cell_of_bin(lo) < c) ++lo;
                int hi = lo;
                while (hi + 1 < kGridSymbols && checker_cell_of_bin(hi + 1) == c) ++hi;
                return lo + static_cast<int>(u * (hi - lo + 1));
            };
            const int bx = bin_in_cell(ci, u2);
            const int by = bin_in_cell(cj, rng::uniform(seed, 0xd, ii, 5));
            const double w = 2.0 * kBoxHalfWidth / (kGridSymbols - 1);
            const double jx = (rng::uniform(seed, 0xd, ii, 6) - 0.5) * 0.9 * w;
            const double jy = (rng::uniform(seed, 0xd, ii, 7) - 0.5) * 0.9 * w;
            detail::emit(ds, -kBoxHalfWidth + bx * w + jx, -kBoxHalfWidth + by * w + jy);
        } else if (name == "swissroll") {
            const double th = 1.5 * M_PI * (1.0 + 2.0 * u1);
            const double scale = 1.0 / (4.5 * M_PI);
            detail::emit(ds, th * std::cos(th) * scale + 0.03 * g1, th * std::sin(th) * scale + 0.03 * g2);
        } else {
            throw config_error("unknown dataset '" + name +
                               "' (expected rings|moons|8gaussians|2spirals|checkerboard|swissroll)");
        }
    }
    return ds;
}

inline const std::vector<std::string>& dataset_names() {
    static const std::vector<std::string> names = {"rings",    "moons",        "8gaussians",
                                                   "2spirals", "checkerboard", "swissroll"};
    return names;
}

inline Pmf dataset_pmf(const ShapeDataset& ds) {
    SampleBatch b;
    b.space = grid_space();
    b.states = ds.quantized;
    return empirical_pmf(b, b.space);
}

// 3x3 box filter on the 33x33 grid (edge cells average fewer neighbors).
inline std::vector<double> box3_smooth(std::span<const double> grid) {
    const int S = kGridSymbols;
    std::vector<double> out(static_cast<std::size_t>(S) * S, 0.0);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
            double acc = 0.0;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    const int a = i + di, b = j + dj;
                    if (a >= 0 && a < S && b >= 0 && b < S)
                        acc += grid[static_cast<std::size_t>(a * S + b)];
                }
            out[static_cast<std::size_t>(i * S + j)] = acc / 9.0;
        }
    return out;
}

// Classifier p(y=1|x) on the grid, in (eps, 1]; energy E(x) = -log p(y=1|x).
struct EnergyFunction {
    std::vector<double> p_y;  // 33^2 grid, row-major over (x0, x1)
    double eps = 1e-4;

    double classifier(std::span<const int> x) const {
        return p_y[static_cast<std::size_t>(x[0] * kGridSymbols + x[1])];
    }
    double energy(std::span<const int> x) const { return -std::log(classifier(x)); }
};

// Default classifier: smoothed, max-normalized target density with a floor.
inline EnergyFunction classifier_from_density(const Pmf& target, double eps = 1e-4) {
    if (target.space().dims != 2 || target.space().alphabet_size != kGridSymbols)
        throw precondition_error("classifier_from_density: 33x33 grid pmf required");
    EnergyFunction e;
    e.eps = eps;
    e.p_y = box3_smooth(target.weights());
    double mx = 0.0;
    for (const double v : e.p_y) mx = std::max(mx, v);
    if (!(mx > 0.0)) throw numeric_error("classifier_from_density: empty density");
    for (double& v : e.p_y) v = std::max(eps, v / mx);
    return e;
}

// Radial alternative: p(y=1|x) proportional to a Gaussian bump.
inline EnergyFunction classifier_radial(double cx, double cy, double sigma_bins, double eps = 1e-4) {
    EnergyFunction e;
    e.eps = eps;
    e.p_y.resize(static_cast<std::size_t>(kGridSymbols) * kGridSymbols);
    for (int i = 0; i < kGridSymbols; ++i)
        for (int j = 0; j < kGridSymbols; ++j) {
            const double dx = i - cx, dy = j - cy;
            e.p_y[static_cast<std::size_t>(i * kGridSymbols + j)] =
                std::max(eps, std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_bins * sigma_bins)));
        }
    return e;
}

// Energy-guided target p1^(gamma) ∝ p1(x) * p(y=1|x)^gamma, and the matching
// unnormalized density ratio r(x) = p(y=1|x)^gamma (admissible by scale
// invariance of the guided posterior).
struct GuidedTarget {
    Pmf pmf;
    DensityRatio ratio;
};

inline GuidedTarget guided_target(const Pmf& p1, const EnergyFunction& energy, double gamma) {
    if (gamma < 0.0) throw precondition_error("guided_target: gamma must be >= 0");
    std::vector<double> w(p1.weights());
    const StateSpace sp = p1.space();
    for (std::uint64_t i = 0; i < w.size(); ++i) {
        const auto st = sp.state_of(i);
        w[i] *= std::pow(energy.classifier(st), gamma);
    }
    auto pmf = Pmf::normalized(sp, std::move(w));
    EnergyFunction e = energy;
    DensityRatio r{[e, gamma](std::span<const int> x) { return std::pow(e.classifier(x), gamma); },
                   nullptr};
    return {std::move(pmf), std::move(r)};
}

// Embed a 33x33 data pmf into the masked 34-alphabet space (mask mass zero).
inline Pmf embed_with_mask(const Pmf& data_pmf) {
    const StateSpace from = data_pmf.space();
    const StateSpace to = masked_grid_space();
    std::vector<double> w(to.checked_state_count(), 0.0);
    for (std::uint64_t i = 0; i < data_pmf.size(); ++i) {
        if (data_pmf[i] <= 0.0) continue;
        const auto st = from.state_of(i);
        w[to.index_of(st)] = data_pmf[i];
    }
    return Pmf::normalized(to, std::move(w));
}

// Project terminal samples (always data symbols) onto the 33x33 grid space.
inline Pmf terminal_pmf(const SampleBatch& batch) {
    SampleBatch b;
    b.space = grid_space();
    b.states = batch.states;
    for (const auto v : b.states)
        if (v < 0 || v >= kGridSymbols)
            throw numeric_error("terminal_pmf: sample contains a non-data symbol");
    return empirical_pmf(b, b.space);
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

struct RunConfigPoint {
    GuidanceScheme scheme;
    InitKind init = InitKind::uniform;
    double gamma = 0.0;
};

struct RunMetrics {
    RunConfigPoint point;
    std::uint64_t seed = 0;
    double tv = 0.0;
    double kl = 0.0;
    std::int64_t guidance_calls_per_step = 0;
    std::int64_t expected_calls_per_step = 0;
    double seconds = 0.0;
    Pmf empirical;
    Pmf exact_target;

    RunMetrics(Pmf emp, Pmf tgt) : empirical(std::move(emp)), exact_target(std::move(tgt)) {}
};

struct ExperimentConfig {
    std::string dataset = "rings";
    std::int64_t dataset_n = 200000;
    std::uint64_t dataset_seed = 7;
    std::vector<double> gammas = {0.0, 3.0};
    std::vector<GuidanceSchemeKind> schemes = {GuidanceSchemeKind::posterior_based};
    std::vector<InitKind> inits = {InitKind::uniform};
    std::int64_t steps = 64;
    std::int64_t chains = 20000;
    std::uint64_t seed = 1;
    int threads = 0;
    std::string classifier = "density";  // "density" | "radial"
};

// One grid point with exact posterior and exact guidance backends.
inline RunMetrics run_point(const Pmf& data_pmf, const EnergyFunction& energy,
                            const RunConfigPoint& point, std::int64_t steps, std::int64_t chains,
                            std::uint64_t seed, int threads) {
    const bool masked = point.init == InitKind::masked;
    const StateSpace space = masked ? masked_grid_space() : grid_space();
    const Pmf p1 = masked ? embed_with_mask(data_pmf) : data_pmf;
    const auto sched = scheduler_cosine();
    const auto path = ConditionalPath::mixture(space, sched,
                                               masked ? InitKind::masked : InitKind::uniform);
    auto posterior = std::make_shared<ExactPosterior>(p1, path);

    GuidedTarget target = guided_target(data_pmf, energy,
                                        point.scheme.kind == GuidanceSchemeKind::none ? 0.0
                                                                                      : point.gamma);

    SamplerConfig cfg;
    cfg.steps = steps;
    cfg.initial = masked ? InitKind::masked : InitKind::uniform;
    cfg.seed = seed;
    cfg.threads = threads;

    std::unique_ptr<GuidanceModel> guidance;
    GuidanceScheme scheme = point.scheme;
    if (scheme.kind == GuidanceSchemeKind::posterior_based) {
        guidance = std::make_unique<ExactGuidance>(posterior, target.ratio,
                                                   GuidanceKind::posterior_based);
    } else if (scheme.kind == GuidanceSchemeKind::rate_based ||
               scheme.kind == GuidanceSchemeKind::first_order) {
        guidance = std::make_unique<ExactGuidance>(posterior, target.ratio, GuidanceKind::rate_based);
    } else if (scheme.kind == GuidanceSchemeKind::predictor) {
        // the predictor exponentiates the plain classifier expectation
        EnergyFunction e = energy;
        DensityRatio base{[e](std::span<const int> x) { return e.classifier(x); }, nullptr};
        scheme.gamma = point.gamma;
        guidance = std::make_unique<ExactGuidance>(posterior, base, GuidanceKind::rate_based);
    }

    const auto t0 = std::chrono::steady_clock::now();
    SampleRun run = guidance
                        ? sample_guided(*posterior, path, *guidance, scheme, cfg, chains)
                        : sample_unguided(*posterior, path, cfg, chains);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    RunMetrics m(terminal_pmf(run.terminal), target.pmf);
    m.point = point;
    m.seed = seed;
    m.tv = pmf_total_variation(m.empirical, m.exact_target);
    m.kl = pmf_kl_divergence(m.empirical, m.exact_target);
    m.guidance_calls_per_step = run.stats.guidance_calls_per_step();
    m.expected_calls_per_step = call_count(scheme, space, cfg.initial);
    m.seconds = secs;
    if (run.stats.jump_steps > 0 &&
        static_cast<std::uint64_t>(m.guidance_calls_per_step) *
                static_cast<std::uint64_t>(run.stats.jump_steps) *
                static_cast<std::uint64_t>(chains) != run.stats.guidance_calls)
        throw numeric_error("run_point: guidance call counter is not an exact per-step multiple");
    if (m.guidance_calls_per_step != m.expected_calls_per_step)
        throw numeric_error("run_point: guidance call count deviates from the published formula");
    return m;
}

inline std::vector<RunMetrics> run_experiment(const ExperimentConfig& cfg) {
    const auto ds = generate_dataset(cfg.dataset, cfg.dataset_n, cfg.dataset_seed);
    const Pmf p1 = dataset_pmf(ds);
    const EnergyFunction energy = cfg.classifier == "radial"
                                      ? classifier_radial(16.0, 16.0, 6.0)
                                      : classifier_from_density(p1);
    std::vector<RunMetrics> out;
    for (const double gamma : cfg.gammas)
        for (const auto scheme_kind : cfg.schemes)
            for (const auto init : cfg.inits) {
                RunConfigPoint point;
                point.scheme.kind = scheme_kind;
                point.scheme.gamma = gamma;
                point.gamma = gamma;
                point.init = init;
                out.push_back(run_point(p1, energy, point, cfg.steps, cfg.chains, cfg.seed,
                                        cfg.threads));
            }
    return out;
}

}  // namespace dfm::energy2d
