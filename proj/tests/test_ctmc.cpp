#include <catch2/catch_amalgamated.hpp>

#include "dfm/ctmc.hpp"
#include "dfm/energy2d.hpp"

using namespace dfm;

namespace {

Pmf random_pmf(const StateSpace& sp, std::uint64_t key) {
    std::vector<double> w(sp.checked_state_count());
    for (std::uint64_t i = 0; i < w.size(); ++i) w[i] = rng::uniform(880, key, i) + 0.05;
    return Pmf::normalized(sp, std::move(w));
}

// analytic mixture marginal: q_t = sum_x1 q_{t|1}(.|x1) p1(x1)
Pmf analytic_marginal(const Pmf& p1, const ConditionalPath& path, double t) {
    const StateSpace& sp = p1.space();
    std::vector<double> w(p1.size(), 0.0);
    for (std::uint64_t ji = 0; ji < p1.size(); ++ji) {
        if (p1[ji] <= 0.0) continue;
        const auto x1 = sp.state_of(ji);
        for (std::uint64_t xi = 0; xi < p1.size(); ++xi) {
            const auto x = sp.state_of(xi);
            double lik = p1[ji];
            for (int d = 0; d < sp.dims; ++d)
                lik *= path.cond_prob(t, x[static_cast<std::size_t>(d)], x1[static_cast<std::size_t>(d)]);
            w[xi] += lik;
        }
    }
    return Pmf::normalized(sp, std::move(w));
}

}  // namespace

TEST_CASE("kolmogorov_integrate basics") {
    const StateSpace sp(1, 3);
    SECTION("zero rate is stationary") {
        RateMatrixDense zero{sp, std::vector<double>(9, 0.0)};
        const auto q0 = Pmf::from_weights(sp, {0.2, 0.5, 0.3});
        const auto res = kolmogorov_integrate([&](double) { return zero; }, q0, 50);
        for (const auto& q : res.trajectory)
            for (int i = 0; i < 3; ++i) REQUIRE(q[static_cast<std::uint64_t>(i)] == Catch::Approx(q0[static_cast<std::uint64_t>(i)]));
    }
    SECTION("two-state closed form 1 - exp(-t)") {
        const StateSpace s2(1, 2);
        RateMatrixDense u{s2, {-1.0, 0.0, 1.0, 0.0}};  // u(1,0) = 1, u(0,0) = -1
        u.validate();
        const auto q0 = Pmf::point_mass(s2, std::vector<int>{0});
        const auto res = kolmogorov_integrate([&](double) { return u; }, q0, 200, 0.0, 1.0);
        REQUIRE(res.trajectory.back()[1] ==
                Catch::Approx(1.0 - std::exp(-1.0)).epsilon(0).margin(1e-6));
    }
    SECTION("column-sum validation") {
        RateMatrixDense bad{sp, std::vector<double>(9, 0.1)};
        REQUIRE_THROWS_AS(bad.validate(), precondition_error);
    }
}

TEST_CASE("mixture marginal rate drives q0 to p1 (TV < 1e-4 at 1024 steps)") {
    const StateSpace sp(2, 5);
    const auto p1 = random_pmf(sp, 1);
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    const ExactPosterior posterior(p1, path);
    auto rate_fn = [&](double t) {
        return dense_rate_from_rows(path, t,
                                    [&](std::span<const int> x) { return posterior.evaluate(t, x); });
    };
    const double horizon = 0.999;
    const auto res = kolmogorov_integrate(rate_fn, Pmf::uniform(sp), 1024, 0.0, horizon);
    REQUIRE(pmf_total_variation(res.trajectory.back(), p1) < 1e-4);
    REQUIRE(res.max_drift < 1e-8);
}

TEST_CASE("marginalization identity: dense rate reproduces the analytic marginal") {
    for (const std::uint64_t key : {11ULL, 12ULL}) {
        const int alphabet = key == 11 ? 5 : 8;
        const StateSpace sp(2, alphabet);
        const auto p1 = random_pmf(sp, key);
        const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
        const ExactPosterior posterior(p1, path);
        auto rate_fn = [&](double t) {
            return dense_rate_from_rows(
                path, t, [&](std::span<const int> x) { return posterior.evaluate(t, x); });
        };
        const double horizon = 0.99;
        const auto res = kolmogorov_integrate(rate_fn, Pmf::uniform(sp), 512, 0.0, horizon);
        double max_err = 0.0;
        for (std::size_t k = 64; k < res.trajectory.size(); k += 64) {
            const auto want = analytic_marginal(p1, path, res.grid_times[k]);
            for (std::uint64_t i = 0; i < want.size(); ++i)
                max_err = std::max(max_err, std::abs(res.trajectory[k][i] - want[i]));
        }
        REQUIRE(max_err < 1e-5);
    }
}

TEST_CASE("euler_step_prob reference cases") {
    SECTION("zero rates keep the point mass") {
        const std::vector<double> row = {0.0, 0.0, 0.0};
        const auto p = euler_step_prob(row, 0.2, 1);
        REQUIRE(p[1] == Catch::Approx(1.0));
    }
    SECTION("first-order mass transfer") {
        const std::vector<double> row = {-2.0, 2.0, 0.0};  // leave state 0 toward state 1
        const auto p = euler_step_prob(row, 0.1, 0);
        REQUIRE(p[0] == Catch::Approx(0.8));
        REQUIRE(p[1] == Catch::Approx(0.2));
    }
    SECTION("step beyond first-order validity raises") {
        const std::vector<double> row = {-4.0, 4.0};
        REQUIRE_THROWS_AS(euler_step_prob(row, 0.3, 0), precondition_error);
    }
}

TEST_CASE("jump_step basics") {
    const StateSpace sp(1, 6);
    const auto path = ConditionalPath::mixture(sp, scheduler_linear(), InitKind::uniform);
    SECTION("already at the clean symbol: no move") {
        SampleBatch b;
        b.space = sp;
        b.states = {4, 4, 4, 4};
        b.time = 0.3;
        std::vector<std::int32_t> x1 = {4, 4, 4, 4};
        const auto out = jump_step(b, x1, path, 0.3, 0.1, 7);
        REQUIRE(out.states == b.states);
    }
    SECTION("diverging intensity drives the jump probability to one") {
        // steep schedule: kappa = 1 - (1-t)^20, so h*lambda = 20*h/(1-t) >> 1
        Scheduler steep{"steep", [](double t) { return 1.0 - std::pow(1.0 - t, 20.0); },
                        [](double t) { return 20.0 * std::pow(1.0 - t, 19.0); }};
        steep.validate();
        const auto steep_path = ConditionalPath::mixture(sp, steep, InitKind::uniform);
        SampleBatch b;
        b.space = sp;
        b.states.assign(256, 0);
        b.time = 0.8;
        std::vector<std::int32_t> x1(256, 5);
        const auto out = jump_step(b, x1, steep_path, 0.8, 0.2, 7);
        for (const auto s : out.states) REQUIRE(s == 5);  // single admissible destination
    }
    SECTION("empirical jump frequency matches 1 - exp(-h*lambda)") {
        // constant-rate regime: kappa linear, t = 0, coefficient 1
        const std::int64_t n = 1000000;
        SampleBatch b;
        b.space = sp;
        b.states.assign(static_cast<std::size_t>(n), 0);
        std::vector<std::int32_t> x1(static_cast<std::size_t>(n), 3);
        const double h = 0.1;
        const auto out = jump_step(b, x1, path, 0.0, h, 99);
        std::int64_t jumps = 0;
        for (std::int64_t i = 0; i < n; ++i)
            if (out.states[static_cast<std::size_t>(i)] == 3) ++jumps;
        const double p = -std::expm1(-h);
        const double freq = static_cast<double>(jumps) / static_cast<double>(n);
        const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
        REQUIRE(std::abs(freq - p) < 3.0 * sigma);
    }
    SECTION("reproducible for a fixed seed and step index") {
        SampleBatch b;
        b.space = sp;
        b.states.assign(512, 0);
        std::vector<std::int32_t> x1(512, 5);
        const auto a = jump_step(b, x1, path, 0.4, 0.2, 13, 9);
        const auto c = jump_step(b, x1, path, 0.4, 0.2, 13, 9);
        REQUIRE(a.states == c.states);
        const auto d = jump_step(b, x1, path, 0.4, 0.2, 13, 10);
        REQUIRE(a.states != d.states);
    }
}

TEST_CASE("sample_unguided on a point-mass target returns that point") {
    const StateSpace sp(2, 4);
    const auto p1 = Pmf::point_mass(sp, std::vector<int>{2, 1});
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    const ExactPosterior posterior(p1, path);
    SamplerConfig cfg;
    cfg.steps = 16;
    cfg.seed = 5;
    cfg.threads = 1;
    const auto run = sample_unguided(posterior, path, cfg, 64);
    for (std::int64_t c = 0; c < 64; ++c) {
        REQUIRE(run.terminal.state(c)[0] == 2);
        REQUIRE(run.terminal.state(c)[1] == 1);
    }
}

TEST_CASE("masked init starts every coordinate at the mask symbol") {
    const StateSpace sp(2, 4, 3);
    std::vector<double> w(sp.checked_state_count(), 0.0);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) w[sp.index_of(std::vector<int>{a, b})] = 1.0;
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::masked);
    const ExactPosterior posterior(p1, path);
    SamplerConfig cfg;
    cfg.steps = 1;  // no jump loop; the final draw happens at t = 0
    cfg.initial = InitKind::masked;
    cfg.final_posterior_draw = false;
    cfg.seed = 11;
    const auto run = sample_unguided(posterior, path, cfg, 32);
    for (std::int64_t c = 0; c < 32; ++c)
        for (int d = 0; d < 2; ++d) REQUIRE(run.terminal.state(c)[static_cast<std::size_t>(d)] == 3);
}

TEST_CASE("sample_unguided recovers a known 33x33 target within TV 0.05") {
    const auto ds = energy2d::generate_dataset("rings", 200000, 7);
    const auto p1 = energy2d::dataset_pmf(ds);
    const auto path =
        ConditionalPath::mixture(p1.space(), scheduler_cosine(), InitKind::uniform);
    const ExactPosterior posterior(p1, path);
    SamplerConfig cfg;
    cfg.steps = 256;
    cfg.seed = 42;
    const auto run = sample_unguided(posterior, path, cfg, 100000);
    const auto emp = empirical_pmf(run.terminal, p1.space());
    REQUIRE(pmf_total_variation(emp, p1) < 0.05);
}

TEST_CASE("sampler output is independent of the thread count") {
    const StateSpace sp(2, 6);
    const auto p1 = random_pmf(sp, 3);
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    const ExactPosterior posterior(p1, path);
    SamplerConfig cfg;
    cfg.steps = 32;
    cfg.seed = 17;
    cfg.threads = 1;
    const auto a = sample_unguided(posterior, path, cfg, 4096);
    cfg.threads = 2;
    const auto b = sample_unguided(posterior, path, cfg, 4096);
    REQUIRE(a.terminal.states == b.terminal.states);
}

TEST_CASE("step refinement does not hurt accuracy (statistically)") {
    const StateSpace sp(2, 12);
    const auto p1 = random_pmf(sp, 9);
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    const ExactPosterior posterior(p1, path);
    double tv64 = 0.0, tv512 = 0.0;
    const std::int64_t chains = 20000;
    std::vector<double> noise;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SamplerConfig cfg;
        cfg.seed = 100 + seed;
        cfg.steps = 64;
        tv64 += pmf_total_variation(
            empirical_pmf(sample_unguided(posterior, path, cfg, chains).terminal, sp), p1);
        cfg.steps = 512;
        tv512 += pmf_total_variation(
            empirical_pmf(sample_unguided(posterior, path, cfg, chains).terminal, sp), p1);
        // Monte-Carlo noise floor: exact draws from p1 at the same budget
        PmfSampler direct(p1);
        SampleBatch exact_draws;
        exact_draws.space = sp;
        for (std::int64_t i = 0; i < chains; ++i) {
            const auto st = direct.draw_state(rng::uniform(7000 + seed, static_cast<std::uint64_t>(i)));
            exact_draws.states.insert(exact_draws.states.end(), st.begin(), st.end());
        }
        noise.push_back(pmf_total_variation(empirical_pmf(exact_draws, sp), p1));
    }
    tv64 /= 5.0;
    tv512 /= 5.0;
    double noise_mean = 0.0;
    for (const double v : noise) noise_mean += v;
    noise_mean /= 5.0;
    REQUIRE(tv512 <= tv64 + noise_mean);
}

TEST_CASE("guided sampler call accounting matches the published formulas") {
    const StateSpace masked_sp(2, 5, 4);
    std::vector<double> w(masked_sp.checked_state_count(), 0.0);
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
            w[masked_sp.index_of(std::vector<int>{a, b})] = rng::uniform(55, static_cast<std::uint64_t>(4 * a + b)) + 0.1;
    const auto p1m = Pmf::normalized(masked_sp, std::move(w));
    const auto masked_path = ConditionalPath::mixture(masked_sp, scheduler_cosine(), InitKind::masked);
    auto post_m = std::make_shared<ExactPosterior>(p1m, masked_path);
    const auto ratio = DensityRatio::constant(2.0);

    const StateSpace uni_sp(2, 5);
    const auto p1u = random_pmf(uni_sp, 56);
    const auto uni_path = ConditionalPath::mixture(uni_sp, scheduler_cosine(), InitKind::uniform);
    auto post_u = std::make_shared<ExactPosterior>(p1u, uni_path);

    const std::int64_t chains = 200;
    SamplerConfig cfg;
    cfg.steps = 8;
    cfg.seed = 2;

    SECTION("posterior-based: one call per step") {
        ExactGuidance h(post_m, ratio, GuidanceKind::posterior_based);
        cfg.initial = InitKind::masked;
        const auto run = sample_guided(*post_m, masked_path, h,
                                       {GuidanceSchemeKind::posterior_based, 1.0}, cfg, chains);
        REQUIRE(run.stats.guidance_calls ==
                static_cast<std::uint64_t>(chains * run.stats.jump_steps));
        REQUIRE(run.stats.guidance_calls_per_step() == 1);
        REQUIRE(run.stats.guidance_final_calls == static_cast<std::uint64_t>(chains));
    }
    SECTION("rate-based, masked init: D + 1 calls per step") {
        ExactGuidance h(post_m, ratio, GuidanceKind::rate_based);
        cfg.initial = InitKind::masked;
        const auto run = sample_guided(*post_m, masked_path, h,
                                       {GuidanceSchemeKind::rate_based, 1.0}, cfg, chains);
        REQUIRE(run.stats.guidance_calls_per_step() == 3);
        REQUIRE(run.stats.guidance_calls ==
                static_cast<std::uint64_t>(3 * chains * run.stats.jump_steps));
    }
    SECTION("rate-based, uniform init: D(|S|-1) + 1 calls per step") {
        ExactGuidance h(post_u, ratio, GuidanceKind::rate_based);
        cfg.initial = InitKind::uniform;
        const auto run = sample_guided(*post_u, uni_path, h, {GuidanceSchemeKind::rate_based, 1.0},
                                       cfg, chains);
        REQUIRE(run.stats.guidance_calls_per_step() == 2 * 4 + 1);
    }
    SECTION("first-order: two calls per step") {
        ExactGuidance h(post_u, ratio, GuidanceKind::rate_based);
        cfg.initial = InitKind::uniform;
        const auto run = sample_guided(*post_u, uni_path, h, {GuidanceSchemeKind::first_order, 1.0},
                                       cfg, chains);
        REQUIRE(run.stats.guidance_calls_per_step() == 2);
    }
}

TEST_CASE("unit guidance reproduces unguided sampling bit for bit") {
    const StateSpace sp(2, 6);
    const auto p1 = random_pmf(sp, 77);
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    auto posterior = std::make_shared<ExactPosterior>(p1, path);
    ExactGuidance h(posterior, DensityRatio::constant(1.0), GuidanceKind::posterior_based);
    SamplerConfig cfg;
    cfg.steps = 48;
    cfg.seed = 23;
    const auto guided = sample_guided(*posterior, path, h,
                                      {GuidanceSchemeKind::posterior_based, 1.0}, cfg, 2048);
    const auto plain = sample_unguided(*posterior, path, cfg, 2048);
    REQUIRE(guided.terminal.states == plain.terminal.states);
}

TEST_CASE("trajectory dumps land on the requested grid times") {
    const StateSpace sp(1, 4);
    const auto p1 = random_pmf(sp, 5);
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    const ExactPosterior posterior(p1, path);
    SamplerConfig cfg;
    cfg.steps = 10;
    cfg.seed = 3;
    cfg.dump_times = {0.5};
    const auto run = sample_unguided(posterior, path, cfg, 16);
    REQUIRE(run.dumps.size() == 1);
    REQUIRE(run.dumps[0].first == Catch::Approx(0.5).margin(0.05 + 1e-12));
}
