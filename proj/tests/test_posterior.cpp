#include <catch2/catch_amalgamated.hpp>

#include "dfm/posterior.hpp"

using namespace dfm;

namespace {

Pmf three_state_p1() {
    return Pmf::from_weights(StateSpace(1, 3), {0.2, 0.3, 0.5});
}

}  // namespace

TEST_CASE("exact posterior on the 3-state example") {
    const auto p1 = three_state_p1();
    const auto path = ConditionalPath::mixture(p1.space(), scheduler_linear(), InitKind::uniform);
    SECTION("kappa = 0.5, observing x = 0") {
        // weights p1(s) * ((1-k)/3 + k*delta_s(0)) = [0.2*(1/6+1/2), 0.3/6, 0.5/6]
        const auto res = exact_posterior(p1, path, 0.5, std::vector<int>{0});
        REQUIRE(res.marginals(0, 0) == Catch::Approx(0.5));
        REQUIRE(res.marginals(0, 1) == Catch::Approx(0.1875));
        REQUIRE(res.marginals(0, 2) == Catch::Approx(0.3125));
    }
    SECTION("t = 1 collapses to the observed state") {
        const auto res = exact_posterior(p1, path, 1.0, std::vector<int>{1});
        REQUIRE(res.marginals(0, 1) == Catch::Approx(1.0));
    }
    SECTION("t = 0 carries no information: posterior equals p1") {
        const auto res = exact_posterior(p1, path, 0.0, std::vector<int>{2});
        REQUIRE(res.marginals(0, 0) == Catch::Approx(0.2));
        REQUIRE(res.marginals(0, 1) == Catch::Approx(0.3));
        REQUIRE(res.marginals(0, 2) == Catch::Approx(0.5));
    }
}

TEST_CASE("exact posterior marginals agree with a brute-force double sum") {
    // independent oracle: loop over the full joint instead of the support list
    const StateSpace sp(2, 3);
    std::vector<double> w(sp.checked_state_count());
    for (std::uint64_t i = 0; i < w.size(); ++i) w[i] = rng::uniform(310, i) + 0.01;
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    for (const double t : {0.2, 0.6, 0.9}) {
        for (std::uint64_t xi = 0; xi < sp.checked_state_count(); ++xi) {
            const auto x = sp.state_of(xi);
            std::vector<double> rows(2 * 3, 0.0);
            double z = 0.0;
            for (std::uint64_t ji = 0; ji < sp.checked_state_count(); ++ji) {
                const auto x1 = sp.state_of(ji);
                double lik = p1[ji];
                for (int d = 0; d < 2; ++d)
                    lik *= path.cond_prob(t, x[static_cast<std::size_t>(d)], x1[static_cast<std::size_t>(d)]);
                z += lik;
                for (int d = 0; d < 2; ++d) rows[static_cast<std::size_t>(d * 3 + x1[static_cast<std::size_t>(d)])] += lik;
            }
            for (auto& v : rows) v /= z;
            const auto got = exact_posterior(p1, path, t, x);
            for (int d = 0; d < 2; ++d)
                for (int s = 0; s < 3; ++s)
                    REQUIRE(got.marginals(d, s) ==
                            Catch::Approx(rows[static_cast<std::size_t>(d * 3 + s)]).epsilon(0).margin(1e-12));
        }
    }
}

TEST_CASE("exact posterior rows always sum to one") {
    const StateSpace sp(3, 4, 3);
    std::vector<double> w(sp.checked_state_count(), 0.0);
    for (std::uint64_t i = 0; i < w.size(); ++i) {
        const auto st = sp.state_of(i);
        bool has_mask = false;
        for (const int s : st) has_mask |= sp.is_mask(s);
        if (!has_mask) w[i] = rng::uniform(311, i) + 0.01;
    }
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::masked);
    const ExactPosterior model(p1, path);
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const double t = 0.05 + 0.9 * rng::uniform(312, trial);
        std::vector<int> x(3);
        for (int d = 0; d < 3; ++d) {
            // masked-path reachable states: coordinates are mask or data
            const auto u = rng::mix(313, trial, static_cast<std::uint64_t>(d));
            x[static_cast<std::size_t>(d)] = (u % 2 == 0) ? 3 : static_cast<int>(u % 3);
        }
        const auto ev = model.evaluate_full(t, x, true);
        for (int d = 0; d < 3; ++d) {
            double sum = 0.0;
            for (int s = 0; s < 4; ++s) sum += ev.rows[static_cast<std::size_t>(d * 4 + s)];
            REQUIRE(sum == Catch::Approx(1.0).epsilon(0).margin(1e-10));
        }
    }
}

TEST_CASE("masked path posterior is time-independent") {
    const StateSpace sp(2, 4, 3);
    std::vector<double> w(sp.checked_state_count(), 0.0);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
            w[sp.index_of(std::vector<int>{a, b})] = rng::uniform(99, static_cast<std::uint64_t>(a * 3 + b)) + 0.05;
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::masked);
    const ExactPosterior model(p1, path);
    const std::vector<std::vector<int>> probes = {{3, 3}, {0, 3}, {3, 2}, {1, 1}};
    for (const auto& x : probes) {
        const auto a = model.evaluate(0.25, x);
        const auto b = model.evaluate(0.75, x);
        for (int d = 0; d < 2; ++d)
            for (int s = 0; s < 4; ++s)
                REQUIRE(a(d, s) == Catch::Approx(b(d, s)).epsilon(0).margin(1e-9));
    }
}

TEST_CASE("Bayes consistency: the posterior normalizer is the analytic marginal") {
    const StateSpace sp(2, 4);
    std::vector<double> w(sp.checked_state_count());
    for (std::uint64_t i = 0; i < w.size(); ++i) w[i] = rng::uniform(314, i) + 0.02;
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    const ExactPosterior model(p1, path);
    for (const double t : {0.15, 0.5, 0.85}) {
        double total = 0.0;
        for (std::uint64_t xi = 0; xi < sp.checked_state_count(); ++xi) {
            const auto x = sp.state_of(xi);
            // analytic mixture marginal p_t(x) = sum_{x1} p1(x1) prod_d q_t(x^d|x1^d)
            double want = 0.0;
            for (std::uint64_t ji = 0; ji < sp.checked_state_count(); ++ji) {
                const auto x1 = sp.state_of(ji);
                double lik = p1[ji];
                for (int d = 0; d < 2; ++d)
                    lik *= path.cond_prob(t, x[static_cast<std::size_t>(d)], x1[static_cast<std::size_t>(d)]);
                want += lik;
            }
            const auto ev = model.evaluate_full(t, x, false);
            REQUIRE(ev.normalizer == Catch::Approx(want).epsilon(0).margin(1e-12));
            total += ev.normalizer;
        }
        REQUIRE(total == Catch::Approx(1.0).epsilon(0).margin(1e-8));
    }
}

TEST_CASE("unreachable states raise without backoff and stay valid with it") {
    const StateSpace sp(2, 3, 2);
    std::vector<double> w(sp.checked_state_count(), 0.0);
    w[sp.index_of(std::vector<int>{0, 1})] = 0.6;
    w[sp.index_of(std::vector<int>{1, 0})] = 0.4;
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::masked);
    const ExactPosterior model(p1, path);
    // (0,0) has zero joint mass: no support state matches both unmasked coords
    REQUIRE_THROWS_AS(model.evaluate_full(0.5, std::vector<int>{0, 0}, false), numeric_error);
    const auto ev = model.evaluate_full(0.5, std::vector<int>{0, 0}, true);
    REQUIRE(ev.backoff_used);
    REQUIRE(ev.rows[0] == Catch::Approx(1.0));      // coord 0 pinned at its own observation
    REQUIRE(ev.rows[3 + 0] == Catch::Approx(1.0));  // coord 1 likewise
}

TEST_CASE("cross entropy loss reference values") {
    const auto p1 = three_state_p1();
    const auto path = ConditionalPath::mixture(p1.space(), scheduler_cosine(), InitKind::uniform);
    const ExactPosterior exact(p1, path);
    PmfSampler data(p1);
    const auto batch = draw_path_batch(data, path, 256, 5, 0);

    SECTION("uniform model pays D log |S| per sample") {
        const StateSpace sp34(1, 34);
        auto net = std::make_shared<nn::TabularNet>(sp34, 1, 34);
        const NetPosterior uniform_model(sp34, net);
        std::vector<PathSample> b34;
        for (int i = 0; i < 8; ++i) b34.push_back({0.3, {i % 34}, {(i * 7) % 34}});
        const auto res = cross_entropy_loss(uniform_model, b34);
        REQUIRE(res.loss == Catch::Approx(std::log(34.0)));
    }
    SECTION("exact posterior attains the conditional entropy and beats a blurred model") {
        const auto exact_loss = cross_entropy_loss(exact, batch).loss;
        // conditional entropy measured from the exact model itself
        double cond_entropy = 0.0;
        for (const auto& s : batch) {
            const auto rows = exact.evaluate(s.t, s.xt);
            for (int a = 0; a < 3; ++a)
                if (rows(0, a) > 0.0) cond_entropy -= rows(0, a) * std::log(rows(0, a));
        }
        cond_entropy /= static_cast<double>(batch.size());
        // cross entropy of the true posterior against its own draws: equal in
        // expectation; allow Monte-Carlo slack
        REQUIRE(exact_loss == Catch::Approx(cond_entropy).margin(0.15));
        const auto uniform_loss = std::log(3.0);
        REQUIRE(exact_loss < uniform_loss);
    }
    SECTION("probability-one model has zero loss") {
        // tabular logits pushed toward a point mass at the observed symbol
        const StateSpace sp(1, 3);
        auto net = std::make_shared<nn::TabularNet>(sp, 1, 3);
        auto& p = net->params();
        // all states predict symbol matching their own index
        for (int s = 0; s < 3; ++s) p[static_cast<std::size_t>(s * 3 + s)] = 200.0;
        const NetPosterior model(sp, net);
        std::vector<PathSample> b;
        for (int s = 0; s < 3; ++s) b.push_back({0.5, {s}, {s}});
        REQUIRE(cross_entropy_loss(model, b).loss == Catch::Approx(0.0).margin(1e-12));
    }
}

TEST_CASE("fit_posterior tabular converges to the exact posterior") {
    const auto p1 = three_state_p1();
    const auto path = ConditionalPath::mixture(p1.space(), scheduler_cosine(), InitKind::uniform);
    const ExactPosterior oracle(p1, path);
    PosteriorBackendConfig backend;
    backend.backend = "tabular";
    backend.buckets = 32;
    nn::OptimizerConfig opt;
    opt.algorithm = nn::OptimizerAlgorithm::sgd;
    opt.learning_rate = 128.0;  // per-sample unit rate at batch 128
    opt.lr_decay_steps = 1500;
    opt.batch_size = 128;
    opt.steps = 50000;
    opt.seed = 21;
    opt.tail_average_frac = 0.4;
    const auto [model, report] = fit_posterior(p1, path, backend, opt, &oracle);

    double max_abs = 0.0;
    for (int b = 0; b < backend.buckets; ++b) {
        const double t = (b + 0.5) / backend.buckets;
        for (int x = 0; x < 3; ++x) {
            const auto got = model->evaluate(t, std::vector<int>{x});
            const auto want = oracle.evaluate(t, std::vector<int>{x});
            for (int s = 0; s < 3; ++s) max_abs = std::max(max_abs, std::abs(got(0, s) - want(0, s)));
        }
    }
    REQUIRE(max_abs < 1e-2);
    REQUIRE(report.heldout_gap < 0.05);
}

TEST_CASE("fit_posterior on a point-mass target collapses to a delta") {
    const StateSpace sp(1, 3);
    const auto p1 = Pmf::point_mass(sp, std::vector<int>{1});
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
    PosteriorBackendConfig backend;
    backend.backend = "tabular";
    backend.buckets = 8;
    nn::OptimizerConfig opt;
    opt.algorithm = nn::OptimizerAlgorithm::sgd;
    opt.learning_rate = 64.0;
    opt.lr_decay_steps = 1000;
    opt.batch_size = 64;
    opt.steps = 8000;
    opt.seed = 3;
    const auto [model, report] = fit_posterior(p1, path, backend, opt);
    for (const double t : {0.1, 0.5, 0.9})
        for (int x = 0; x < 3; ++x)
            REQUIRE(model->evaluate(t, std::vector<int>{x})(0, 1) > 0.98);
}

TEST_CASE("fit_posterior on the masked path is nearly time-independent") {
    const StateSpace sp(2, 4, 3);
    std::vector<double> w(sp.checked_state_count(), 0.0);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
            w[sp.index_of(std::vector<int>{a, b})] = rng::uniform(999, static_cast<std::uint64_t>(3 * a + b)) + 0.1;
    const auto p1 = Pmf::normalized(sp, std::move(w));
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::masked);
    PosteriorBackendConfig backend;
    backend.backend = "tabular";
    backend.buckets = 4;  // coarse buckets; the target is constant in t
    nn::OptimizerConfig opt;
    opt.algorithm = nn::OptimizerAlgorithm::sgd;
    opt.learning_rate = 128.0;
    opt.lr_decay_steps = 2000;
    opt.batch_size = 128;
    opt.steps = 60000;
    opt.seed = 8;
    opt.tail_average_frac = 0.4;
    const auto [model, report] = fit_posterior(p1, path, backend, opt);
    const std::vector<std::vector<int>> probes = {{3, 3}, {0, 3}, {3, 1}};
    double max_diff = 0.0;
    for (const auto& x : probes) {
        const auto a = model->evaluate(0.3, x);
        const auto b = model->evaluate(0.7, x);
        for (int d = 0; d < 2; ++d)
            for (int s = 0; s < 4; ++s) max_diff = std::max(max_diff, std::abs(a(d, s) - b(d, s)));
    }
    REQUIRE(max_diff < 2e-2);
}
