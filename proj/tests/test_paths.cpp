#include <catch2/catch_amalgamated.hpp>

#include "dfm/paths.hpp"

using namespace dfm;

namespace {

// finite-difference oracle for scheduler derivatives
double fd_kappa_dot(const Scheduler& s, double t, double h = 1e-6) {
    return (s.kappa(t + h) - s.kappa(t - h)) / (2.0 * h);
}

}  // namespace

TEST_CASE("cosine scheduler endpoints and midpoint") {
    const auto s = scheduler_cosine();
    REQUIRE(s.kappa(0.0) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(s.kappa(1.0) == Catch::Approx(1.0));
    REQUIRE(s.kappa(0.5) == Catch::Approx(0.5));
}

TEST_CASE("scheduler validation rejects broken schedules") {
    Scheduler bad{"bad", [](double t) { return 1.0 - t; }, [](double) { return -1.0; }};
    REQUIRE_THROWS_AS(bad.validate(), precondition_error);
    Scheduler shifted{"shifted", [](double t) { return 0.1 + 0.9 * t; }, [](double) { return 0.9; }};
    REQUIRE_THROWS_AS(shifted.validate(), precondition_error);
}

TEST_CASE("mixture cond_prob interpolates q0 to a point mass") {
    const StateSpace sp(1, 4);
    const auto path = ConditionalPath::mixture(sp, scheduler_linear(), InitKind::uniform);
    SECTION("t = 0 gives the init pmf") {
        const auto row = path.cond_prob_row(0.0, 2);
        for (const double v : row) REQUIRE(v == Catch::Approx(0.25));
    }
    SECTION("t = 1 gives the point mass") {
        const auto row = path.cond_prob_row(1.0, 2);
        REQUIRE(row[2] == Catch::Approx(1.0));
        REQUIRE(row[0] == Catch::Approx(0.0).margin(1e-15));
    }
    SECTION("midpoint matches the closed form") {
        const auto row = path.cond_prob_row(0.5, 2);
        REQUIRE(row[0] == Catch::Approx(0.125));
        REQUIRE(row[1] == Catch::Approx(0.125));
        REQUIRE(row[2] == Catch::Approx(0.625));
        REQUIRE(row[3] == Catch::Approx(0.125));
    }
    SECTION("invalid time raises") {
        REQUIRE_THROWS_AS(path.cond_prob_row(1.5, 0), precondition_error);
    }
}

TEST_CASE("mixture cond_rate matches the closed form") {
    const StateSpace sp(1, 8);
    const auto path = ConditionalPath::mixture(sp, scheduler_linear(), InitKind::uniform);
    SECTION("no rate once the target symbol is reached") {
        for (int z = 0; z < 8; ++z)
            REQUIRE(path.cond_rate(0.3, z, 5, 5) == 0.0);
    }
    SECTION("kappa_dot/(1-kappa) toward the clean symbol") {
        REQUIRE(path.cond_rate(0.5, 3, 5, 3) == Catch::Approx(2.0));
        REQUIRE(path.cond_rate(0.5, 6, 5, 3) == 0.0);
        REQUIRE(path.cond_rate(0.5, 5, 5, 3) == Catch::Approx(-2.0));
    }
    SECTION("terminal-time pole raises") {
        REQUIRE_THROWS_AS(path.cond_rate(1.0, 0, 1, 0), precondition_error);
        const auto cos_path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::uniform);
        REQUIRE_THROWS_AS(cos_path.mixture_coeff(1.0), numeric_error);
    }
}

TEST_CASE("cosine rate coefficient agrees with a finite-difference oracle") {
    const auto s = scheduler_cosine();
    const StateSpace sp(1, 4);
    const auto path = ConditionalPath::mixture(sp, s, InitKind::uniform);
    for (const double t : {0.1, 0.25, 0.5, 0.75, 0.9}) {
        const double want = fd_kappa_dot(s, t) / (1.0 - s.kappa(t));
        REQUIRE(path.mixture_coeff(t) == Catch::Approx(want).epsilon(0).margin(1e-6));
    }
}

TEST_CASE("cond_prob rows are pmfs and rates have zero row sums") {
    const StateSpace sp(1, 6, 5);
    const auto sched = scheduler_cosine();
    for (const auto kind : {std::string("mixture-uniform"), std::string("mixture-masked"),
                            std::string("metric")}) {
        const auto path = path_by_name(kind, sp, sched);
        for (std::uint64_t trial = 0; trial < 60; ++trial) {
            const double t = rng::uniform(41, trial, 1) * 0.998;
            const int x1d = static_cast<int>(rng::mix(41, trial, 2) % 5);  // data symbol
            const auto row = path.cond_prob_row(t, x1d);
            double sum = 0.0;
            for (const double v : row) {
                REQUIRE(v >= 0.0);
                sum += v;
            }
            REQUIRE(sum == Catch::Approx(1.0).epsilon(0).margin(1e-10));
            const int xd = static_cast<int>(rng::mix(41, trial, 3) % 6);
            const auto rates = path.cond_rate_row(t, xd, x1d);
            double rsum = 0.0;
            for (int z = 0; z < 6; ++z) {
                if (z != xd) REQUIRE(rates[static_cast<std::size_t>(z)] >= 0.0);
                rsum += rates[static_cast<std::size_t>(z)];
            }
            REQUIRE(rsum == Catch::Approx(0.0).epsilon(0).margin(1e-10));
        }
    }
}

TEST_CASE("conditional rate generates the conditional path (Kolmogorov check)") {
    // d/dt q_t(a|x1) must equal sum_z u_t(a,z|x1) q_t(z|x1); finite differences in t
    const StateSpace sp(1, 5, 4);
    const auto sched = scheduler_cosine();
    const double h = 1e-6;
    for (const auto kind :
         {std::string("mixture-uniform"), std::string("mixture-masked"), std::string("metric")}) {
        const auto path = path_by_name(kind, sp, sched);
        for (const double t : {0.15, 0.4, 0.65, 0.85}) {
            for (int x1d = 0; x1d < 4; ++x1d) {
                const auto up = path.cond_prob_row(t + h, x1d);
                const auto dn = path.cond_prob_row(t - h, x1d);
                const auto now = path.cond_prob_row(t, x1d);
                for (int a = 0; a < 5; ++a) {
                    const double lhs = (up[static_cast<std::size_t>(a)] - dn[static_cast<std::size_t>(a)]) / (2.0 * h);
                    double rhs = 0.0;
                    for (int z = 0; z < 5; ++z)
                        rhs += path.cond_rate(t, a, z, x1d) * now[static_cast<std::size_t>(z)];
                    REQUIRE(lhs == Catch::Approx(rhs).epsilon(0).margin(1e-5));
                }
            }
        }
    }
}

TEST_CASE("masked path reaches data symbols only through the delta term") {
    const StateSpace sp(1, 5, 4);
    const auto path = ConditionalPath::mixture(sp, scheduler_cosine(), InitKind::masked);
    for (const double t : {0.2, 0.5, 0.8}) {
        const double k = scheduler_cosine().kappa(t);
        for (int x1d = 0; x1d < 4; ++x1d) {
            const auto row = path.cond_prob_row(t, x1d);
            for (int a = 0; a < 4; ++a) {
                const double expect = a == x1d ? k : 0.0;
                REQUIRE(row[static_cast<std::size_t>(a)] == Catch::Approx(expect).margin(1e-14));
            }
            REQUIRE(row[4] == Catch::Approx(1.0 - k));
        }
    }
}

TEST_CASE("marginal rate row is the posterior mixture of conditional rates") {
    const StateSpace sp(1, 5);
    const auto sched = scheduler_cosine();
    for (const auto kind : {std::string("mixture-uniform"), std::string("metric")}) {
        const auto path = path_by_name(kind, sp, sched);
        std::vector<double> post(5);
        double sum = 0.0;
        for (int s = 0; s < 5; ++s) {
            post[static_cast<std::size_t>(s)] = rng::uniform(77, static_cast<std::uint64_t>(s)) + 0.05;
            sum += post[static_cast<std::size_t>(s)];
        }
        for (double& v : post) v /= sum;
        const double t = 0.37;
        const int xd = 2;
        const auto got = path.marginal_rate_row(t, xd, post);
        for (int z = 0; z < 5; ++z) {
            double want = 0.0;
            for (int b = 0; b < 5; ++b)
                want += post[static_cast<std::size_t>(b)] * path.cond_rate(t, z, xd, b);
            REQUIRE(got[static_cast<std::size_t>(z)] == Catch::Approx(want).epsilon(0).margin(1e-12));
        }
    }
}

TEST_CASE("path_by_name rejects unknown names") {
    const StateSpace sp(1, 4);
    REQUIRE_THROWS_AS(path_by_name("diffusion", sp, scheduler_linear()), config_error);
    REQUIRE_THROWS_AS(scheduler_by_name("sqrt"), config_error);
    REQUIRE_THROWS_AS(ConditionalPath::mixture(sp, scheduler_linear(), InitKind::masked),
                      config_error);
}
