#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grouprl/grpo.hpp"

using namespace grouprl;

namespace {

const PolicyDims kDims{9, 6, 3};

PolicyParams random_params(uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    return PolicyParams::gaussian(kDims, scale, rng);
}

// Random group of verified-looking trajectories sampled from old_params.
RolloutGroup random_group(const PolicyParams& old_params, Rng& rng, int g, bool flat = false) {
    RolloutGroup group;
    const int qlen = 1 + rng.below(3);
    for (int i = 0; i < qlen; ++i) {
        group.query.push_back(rng.below(kDims.vocab_size));
    }
    for (int i = 0; i < g; ++i) {
        Trajectory t = sample_trajectory(old_params, group.query, 5, kEos, rng);
        t.reward = flat ? 1.0 : (i == 0 ? 1.0 : (i == 1 ? 0.0 : (rng.uniform() < 0.5 ? 1.0 : 0.0)));
        group.members.push_back(std::move(t));
        group.contexts.push_back(group.query);
    }
    return group;
}

double norm_of(std::span<const double> v) {
    double acc = 0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

}  // namespace

TEST_CASE("group advantages") {
    SUBCASE("hand-derived (1,0,0,0) case") {
        const std::vector<double> rewards = {1, 0, 0, 0};
        const GroupAdvantages adv = group_advantages(rewards, 1e-6);
        // independent statistics route
        double mean = 0;
        for (double r : rewards) mean += r;
        mean /= 4.0;
        double var = 0;
        for (double r : rewards) var += (r - mean) * (r - mean);
        const double stddev = std::sqrt(var / 4.0);
        CHECK(adv.mean == doctest::Approx(0.25).epsilon(1e-15));
        CHECK(adv.stddev == doctest::Approx(stddev).epsilon(1e-15));
        CHECK(adv.stddev == doctest::Approx(0.433013).epsilon(1e-5));
        CHECK(adv.values[0] == doctest::Approx(1.73205).epsilon(1e-4));
        for (int i = 1; i < 4; ++i) {
            CHECK(adv.values[i] == doctest::Approx(-0.57735).epsilon(1e-4));
        }
    }
    SUBCASE("flat groups have exactly zero advantages") {
        for (double r : {0.0, 1.0}) {
            for (int g = 2; g <= 8; ++g) {
                const GroupAdvantages adv = group_advantages(std::vector<double>(g, r), 1e-6);
                for (double v : adv.values) {
                    CHECK(v == 0.0);
                }
            }
        }
    }
    SUBCASE("zero-sum within 1e-12 over all binary patterns, G = 2..8") {
        for (int g = 2; g <= 8; ++g) {
            for (unsigned mask = 0; mask < (1u << g); ++mask) {
                std::vector<double> rewards(g);
                for (int i = 0; i < g; ++i) {
                    rewards[i] = (mask >> i) & 1u ? 1.0 : 0.0;
                }
                const GroupAdvantages adv = group_advantages(rewards, 1e-6);
                double sum = 0;
                for (double v : adv.values) {
                    sum += v;
                }
                CHECK(std::abs(sum) < 1e-12);
            }
        }
    }
    SUBCASE("G < 2 is rejected") {
        CHECK_THROWS_AS(group_advantages(std::vector<double>{1.0}, 1e-6), std::invalid_argument);
        CHECK_THROWS_AS(group_advantages(std::vector<double>{}, 1e-6), std::invalid_argument);
    }
}

TEST_CASE("importance ratio") {
    SUBCASE("identical log probs give 1") {
        CHECK(importance_ratio(-2.5, -2.5) == 1.0);
    }
    SUBCASE("ln 2 difference gives 2") {
        CHECK(importance_ratio(-1.0 + std::log(2.0), -1.0) == doctest::Approx(2.0).epsilon(1e-12));
    }
    SUBCASE("huge exponent is clamped and counted") {
        RatioDiagnostics diag;
        const double r = importance_ratio(0.0, -800.0, &diag);
        CHECK(std::isfinite(r));
        CHECK(r == doctest::Approx(std::exp(kRatioExpClamp)));
        CHECK(diag.clamp_events == 1);
    }
    SUBCASE("non-finite inputs are rejected") {
        CHECK_THROWS_AS(importance_ratio(std::numeric_limits<double>::infinity(), 0.0),
                        std::invalid_argument);
    }
}

TEST_CASE("clipped term") {
    SUBCASE("ratio 1 passes through") {
        for (double a : {-2.0, 0.0, 0.7}) {
            CHECK(clipped_term(1.0, a, 0.2) == a);
        }
    }
    SUBCASE("positive advantage caps the upside") {
        CHECK(clipped_term(1.5, 1.0, 0.2) == doctest::Approx(1.2).epsilon(1e-15));
    }
    SUBCASE("negative advantage keeps the pessimistic branch") {
        CHECK(clipped_term(0.5, -1.0, 0.2) == doctest::Approx(-0.8).epsilon(1e-15));
    }
    SUBCASE("inside the band the term equals ratio * advantage exactly") {
        Rng rng(8);
        for (int i = 0; i < 2000; ++i) {
            const double ratio = 0.8 + 0.4 * rng.uniform();
            const double adv = rng.normal(0, 2);
            CHECK(clipped_term(ratio, adv, 0.2) == ratio * adv);
        }
    }
    SUBCASE("clip_eps must be positive") {
        CHECK_THROWS_AS(clipped_term(1.0, 1.0, 0.0), std::invalid_argument);
    }
}

TEST_CASE("kl penalty term") {
    SUBCASE("identical policies give 0") {
        CHECK(kl_penalty_term(-1.5, -1.5) == 0.0);
    }
    SUBCASE("u = 2 evaluates to 2 - ln 2 - 1") {
        const double got = kl_penalty_term(-2.0, -2.0 + std::log(2.0));
        CHECK(got == doctest::Approx(2.0 - std::log(2.0) - 1.0).epsilon(1e-12));
        CHECK(got == doctest::Approx(0.30685).epsilon(1e-4));
    }
    SUBCASE("nonnegative for 1e5 random finite pairs") {
        Rng rng(99);
        for (int i = 0; i < 100000; ++i) {
            const double a = -10.0 * rng.uniform();
            const double b = -10.0 * rng.uniform();
            CHECK(kl_penalty_term(a, b) >= 0.0);
        }
    }
}

TEST_CASE("grpo objective errors") {
    const PolicyParams p = random_params(21);
    Rng rng(1);
    SUBCASE("empty trajectory is rejected") {
        RolloutGroup group = random_group(p, rng, 4);
        group.members[2].tokens.clear();
        group.members[2].behavior_logps.clear();
        CHECK_THROWS_AS(grpo_objective(group, p, nullptr, ObjectiveConfig{}), std::invalid_argument);
    }
    SUBCASE("unset reward is rejected") {
        RolloutGroup group = random_group(p, rng, 4);
        group.members[1].reward.reset();
        CHECK_THROWS_AS(grpo_objective(group, p, nullptr, ObjectiveConfig{}), std::invalid_argument);
    }
    SUBCASE("beta != 0 without reference params is rejected") {
        RolloutGroup group = random_group(p, rng, 4);
        ObjectiveConfig cfg;
        cfg.beta = 0.1;
        CHECK_THROWS_AS(grpo_objective(group, p, nullptr, cfg), std::invalid_argument);
    }
}

TEST_CASE("flat-reward groups give zero objective and zero gradient at beta 0") {
    const PolicyParams p = random_params(33);
    Rng rng(2);
    const RolloutGroup group = random_group(p, rng, 6, /*flat=*/true);
    const ObjectiveResult res = grpo_objective(group, p, nullptr, ObjectiveConfig{});
    CHECK(res.value == 0.0);
    CHECK(norm_of(res.gradient) == 0.0);
}

TEST_CASE("on-policy gradient equals the REINFORCE estimator within 1e-10") {
    // At params == old_params with beta = 0, every ratio is exactly 1 and the
    // objective gradient reduces to (1/G) sum_i (A_i/|o_i|) grad log pi(o_i).
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const PolicyParams p = random_params(rng.next_u64(), 0.5);
        const RolloutGroup group = random_group(p, rng, 4 + rng.below(5));
        const ObjectiveResult res = grpo_objective(group, p, nullptr, ObjectiveConfig{});

        // independent REINFORCE assembly
        std::vector<double> rewards;
        for (const auto& m : group.members) {
            rewards.push_back(*m.reward);
        }
        double mean = 0;
        for (double r : rewards) mean += r;
        mean /= static_cast<double>(rewards.size());
        double var = 0;
        for (double r : rewards) var += (r - mean) * (r - mean);
        const double stddev = std::sqrt(var / static_cast<double>(rewards.size()));

        std::vector<double> expected(p.flat.size(), 0.0);
        for (size_t i = 0; i < group.members.size(); ++i) {
            const double adv = (rewards[i] - mean) / (stddev + 1e-6);
            const std::vector<double> g =
                grad_sequence_log_prob(p, group.query, group.members[i].tokens);
            const double scale = adv / (static_cast<double>(group.members.size()) *
                                        static_cast<double>(group.members[i].tokens.size()));
            for (size_t k = 0; k < expected.size(); ++k) {
                expected[k] += scale * g[k];
            }
        }
        double num = 0, den = 0;
        for (size_t k = 0; k < expected.size(); ++k) {
            num += (expected[k] - res.gradient[k]) * (expected[k] - res.gradient[k]);
            den += expected[k] * expected[k];
        }
        if (den > 0) {
            CHECK(std::sqrt(num / den) < 1e-10);
        } else {
            CHECK(norm_of(res.gradient) < 1e-12);
        }
        // every ratio is 1: nothing clipped or clamped
        CHECK(res.diag.clipped_tokens == 0);
        CHECK(res.diag.clamp_events == 0);
    }
}

TEST_CASE("beta 0 path matches a KL-free computation within 1e-12") {
    Rng rng(15);
    for (int rep = 0; rep < 20; ++rep) {
        const PolicyParams old_params = random_params(rng.next_u64(), 0.4);
        PolicyParams p = old_params;
        for (double& x : p.flat) {
            x += rng.normal(0.0, 0.01);
        }
        const RolloutGroup group = random_group(old_params, rng, 4);

        ObjectiveConfig with_beta_zero;
        with_beta_zero.beta = 0.0;
        const PolicyParams ref = random_params(rng.next_u64());
        const ObjectiveResult a = grpo_objective(group, p, &ref, with_beta_zero);

        // KL-free independent computation of the clipped surrogate value
        double expected = 0.0;
        for (size_t i = 0; i < group.members.size(); ++i) {
            std::vector<double> rewards;
            for (const auto& m : group.members) rewards.push_back(*m.reward);
            const GroupAdvantages adv = group_advantages(rewards, with_beta_zero.adv_eps);
            const Trajectory& traj = group.members[i];
            TokenSeq ctx = group.query;
            double traj_sum = 0.0;
            for (size_t t = 0; t < traj.tokens.size(); ++t) {
                const double lp = token_log_prob(p, ctx, traj.tokens[t]);
                const double ratio = std::exp(lp - traj.behavior_logps[t]);
                traj_sum += clipped_term(ratio, adv.values[i], with_beta_zero.clip_eps);
                ctx.push_back(traj.tokens[t]);
            }
            expected += traj_sum / (static_cast<double>(traj.tokens.size()) *
                                    static_cast<double>(group.members.size()));
        }
        CHECK(a.value == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("objective gradient matches finite differences away from the on-policy point") {
    Rng rng(23);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
        const PolicyParams old_params = random_params(rng.next_u64(), 0.3);
        PolicyParams p = old_params;
        for (double& x : p.flat) {
            x += rng.normal(0.0, 0.003);
        }
        const RolloutGroup group = random_group(old_params, rng, 4);
        ObjectiveConfig cfg;
        const PolicyParams ref = random_params(rng.next_u64(), 0.3);
        const PolicyParams* ref_ptr = rep % 2 == 1 ? &ref : nullptr;
        cfg.beta = rep % 2 == 1 ? 0.1 : 0.0;

        const ObjectiveResult res = grpo_objective(group, p, ref_ptr, cfg);
        const std::vector<double> fd = finite_difference_gradient(
            p, [&](const PolicyParams& q) { return grpo_objective(group, q, ref_ptr, cfg).value; },
            1e-4);
        double num = 0, da = 0, df = 0;
        for (size_t k = 0; k < fd.size(); ++k) {
            num += (res.gradient[k] - fd[k]) * (res.gradient[k] - fd[k]);
            da += res.gradient[k] * res.gradient[k];
            df += fd[k] * fd[k];
        }
        const double denom = std::max(std::sqrt(da), std::sqrt(df));
        const double rel = denom < 1e-12 ? 0.0 : std::sqrt(num) / denom;
        worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("length normalization toggle changes the inner weighting") {
    Rng rng(51);
    const PolicyParams p = random_params(rng.next_u64(), 0.4);
    RolloutGroup group = random_group(p, rng, 4);
    // force distinct trajectory lengths so the toggle matters
    bool lengths_differ = false;
    for (size_t i = 1; i < group.members.size(); ++i) {
        lengths_differ |= group.members[i].tokens.size() != group.members[0].tokens.size();
    }
    if (!lengths_differ) {
        return;
    }
    ObjectiveConfig norm_on;
    ObjectiveConfig norm_off;
    norm_off.length_normalize = false;
    const double a = grpo_objective(group, p, nullptr, norm_on).value;
    const double b = grpo_objective(group, p, nullptr, norm_off).value;
    CHECK(a != b);
}
