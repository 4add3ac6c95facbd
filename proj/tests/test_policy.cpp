#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "grouprl/policy.hpp"

using namespace grouprl;

namespace {

const PolicyDims kSmall{9, 6, 3};  // 9*6 + 3*36 + 6*9 + 6 + 9 = 231 params

PolicyParams random_params(const PolicyDims& dims, uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    return PolicyParams::gaussian(dims, scale, rng);
}

TokenSeq random_seq(const PolicyDims& dims, Rng& rng, int max_len) {
    TokenSeq out;
    const int len = 1 + rng.below(max_len);
    for (int i = 0; i < len; ++i) {
        out.push_back(rng.below(dims.vocab_size));
    }
    return out;
}

// Independent re-computation of the hidden layer for the perturbation oracle:
// average of per-slot mixed embeddings, tanh'd.
std::vector<double> reference_hidden(const PolicyParams& p, const TokenSeq& ctx) {
    const int H = p.dims.hidden_dim;
    const int W = p.dims.window;
    std::vector<double> pre(H);
    for (int i = 0; i < H; ++i) {
        pre[i] = p.flat[p.hidden_bias_offset() + i];
    }
    for (int j = 0; j < W; ++j) {
        const int len = static_cast<int>(ctx.size());
        const TokenId tok = j < len ? ctx[len - 1 - j] : kBos;
        auto m = p.mix(j);
        auto e = p.embedding(tok);
        for (int r = 0; r < H; ++r) {
            double acc = 0;
            for (int c = 0; c < H; ++c) {
                acc += m[r * H + c] * e[c];
            }
            pre[r] += acc / W;
        }
    }
    for (double& x : pre) {
        x = std::tanh(x);
    }
    return pre;
}

}  // namespace

TEST_CASE("layout round-trips and offsets partition the flat vector") {
    const PolicyParams p = PolicyParams::zeros(kSmall);
    CHECK(p.flat.size() == PolicyParams::param_count(kSmall));
    CHECK(p.mix_offset() == 9u * 6u);
    CHECK(p.out_proj_offset() == p.mix_offset() + 3u * 36u);
    CHECK(p.hidden_bias_offset() == p.out_proj_offset() + 6u * 9u);
    CHECK(p.out_bias_offset() == p.hidden_bias_offset() + 6u);
    CHECK(p.out_bias_offset() + 9u == p.flat.size());

    // named -> flat -> named is the identity
    PolicyParams q = p;
    Rng rng(5);
    for (TokenId t = 0; t < kSmall.vocab_size; ++t) {
        for (double& x : q.embedding(t)) {
            x = rng.normal();
        }
    }
    for (int j = 0; j < kSmall.window; ++j) {
        for (double& x : q.mix(j)) {
            x = rng.normal();
        }
    }
    for (TokenId t = 0; t < kSmall.vocab_size; ++t) {
        auto named = q.embedding(t);
        for (int i = 0; i < kSmall.hidden_dim; ++i) {
            CHECK(named[i] == q.flat[static_cast<size_t>(t) * 6 + i]);
        }
    }
}

TEST_CASE("zero params give uniform logits and log prob") {
    const PolicyParams p = PolicyParams::zeros(kSmall);
    const auto l = logits(p, {});
    for (double x : l) {
        CHECK(x == 0.0);
    }
    CHECK(token_log_prob(p, {3, 5}, 0) == doctest::Approx(std::log(1.0 / 9.0)).epsilon(1e-12));
    CHECK(token_log_prob(p, {}, 8) == doctest::Approx(-2.1972245773362196).epsilon(1e-12));
}

TEST_CASE("logits depend only on the last w context tokens") {
    const PolicyParams p = random_params(kSmall, 42);
    const TokenSeq long_ctx = {1, 2, 3, 4, 5, 6, 7};
    const TokenSeq short_ctx = {8, 8, 8, 8, 5, 6, 7};  // same last 3
    CHECK(logits(p, long_ctx) == logits(p, short_ctx));
    CHECK(logits(p, {5, 6, 7}) == logits(p, long_ctx));
}

TEST_CASE("context token out of range throws") {
    const PolicyParams p = PolicyParams::zeros(kSmall);
    CHECK_THROWS_AS(logits(p, {9}), std::out_of_range);
    CHECK_THROWS_AS(token_log_prob(p, {}, 9), std::out_of_range);
}

TEST_CASE("perturbing one output-projection weight moves one logit by the hidden activation") {
    PolicyParams p = random_params(kSmall, 7);
    const TokenSeq ctx = {2, 4};
    const std::vector<double> before = logits(p, ctx);
    const std::vector<double> h = reference_hidden(p, ctx);

    const int i = 3;  // hidden unit
    const int v = 5;  // logit
    p.flat[p.out_proj_offset() + static_cast<size_t>(i) * 9 + v] += 1.0;
    const std::vector<double> after = logits(p, ctx);
    for (int u = 0; u < 9; ++u) {
        if (u == v) {
            CHECK(after[u] - before[u] == doctest::Approx(h[i]).epsilon(1e-12));
        } else {
            CHECK(after[u] == before[u]);
        }
    }
}

TEST_CASE("softmax normalization within 1e-12") {
    const PolicyParams p = random_params(kSmall, 11, 1.0);
    for (const TokenSeq& ctx : {TokenSeq{}, TokenSeq{1}, TokenSeq{8, 0, 3, 3}}) {
        double sum = 0.0;
        for (TokenId t = 0; t < 9; ++t) {
            sum += std::exp(token_log_prob(p, ctx, t));
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("extreme logits stay finite through log-softmax") {
    PolicyParams p = PolicyParams::zeros(kSmall);
    p.flat[p.out_bias_offset() + 0] = 1000.0;  // logits (1000, 0, ..., 0)
    const double lp0 = token_log_prob(p, {}, 0);
    CHECK(std::isfinite(lp0));
    CHECK(lp0 == doctest::Approx(0.0).epsilon(1e-15));  // -(V-1)e^-1000 underflows to 0
    const double lp1 = token_log_prob(p, {}, 1);
    CHECK(std::isfinite(lp1));
    CHECK(lp1 == doctest::Approx(-1000.0).epsilon(1e-12));
}

TEST_CASE("sequence log prob") {
    const PolicyParams p = random_params(kSmall, 13);
    SUBCASE("empty trajectory sums to zero") {
        CHECK(sequence_log_prob(p, {1, 2}, {}) == 0.0);
    }
    SUBCASE("single token equals token_log_prob") {
        CHECK(sequence_log_prob(p, {1, 2}, {4}) ==
              doctest::Approx(token_log_prob(p, {1, 2}, 4)).epsilon(1e-15));
    }
}

TEST_CASE("trajectory space sums to one by brute-force enumeration") {
    // vocab 4, max_len 3, EOS-terminated or complete at max_len
    const PolicyDims dims{4, 5, 2};
    const PolicyParams p = random_params(dims, 99, 0.8);
    const TokenSeq query = {2};
    const TokenId eos = kEos;  // index 1

    double total = 0.0;
    // enumerate all complete trajectories
    const auto enumerate = [&](auto&& self, TokenSeq prefix, double logp) -> void {
        if (!prefix.empty() && (prefix.back() == eos || prefix.size() == 3)) {
            total += std::exp(logp);
            return;
        }
        TokenSeq ctx = query;
        ctx.insert(ctx.end(), prefix.begin(), prefix.end());
        for (TokenId t = 0; t < 4; ++t) {
            TokenSeq next = prefix;
            next.push_back(t);
            self(self, std::move(next), logp + token_log_prob(p, ctx, t));
        }
    };
    enumerate(enumerate, {}, 0.0);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("sampling is deterministic and respects forced termination") {
    const PolicyParams p = PolicyParams::zeros(kSmall);
    SUBCASE("same seed, same trajectory") {
        Rng r1(123);
        Rng r2(123);
        const Trajectory t1 = sample_trajectory(p, {3}, 8, kEos, r1);
        const Trajectory t2 = sample_trajectory(p, {3}, 8, kEos, r2);
        CHECK(t1.tokens == t2.tokens);
        CHECK(t1.behavior_logps == t2.behavior_logps);
        CHECK(t1.tokens.size() == t1.behavior_logps.size());
        for (double lp : t1.behavior_logps) {
            CHECK(lp <= 0.0);
        }
    }
    SUBCASE("near-certain EOS terminates at length 1") {
        PolicyParams forced = PolicyParams::zeros(kSmall);
        forced.flat[forced.out_bias_offset() + kEos] = 50.0;
        Rng rng(7);
        const Trajectory t = sample_trajectory(forced, {2, 3}, 8, kEos, rng);
        CHECK(t.tokens == TokenSeq{kEos});
    }
    SUBCASE("max_len caps the trajectory") {
        PolicyParams never_eos = PolicyParams::zeros(kSmall);
        never_eos.flat[never_eos.out_bias_offset() + kEos] = -50.0;
        Rng rng(7);
        const Trajectory t = sample_trajectory(never_eos, {}, 5, kEos, rng);
        CHECK(t.tokens.size() == 5);
    }
}

TEST_CASE("first-step sample frequencies match softmax within 3 standard errors") {
    const PolicyParams p = random_params(kSmall, 31, 0.7);
    const TokenSeq ctx = {1, 4};
    const std::vector<double> probs = softmax(logits(p, ctx));
    const int n = 100000;
    std::vector<int> counts(9, 0);
    Rng rng(777);
    for (int i = 0; i < n; ++i) {
        Trajectory t = sample_trajectory(p, ctx, 1, kEos, rng);
        ++counts[static_cast<size_t>(t.tokens[0])];
    }
    for (int t = 0; t < 9; ++t) {
        const double freq = static_cast<double>(counts[t]) / n;
        const double se = std::sqrt(probs[t] * (1.0 - probs[t]) / n);
        CHECK(std::abs(freq - probs[t]) <= 3.0 * se + 1.0 / n);
    }
}

TEST_CASE("step entropy") {
    SUBCASE("uniform maximizes entropy at ln V") {
        const PolicyParams p = PolicyParams::zeros(kSmall);
        CHECK(step_entropy(p, {}) == doctest::Approx(std::log(9.0)).epsilon(1e-12));
        CHECK(step_entropy(p, {1, 2, 3}) == doctest::Approx(2.1972245773362196).epsilon(1e-12));
    }
    SUBCASE("near-deterministic distribution has entropy under 1e-15") {
        PolicyParams p = PolicyParams::zeros(kSmall);
        p.flat[p.out_bias_offset() + 4] = 50.0;
        CHECK(step_entropy(p, {}) < 1e-15);
    }
    SUBCASE("two-token support with logits (ln 2, 0)") {
        const PolicyDims two{2, 3, 1};
        PolicyParams p = PolicyParams::zeros(two);
        p.flat[p.out_bias_offset() + 0] = std::log(2.0);
        // p = (2/3, 1/3): H = ln 3 - (2/3) ln 2
        CHECK(step_entropy(p, {}) ==
              doctest::Approx(std::log(3.0) - (2.0 / 3.0) * std::log(2.0)).epsilon(1e-12));
        CHECK(step_entropy(p, {}) == doctest::Approx(0.6365141682948128).epsilon(1e-10));
    }
    SUBCASE("entropy bounds hold for random nets") {
        Rng rng(4242);
        for (int i = 0; i < 50; ++i) {
            const PolicyParams p = random_params(kSmall, rng.next_u64(), 2.0);
            const TokenSeq ctx = random_seq(kSmall, rng, 6);
            const double h = step_entropy(p, ctx);
            CHECK(h >= 0.0);
            CHECK(h <= std::log(9.0) + 1e-12);
        }
    }
}

TEST_CASE("gradient of empty trajectory is the zero vector") {
    const PolicyParams p = random_params(kSmall, 17);
    const auto g = grad_sequence_log_prob(p, {1}, {});
    for (double x : g) {
        CHECK(x == 0.0);
    }
}

TEST_CASE("output-bias gradient at the uniform point is one-hot minus uniform") {
    const PolicyParams p = PolicyParams::zeros(kSmall);
    const TokenId target = 4;
    const auto g = grad_sequence_log_prob(p, {}, {target});
    const size_t ob = p.out_bias_offset();
    for (int v = 0; v < 9; ++v) {
        const double expected = (v == target ? 1.0 : 0.0) - 1.0 / 9.0;
        CHECK(g[ob + static_cast<size_t>(v)] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradient matches central finite differences on 50 random pairs") {
    Rng rng(2025);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const PolicyParams p = random_params(kSmall, rng.next_u64(), 0.5);
        const TokenSeq query = random_seq(kSmall, rng, 4);
        const TokenSeq traj = random_seq(kSmall, rng, 5);
        const auto analytic = grad_sequence_log_prob(p, query, traj);
        const auto fd = finite_difference_gradient(
            p, [&](const PolicyParams& q) { return sequence_log_prob(q, query, traj); }, 1e-4);
        double num = 0.0;
        double da = 0.0;
        double df = 0.0;
        for (size_t k = 0; k < fd.size(); ++k) {
            num += (analytic[k] - fd[k]) * (analytic[k] - fd[k]);
            da += analytic[k] * analytic[k];
            df += fd[k] * fd[k];
        }
        const double denom = std::max(std::sqrt(da), std::sqrt(df));
        const double rel = denom < 1e-12 ? 0.0 : std::sqrt(num) / denom;
        worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("finite differences on simple functionals") {
    const PolicyParams p = random_params(kSmall, 3);
    SUBCASE("constant function gives zero within 1e-12") {
        const auto g = finite_difference_gradient(p, [](const PolicyParams&) { return 3.5; }, 1e-4);
        for (double x : g) {
            CHECK(std::abs(x) < 1e-12);
        }
    }
    SUBCASE("f = theta . theta gives 2 theta") {
        const auto g = finite_difference_gradient(
            p,
            [](const PolicyParams& q) {
                double acc = 0.0;
                for (double x : q.flat) {
                    acc += x * x;
                }
                return acc;
            },
            1e-4);
        for (size_t k = 0; k < g.size(); ++k) {
            CHECK(g[k] == doctest::Approx(2.0 * p.flat[k]).epsilon(1e-7));
        }
    }
    SUBCASE("non-finite evaluation names the coordinate") {
        CHECK_THROWS_WITH_AS(
            finite_difference_gradient(
                p, [](const PolicyParams&) { return std::numeric_limits<double>::quiet_NaN(); }, 1e-4),
            doctest::Contains("coordinate 0"), std::runtime_error);
    }
    SUBCASE("h must be positive") {
        CHECK_THROWS_AS(finite_difference_gradient(p, [](const PolicyParams&) { return 0.0; }, 0.0),
                        std::invalid_argument);
    }
}

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
    const PolicyParams p = random_params(kSmall, 555, 1.3);
    const auto dir = std::filesystem::temp_directory_path() / "grouprl_policy_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "p.ckpt";
    p.save(path);
    const PolicyParams q = PolicyParams::load(path);
    CHECK(q.dims.vocab_size == p.dims.vocab_size);
    CHECK(q.dims.hidden_dim == p.dims.hidden_dim);
    CHECK(q.dims.window == p.dims.window);
    REQUIRE(q.flat.size() == p.flat.size());
    for (size_t i = 0; i < p.flat.size(); ++i) {
        CHECK(q.flat[i] == p.flat[i]);  // bitwise (no NaN involved)
    }

    // a second save produces identical bytes
    const auto path2 = dir / "q.ckpt";
    q.save(path2);
    std::ifstream f1(path, std::ios::binary);
    std::ifstream f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const auto dir = std::filesystem::temp_directory_path() / "grouprl_policy_bad";
    std::filesystem::create_directories(dir);
    const auto path = dir / "bad.ckpt";
    std::ofstream(path, std::ios::binary) << "not a checkpoint";
    CHECK_THROWS_AS(PolicyParams::load(path), std::runtime_error);
    std::filesystem::remove_all(dir);
}
