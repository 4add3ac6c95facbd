#ifndef GROUPRL_GRPO_HPP
#define GROUPRL_GRPO_HPP

#include <span>
#include <vector>

#include "grouprl/policy.hpp"
#include "grouprl/vocab.hpp"

namespace grouprl {

// Group-relative advantages: values[i] = (R_i - mean) / (std + eps), with the
// population standard deviation (divide by G). One value per trajectory,
// applied uniformly across its tokens.
struct GroupAdvantages {
    std::vector<double> values;
    double mean = 0.0;
    double stddev = 0.0;
    double eps = 0.0;
};

// Throws std::invalid_argument when fewer than two rewards are given.
GroupAdvantages group_advantages(std::span<const double> rewards, double adv_eps);

enum class KlEstimator {
    nonnegative,  // u - ln u - 1 with u = exp(logp_ref - logp_theta); >= 0
    log_ratio,    // logp_theta - logp_ref; unbiased but signed
};

struct ObjectiveConfig {
    double clip_eps = 0.2;
    double beta = 0.0;
    double adv_eps = 1e-6;
    bool length_normalize = true;  // the 1/|o_i| factor
    KlEstimator kl_estimator = KlEstimator::nonnegative;
};

struct RatioDiagnostics {
    long clamp_events = 0;    // exponent clamps in importance_ratio
    long clipped_tokens = 0;  // tokens whose ratio left the clip band
    long total_tokens = 0;
};

// Exponent bound for the importance ratio; exp arguments outside
// [-kRatioExpClamp, kRatioExpClamp] are clamped and counted.
inline constexpr double kRatioExpClamp = 60.0;

// exp(logp_new - logp_old), clamped as above.
double importance_ratio(double logp_new, double logp_old, RatioDiagnostics* diag = nullptr);

// min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv).
double clipped_term(double ratio, double advantage, double clip_eps);

// Nonnegative per-token KL estimator u - ln u - 1, u = exp(logp_ref - logp_theta).
double kl_penalty_term(double logp_theta, double logp_ref);

// G trajectories for one query. contexts[i] is the conditioning context used
// for trajectory i in objective evaluation; it is the plain query for
// on-policy members and may be the rephrase context for an injected member.
struct RolloutGroup {
    TokenSeq query;
    TokenSeq ground_truth;
    std::vector<Trajectory> members;
    std::vector<TokenSeq> contexts;

    const TokenSeq& context_of(size_t i) const {
        return contexts.empty() ? query : contexts[i];
    }
    std::vector<double> rewards() const;  // throws when a reward is unset
};

struct ObjectiveResult {
    double value = 0.0;
    std::vector<double> gradient;  // ascent direction, same length as params.flat
    GroupAdvantages advantages;
    RatioDiagnostics diag;
};

// Clipped surrogate objective with optional KL penalty against a reference
// policy, averaged 1/|o_i| within trajectories (when length_normalize) and
// 1/G across the group. Ratios use logp under `params` against each
// trajectory's stored behavior_logps; advantages and behavior log-probs are
// constants (no gradient flows through them). The gradient is the exact
// ascent direction. Pass ref_params = nullptr when beta == 0.
ObjectiveResult grpo_objective(const RolloutGroup& group, const PolicyParams& params,
                               const PolicyParams* ref_params, const ObjectiveConfig& cfg);

}  // namespace grouprl

#endif
