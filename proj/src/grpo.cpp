#include "grouprl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace grouprl {

GroupAdvantages group_advantages(std::span<const double> rewards, double adv_eps) {
    if (rewards.size() < 2) {
        throw std::invalid_argument("group_advantages: need at least 2 rewards");
    }
    if (!(adv_eps > 0.0)) {
        throw std::invalid_argument("group_advantages: adv_eps must be positive");
    }
    GroupAdvantages adv;
    adv.eps = adv_eps;
    const double g = static_cast<double>(rewards.size());
    double sum = 0.0;
    for (double r : rewards) {
        sum += r;
    }
    adv.mean = sum / g;
    double var = 0.0;
    for (double r : rewards) {
        const double d = r - adv.mean;
        var += d * d;
    }
    adv.stddev = std::sqrt(var / g);  // population std
    adv.values.resize(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i) {
        adv.values[i] = (rewards[i] - adv.mean) / (adv.stddev + adv_eps);
    }
    return adv;
}

double importance_ratio(double logp_new, double logp_old, RatioDiagnostics* diag) {
    if (!std::isfinite(logp_new) || !std::isfinite(logp_old)) {
        throw std::invalid_argument("importance_ratio: non-finite log probability");
    }
    double arg = logp_new - logp_old;
    if (arg > kRatioExpClamp || arg < -kRatioExpClamp) {
        arg = std::clamp(arg, -kRatioExpClamp, kRatioExpClamp);
        if (diag != nullptr) {
            ++diag->clamp_events;
        }
    }
    return std::exp(arg);
}

double clipped_term(double ratio, double advantage, double clip_eps) {
    if (!(clip_eps > 0.0)) {
        throw std::invalid_argument("clipped_term: clip_eps must be positive");
    }
    const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    return std::min(ratio * advantage, clipped * advantage);
}

double kl_penalty_term(double logp_theta, double logp_ref) {
    if (!std::isfinite(logp_theta) || !std::isfinite(logp_ref)) {
        throw std::invalid_argument("kl_penalty_term: non-finite log probability");
    }
    const double u = std::exp(std::clamp(logp_ref - logp_theta, -kRatioExpClamp, kRatioExpClamp));
    return u - std::log(u) - 1.0;
}

std::vector<double> RolloutGroup::rewards() const {
    std::vector<double> out;
    out.reserve(members.size());
    for (size_t i = 0; i < members.size(); ++i) {
        if (!members[i].reward.has_value()) {
            throw std::invalid_argument("RolloutGroup: reward unset for trajectory " + std::to_string(i));
        }
        out.push_back(*members[i].reward);
    }
    return out;
}

ObjectiveResult grpo_objective(const RolloutGroup& group, const PolicyParams& params,
                               const PolicyParams* ref_params, const ObjectiveConfig& cfg) {
    const size_t G = group.members.size();
    if (cfg.beta != 0.0 && ref_params == nullptr) {
        throw std::invalid_argument("grpo_objective: beta != 0 requires reference params");
    }
    for (size_t i = 0; i < G; ++i) {
        if (group.members[i].tokens.empty()) {
            throw std::invalid_argument("grpo_objective: empty trajectory " + std::to_string(i));
        }
        if (group.members[i].tokens.size() != group.members[i].behavior_logps.size()) {
            throw std::invalid_argument("grpo_objective: behavior log-prob length mismatch in trajectory " +
                                        std::to_string(i));
        }
    }
    const std::vector<double> rewards = group.rewards();

    ObjectiveResult res;
    res.advantages = group_advantages(rewards, cfg.adv_eps);
    res.gradient.assign(params.flat.size(), 0.0);

    const double inv_g = 1.0 / static_cast<double>(G);
    std::vector<double> weights;
    for (size_t i = 0; i < G; ++i) {
        const Trajectory& traj = group.members[i];
        const TokenSeq& base_ctx = group.context_of(i);
        const double advantage = res.advantages.values[i];
        const size_t len = traj.tokens.size();
        const double norm = cfg.length_normalize ? 1.0 / static_cast<double>(len) : 1.0;

        weights.assign(len, 0.0);
        TokenSeq ctx = base_ctx;
        double traj_sum = 0.0;
        for (size_t t = 0; t < len; ++t) {
            const TokenId tok = traj.tokens[t];
            const double logp_theta = token_log_prob(params, ctx, tok);
            const double ratio = importance_ratio(logp_theta, traj.behavior_logps[t], &res.diag);
            ++res.diag.total_tokens;
            if (ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps) {
                ++res.diag.clipped_tokens;
            }

            const double unclipped = ratio * advantage;
            const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantage;
            double term = std::min(unclipped, clipped);
            // d min / d logp: the unclipped branch moves with the ratio, the
            // clipped branch is locally constant.
            double coeff = unclipped <= clipped ? unclipped : 0.0;

            if (cfg.beta != 0.0) {
                const double logp_ref = token_log_prob(*ref_params, ctx, tok);
                if (cfg.kl_estimator == KlEstimator::nonnegative) {
                    const double u =
                        std::exp(std::clamp(logp_ref - logp_theta, -kRatioExpClamp, kRatioExpClamp));
                    term -= cfg.beta * (u - std::log(u) - 1.0);
                    coeff -= cfg.beta * (1.0 - u);
                } else {
                    term -= cfg.beta * (logp_theta - logp_ref);
                    coeff -= cfg.beta;
                }
            }

            traj_sum += term;
            weights[t] = inv_g * norm * coeff;
            ctx.push_back(tok);
        }
        res.value += inv_g * norm * traj_sum;
        accumulate_weighted_grad_log_prob(params, base_ctx, traj.tokens, weights, res.gradient);
    }
    return res;
}

}  // namespace grouprl
