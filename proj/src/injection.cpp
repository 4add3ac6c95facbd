#include "grouprl/injection.hpp"

#include <algorithm>
#include <stdexcept>

namespace grouprl {

void GateConfig::validate() const {
    if (rho < 0.0 || rho > 1.0) {
        throw std::invalid_argument("GateConfig: rho must be in [0, 1]");
    }
}

double failure_rate(std::span<const double> rewards, double delta) {
    if (rewards.empty()) {
        throw std::invalid_argument("failure_rate: empty reward list");
    }
    long failures = 0;
    for (double r : rewards) {
        if (r < delta) {
            ++failures;
        }
    }
    return static_cast<double>(failures) / static_cast<double>(rewards.size());
}

Trajectory sample_rephrased(const PolicyParams& old_params, const QueryInstance& instance,
                            const ExpertTrace& trace, const Vocabulary& learner,
                            const TokenMapping& projection, int max_len, Rng& rng) {
    const TokenSeq ctx = build_rephrase_context(instance.query, trace, learner, projection);
    Trajectory raw = sample_trajectory(old_params, ctx, max_len, kEos, rng);

    Trajectory out;
    out.origin = Origin::rephrased;
    out.tokens = strip_meta_tokens(raw.tokens, learner);
    if (out.tokens.empty()) {
        // Everything sampled was meta noise; keep a bare EOS so the
        // trajectory stays well-formed for the objective.
        out.tokens.push_back(kEos);
    }
    // Post-strip positions no longer match the sampled ones, so record the
    // behavior distribution of the stripped sequence as one continuation of
    // the rephrase context.
    out.behavior_logps.resize(out.tokens.size());
    TokenSeq running = ctx;
    for (size_t t = 0; t < out.tokens.size(); ++t) {
        out.behavior_logps[t] = token_log_prob(old_params, running, out.tokens[t]);
        running.push_back(out.tokens[t]);
    }
    out.reward = verify(out, instance.ground_truth, learner);
    return out;
}

namespace {

size_t min_reward_index(const std::vector<double>& rewards) {
    size_t best = 0;
    for (size_t i = 1; i < rewards.size(); ++i) {
        if (rewards[i] < rewards[best]) {
            best = i;
        }
    }
    return best;
}

void ensure_contexts(RolloutGroup& group) {
    if (group.contexts.empty()) {
        group.contexts.assign(group.members.size(), group.query);
    }
}

}  // namespace

std::pair<RolloutGroup, InjectionRecord> apply_gate(RolloutGroup group, Trajectory o_rep,
                                                    TokenSeq rep_context, const GateConfig& cfg) {
    cfg.validate();
    if (group.members.empty()) {
        throw std::invalid_argument("apply_gate: empty group");
    }
    if (!o_rep.reward.has_value()) {
        throw std::invalid_argument("apply_gate: rephrased trajectory has no reward");
    }
    InjectionRecord rec;
    const std::vector<double> rewards = group.rewards();
    rec.gamma_fail = failure_rate(rewards, cfg.delta);
    rec.gamma_fail_post = rec.gamma_fail;
    rec.rephrased_reward = o_rep.reward;

    bool fire = rec.gamma_fail >= cfg.rho;
    if (fire && cfg.require_rep_success && *o_rep.reward < cfg.delta) {
        fire = false;
    }
    if (!fire) {
        return {std::move(group), rec};
    }

    ensure_contexts(group);
    const size_t idx = min_reward_index(rewards);
    group.members[idx] = std::move(o_rep);
    group.contexts[idx] = std::move(rep_context);
    rec.fired = true;
    rec.replaced_index = static_cast<int>(idx);
    rec.origin = InjectionOrigin::rephrased;
    rec.gamma_fail_post = failure_rate(group.rewards(), cfg.delta);
    return {std::move(group), rec};
}

std::pair<RolloutGroup, InjectionRecord> luffy_inject(RolloutGroup group, const ExpertTrace& trace,
                                                      const TokenMapping& mapping,
                                                      const PolicyParams& params,
                                                      const Vocabulary& learner, int max_len,
                                                      double delta) {
    if (group.members.empty()) {
        throw std::invalid_argument("luffy_inject: empty group");
    }
    InjectionRecord rec;
    const std::vector<double> rewards = group.rewards();
    rec.gamma_fail = failure_rate(rewards, delta);

    Trajectory forced;
    forced.origin = Origin::direct_injected;
    forced.tokens = mapping.map_sequence(trace.teacher_tokens);
    if (static_cast<int>(forced.tokens.size()) >= max_len) {
        forced.tokens.resize(static_cast<size_t>(max_len));
    } else {
        forced.tokens.push_back(kEos);
    }
    forced.behavior_logps.resize(forced.tokens.size());
    TokenSeq ctx = group.query;
    for (size_t t = 0; t < forced.tokens.size(); ++t) {
        forced.behavior_logps[t] = token_log_prob(params, ctx, forced.tokens[t]);
        ctx.push_back(forced.tokens[t]);
    }
    forced.reward = verify(forced, group.ground_truth, learner);

    ensure_contexts(group);
    const size_t idx = min_reward_index(rewards);
    rec.rephrased_reward = forced.reward;
    group.members[idx] = std::move(forced);
    group.contexts[idx] = group.query;
    rec.fired = true;
    rec.replaced_index = static_cast<int>(idx);
    rec.origin = InjectionOrigin::direct_injected;
    rec.gamma_fail_post = failure_rate(group.rewards(), delta);
    return {std::move(group), rec};
}

}  // namespace grouprl
