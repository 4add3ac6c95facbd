#ifndef GROUPRL_INJECTION_HPP
#define GROUPRL_INJECTION_HPP

#include <optional>
#include <span>
#include <utility>

#include "grouprl/grpo.hpp"
#include "grouprl/tasks.hpp"

namespace grouprl {

enum class Method { grpo_only, repo, luffy };

struct GateConfig {
    double delta = 0.5;  // reward threshold: R < delta counts as a failure
    double rho = 0.75;   // minimum group failure rate for the gate to fire
    Method method = Method::repo;
    // Optional guard on top of the literal replacement rule: skip the
    // replacement when the rephrased rollout itself scores below delta.
    bool require_rep_success = false;

    void validate() const;  // throws std::invalid_argument
};

enum class InjectionOrigin { none, rephrased, direct_injected };

struct InjectionRecord {
    double gamma_fail = 0.0;       // failure rate of the on-policy group, pre-replacement
    double gamma_fail_post = 0.0;  // recomputed after any replacement, for logging only
    bool fired = false;
    std::optional<int> replaced_index;
    std::optional<double> rephrased_reward;
    InjectionOrigin origin = InjectionOrigin::none;
};

// Fraction of rewards strictly below delta. Requires at least one reward.
double failure_rate(std::span<const double> rewards, double delta);

// Samples a trajectory conditioned on the rephrase context built from
// (query, trace), strips meta tokens so its format matches standard rollouts,
// re-verifies the stripped content against the ground truth, and records
// behavior log-probs under old_params with the stripped trajectory treated as
// a whole continuation of the rephrase context. Deterministic given the rng
// seed. Origin is `rephrased`.
Trajectory sample_rephrased(const PolicyParams& old_params, const QueryInstance& instance,
                            const ExpertTrace& trace, const Vocabulary& learner,
                            const TokenMapping& projection, int max_len, Rng& rng);

// Replacement rule: gamma_fail is computed from the group's rewards before
// any replacement; when gamma_fail >= rho the minimum-reward member (ties:
// lowest index) is replaced by o_rep with conditioning context rep_context,
// otherwise the group is returned unchanged bit-identically.
std::pair<RolloutGroup, InjectionRecord> apply_gate(RolloutGroup group, Trajectory o_rep,
                                                    TokenSeq rep_context, const GateConfig& cfg);

// Direct off-policy injection baseline: maps the expert trace into the
// learner vocabulary through `mapping`, re-verifies the mapped content, sets
// behavior log-probs to the current policy's log-probs of the mapped tokens
// under the plain query (the trajectory was never sampled from this policy),
// and unconditionally replaces the minimum-reward member — no gate. Origin is
// `direct_injected`; delta is used only to log gamma_fail.
std::pair<RolloutGroup, InjectionRecord> luffy_inject(RolloutGroup group, const ExpertTrace& trace,
                                                      const TokenMapping& mapping,
                                                      const PolicyParams& params,
                                                      const Vocabulary& learner, int max_len,
                                                      double delta = 0.5);

}  // namespace grouprl

#endif
