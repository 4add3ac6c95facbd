#ifndef GROUPRL_TRAINER_HPP
#define GROUPRL_TRAINER_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "grouprl/injection.hpp"
#include "grouprl/metrics.hpp"

namespace grouprl {

enum class OptimizerKind { sgd, adam };
enum class RepRatioMode {
    plain,        // importance ratios for the rephrased rollout use the plain
                  // query context, treating it as if sampled on-policy
    conditioned,  // ratios use the rephrase-conditioned sampling context
};
enum class InitScheme { zero, gaussian, copy_prior };

struct RunConfig {
    Method method = Method::grpo_only;
    int group_size = 8;  // G
    int batch_queries = 8;
    int steps = 100;
    double learning_rate = 0.05;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    ObjectiveConfig objective;
    GateConfig gate;
    TaskSpec task;

    uint64_t seed = 1;
    int max_len = 12;          // trajectory cap
    int checkpoint_every = 0;  // 0 = final checkpoint only

    // Policy architecture and initialization.
    int hidden_dim = 24;
    int window = 6;
    InitScheme init = InitScheme::copy_prior;
    double init_scale = 0.4;  // embedding scale (gaussian scale for init=gaussian)
    double copy_scale = 1.6;  // near-identity mix strength for copy_prior
    double eos_bias = 1.0;    // short-response prior for copy_prior

    RepRatioMode rep_ratio = RepRatioMode::plain;
    bool rep_cache = false;  // reuse one rephrased rollout per query text
    MappingMode mapping = MappingMode::exact_or_unk;
    double grad_clip = 0.0;  // 0 = off
    std::string tasks_file;  // optional fixed dataset to replay

    void validate() const;  // throws std::invalid_argument
};

// Flat key = value text format. Unknown keys are errors; '#' starts a
// comment. save_config writes every field so a snapshot reloads identically.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config_text(const std::string& text);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);
std::string config_to_text(const RunConfig& cfg);

struct TaskInstance {
    QueryInstance instance;
    ExpertTrace trace;
};

struct RolloutResult {
    std::vector<RolloutGroup> groups;
    std::vector<InjectionRecord> records;
    long rephrase_attempts = 0;
    long rephrase_successes = 0;
};

// Per query: G on-policy samples from old_params, verified; then method
// dispatch (repo: sample_rephrased + apply_gate; luffy: unconditional
// luffy_inject; grpo_only: nothing). Deterministic given phase_seed.
RolloutResult rollout_phase(const PolicyParams& old_params, const TaskEnv& env,
                            const std::vector<TaskInstance>& instances, const RunConfig& cfg,
                            uint64_t phase_seed);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
};

struct UpdateResult {
    MetricsRecord metrics;
    bool collapsed = false;  // non-finite objective or gradient; params untouched
};

// One ascent step on the group-averaged objective; fills the step metrics.
UpdateResult update_phase(PolicyParams& params, const PolicyParams* ref_params,
                          const RolloutResult& rollout, AdamState& adam, const RunConfig& cfg,
                          int step);

struct RunRecord {
    RunConfig config;
    std::vector<MetricsRecord> metrics;
    PolicyParams final_params;
    bool halted = false;
    std::optional<int> collapse_step;
    double wall_seconds = 0.0;
};

// Full training loop: snapshot old params, rollout, update, record metrics,
// checkpoint on schedule. When out_dir is nonempty, writes config.cfg,
// metrics.jsonl, run.json, and checkpoints there. Bit-reproducible given the
// config (wall-clock time lives only in run.json).
RunRecord train(const RunConfig& cfg, const std::filesystem::path& out_dir = {});

struct GradCheckReport {
    std::vector<double> errors;  // per instance, sorted descending
    double max_rel_error = 0.0;
    bool pass = false;
    std::string text;
};

// Compares the objective's analytic gradient against central finite
// differences (h = 1e-4) on `instances` random (params, group) pairs drawn
// around a shared snapshot. Relative error is ||a - f|| / max(||a||, ||f||),
// defined as 0 when both norms are below 1e-12 (flat-reward groups). Passes
// iff the max is < 1e-4. Requires a small net (<= 500 parameters).
GradCheckReport grad_check(const RunConfig& cfg, int instances = 50);

const char* method_name(Method m);
Method method_from_name(const std::string& name);

}  // namespace grouprl

#endif
