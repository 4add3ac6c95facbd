#include "grouprl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace grouprl {

namespace {

// Seed-derivation role tags.
constexpr uint64_t kTagInit = 1;
constexpr uint64_t kTagTask = 2;
constexpr uint64_t kTagRoll = 3;
constexpr uint64_t kTagGradCheck = 5;
constexpr uint64_t kTagRepMember = 1000001;

constexpr char kOptMagic[8] = {'G', 'R', 'L', 'O', 'P', 'T', '1', '\0'};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true" || value == "1" || value == "on") {
        return true;
    }
    if (value == "false" || value == "0" || value == "off") {
        return false;
    }
    throw std::invalid_argument("config: bad boolean for " + key + ": " + value);
}

double vector_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

}  // namespace

const char* method_name(Method m) {
    switch (m) {
        case Method::grpo_only:
            return "grpo";
        case Method::repo:
            return "repo";
        case Method::luffy:
            return "luffy";
    }
    return "grpo";
}

Method method_from_name(const std::string& name) {
    if (name == "grpo" || name == "grpo_only") {
        return Method::grpo_only;
    }
    if (name == "repo") {
        return Method::repo;
    }
    if (name == "luffy") {
        return Method::luffy;
    }
    throw std::invalid_argument("unknown method: " + name);
}

void RunConfig::validate() const {
    if (group_size < 2) {
        throw std::invalid_argument("RunConfig: group_size must be >= 2");
    }
    if (batch_queries < 1) {
        throw std::invalid_argument("RunConfig: batch_queries must be >= 1");
    }
    if (steps < 1) {
        throw std::invalid_argument("RunConfig: steps must be >= 1");
    }
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("RunConfig: learning_rate must be > 0");
    }
    if (max_len < 1) {
        throw std::invalid_argument("RunConfig: max_len must be >= 1");
    }
    if (hidden_dim < 1 || window < 1) {
        throw std::invalid_argument("RunConfig: hidden_dim and window must be >= 1");
    }
    if (!(objective.clip_eps > 0.0)) {
        throw std::invalid_argument("RunConfig: clip_eps must be > 0");
    }
    if (!(objective.adv_eps > 0.0)) {
        throw std::invalid_argument("RunConfig: adv_eps must be > 0");
    }
    if (objective.beta < 0.0) {
        throw std::invalid_argument("RunConfig: kl_beta must be >= 0");
    }
    if (grad_clip < 0.0) {
        throw std::invalid_argument("RunConfig: grad_clip must be >= 0");
    }
    task.validate();
    gate.validate();
}

RunConfig parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        if (trim(line).empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        if (!kv.emplace(key, value).second) {
            throw std::invalid_argument("config: duplicate key " + key);
        }
    }

    RunConfig cfg;
    // Difficulty presets first, explicit ranges override below.
    if (kv.count("task_kind")) {
        cfg.task.kind = task_kind_from_name(kv.at("task_kind"));
    }
    if (kv.count("task_difficulty")) {
        const std::string d = kv.at("task_difficulty");
        if (d != "easy" && d != "hard") {
            throw std::invalid_argument("config: task_difficulty must be easy or hard");
        }
        cfg.task = TaskSpec::with_difficulty(cfg.task.kind,
                                             d == "easy" ? Difficulty::easy : Difficulty::hard);
    }

    for (const auto& [key, value] : kv) {
        if (key == "method") {
            cfg.method = method_from_name(value);
        } else if (key == "group_size") {
            cfg.group_size = std::stoi(value);
        } else if (key == "batch_queries") {
            cfg.batch_queries = std::stoi(value);
        } else if (key == "steps") {
            cfg.steps = std::stoi(value);
        } else if (key == "learning_rate") {
            cfg.learning_rate = std::stod(value);
        } else if (key == "optimizer") {
            if (value == "sgd") {
                cfg.optimizer = OptimizerKind::sgd;
            } else if (value == "adam") {
                cfg.optimizer = OptimizerKind::adam;
            } else {
                throw std::invalid_argument("config: optimizer must be sgd or adam");
            }
        } else if (key == "adam_beta1") {
            cfg.adam_beta1 = std::stod(value);
        } else if (key == "adam_beta2") {
            cfg.adam_beta2 = std::stod(value);
        } else if (key == "adam_eps") {
            cfg.adam_eps = std::stod(value);
        } else if (key == "clip_eps") {
            cfg.objective.clip_eps = std::stod(value);
        } else if (key == "kl_beta") {
            cfg.objective.beta = std::stod(value);
        } else if (key == "adv_eps") {
            cfg.objective.adv_eps = std::stod(value);
        } else if (key == "length_normalize") {
            cfg.objective.length_normalize = parse_bool(value, key);
        } else if (key == "kl_estimator") {
            if (value == "nonnegative") {
                cfg.objective.kl_estimator = KlEstimator::nonnegative;
            } else if (value == "log_ratio") {
                cfg.objective.kl_estimator = KlEstimator::log_ratio;
            } else {
                throw std::invalid_argument("config: kl_estimator must be nonnegative or log_ratio");
            }
        } else if (key == "delta") {
            cfg.gate.delta = std::stod(value);
        } else if (key == "rho") {
            cfg.gate.rho = std::stod(value);
        } else if (key == "require_rep_success") {
            cfg.gate.require_rep_success = parse_bool(value, key);
        } else if (key == "task_kind" || key == "task_difficulty") {
            // handled above
        } else if (key == "task_min_len") {
            cfg.task.min_len = std::stoi(value);
        } else if (key == "task_max_len") {
            cfg.task.max_len = std::stoi(value);
        } else if (key == "task_modulus") {
            cfg.task.modulus = std::stoi(value);
        } else if (key == "seed") {
            cfg.seed = std::stoull(value);
        } else if (key == "max_len") {
            cfg.max_len = std::stoi(value);
        } else if (key == "checkpoint_every") {
            cfg.checkpoint_every = std::stoi(value);
        } else if (key == "hidden_dim") {
            cfg.hidden_dim = std::stoi(value);
        } else if (key == "window") {
            cfg.window = std::stoi(value);
        } else if (key == "init") {
            if (value == "zero") {
                cfg.init = InitScheme::zero;
            } else if (value == "gaussian") {
                cfg.init = InitScheme::gaussian;
            } else if (value == "copy_prior") {
                cfg.init = InitScheme::copy_prior;
            } else {
                throw std::invalid_argument("config: init must be zero, gaussian or copy_prior");
            }
        } else if (key == "init_scale") {
            cfg.init_scale = std::stod(value);
        } else if (key == "copy_scale") {
            cfg.copy_scale = std::stod(value);
        } else if (key == "eos_bias") {
            cfg.eos_bias = std::stod(value);
        } else if (key == "rep_ratio") {
            if (value == "plain") {
                cfg.rep_ratio = RepRatioMode::plain;
            } else if (value == "conditioned") {
                cfg.rep_ratio = RepRatioMode::conditioned;
            } else {
                throw std::invalid_argument("config: rep_ratio must be plain or conditioned");
            }
        } else if (key == "rep_cache") {
            cfg.rep_cache = parse_bool(value, key);
        } else if (key == "mapping") {
            if (value == "exact_or_unk") {
                cfg.mapping = MappingMode::exact_or_unk;
            } else if (value == "surface_hash") {
                cfg.mapping = MappingMode::surface_hash;
            } else {
                throw std::invalid_argument("config: mapping must be exact_or_unk or surface_hash");
            }
        } else if (key == "grad_clip") {
            cfg.grad_clip = std::stod(value);
        } else if (key == "tasks_file") {
            cfg.tasks_file = value;
        } else {
            throw std::invalid_argument("config: unknown key " + key);
        }
    }
    cfg.gate.method = cfg.method;
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_config: cannot open " + path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config_text(os.str());
}

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "method = " << method_name(cfg.method) << "\n";
    os << "group_size = " << cfg.group_size << "\n";
    os << "batch_queries = " << cfg.batch_queries << "\n";
    os << "steps = " << cfg.steps << "\n";
    os << "learning_rate = " << cfg.learning_rate << "\n";
    os << "optimizer = " << (cfg.optimizer == OptimizerKind::sgd ? "sgd" : "adam") << "\n";
    os << "adam_beta1 = " << cfg.adam_beta1 << "\n";
    os << "adam_beta2 = " << cfg.adam_beta2 << "\n";
    os << "adam_eps = " << cfg.adam_eps << "\n";
    os << "clip_eps = " << cfg.objective.clip_eps << "\n";
    os << "kl_beta = " << cfg.objective.beta << "\n";
    os << "adv_eps = " << cfg.objective.adv_eps << "\n";
    os << "length_normalize = " << (cfg.objective.length_normalize ? "true" : "false") << "\n";
    os << "kl_estimator = "
       << (cfg.objective.kl_estimator == KlEstimator::nonnegative ? "nonnegative" : "log_ratio") << "\n";
    os << "delta = " << cfg.gate.delta << "\n";
    os << "rho = " << cfg.gate.rho << "\n";
    os << "require_rep_success = " << (cfg.gate.require_rep_success ? "true" : "false") << "\n";
    os << "task_kind = " << task_kind_name(cfg.task.kind) << "\n";
    os << "task_min_len = " << cfg.task.min_len << "\n";
    os << "task_max_len = " << cfg.task.max_len << "\n";
    os << "task_modulus = " << cfg.task.modulus << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "max_len = " << cfg.max_len << "\n";
    os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
    os << "hidden_dim = " << cfg.hidden_dim << "\n";
    os << "window = " << cfg.window << "\n";
    os << "init = "
       << (cfg.init == InitScheme::zero ? "zero"
                                        : cfg.init == InitScheme::gaussian ? "gaussian" : "copy_prior")
       << "\n";
    os << "init_scale = " << cfg.init_scale << "\n";
    os << "copy_scale = " << cfg.copy_scale << "\n";
    os << "eos_bias = " << cfg.eos_bias << "\n";
    os << "rep_ratio = " << (cfg.rep_ratio == RepRatioMode::plain ? "plain" : "conditioned") << "\n";
    os << "rep_cache = " << (cfg.rep_cache ? "true" : "false") << "\n";
    os << "mapping = " << (cfg.mapping == MappingMode::exact_or_unk ? "exact_or_unk" : "surface_hash")
       << "\n";
    os << "grad_clip = " << cfg.grad_clip << "\n";
    os << "tasks_file = " << cfg.tasks_file << "\n";
    return os.str();
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_config: cannot open " + path.string());
    }
    out << config_to_text(cfg);
}

namespace {

// Per-query rephrased rollouts cached across steps (rep_cache mode). Only the
// tokens and reward are reused; behavior log-probs are recomputed against the
// step's old-policy snapshot so ratios stay anchored to it.
using RepCache = std::map<TokenSeq, Trajectory>;

void recompute_behavior_logps(Trajectory& traj, const PolicyParams& old_params, const TokenSeq& base_ctx) {
    TokenSeq ctx = base_ctx;
    traj.behavior_logps.resize(traj.tokens.size());
    for (size_t t = 0; t < traj.tokens.size(); ++t) {
        traj.behavior_logps[t] = token_log_prob(old_params, ctx, traj.tokens[t]);
        ctx.push_back(traj.tokens[t]);
    }
}

RolloutResult run_rollout_phase(const PolicyParams& old_params, const TaskEnv& env,
                                const std::vector<TaskInstance>& instances, const RunConfig& cfg,
                                uint64_t phase_seed, RepCache* cache) {
    RolloutResult out;
    const TokenMapping projection(env.teacher, env.learner, MappingMode::exact_or_unk);
    const TokenMapping luffy_mapping(env.teacher, env.learner, cfg.mapping);

    for (size_t qi = 0; qi < instances.size(); ++qi) {
        const TaskInstance& task = instances[qi];
        RolloutGroup group;
        group.query = task.instance.query;
        group.ground_truth = task.instance.ground_truth;
        try {
            for (int m = 0; m < cfg.group_size; ++m) {
                Rng rng(derive_seed(phase_seed, {qi, static_cast<uint64_t>(m)}));
                Trajectory traj = sample_trajectory(old_params, group.query, cfg.max_len, kEos, rng);
                traj.reward = verify(traj, group.ground_truth, env.learner);
                group.members.push_back(std::move(traj));
                group.contexts.push_back(group.query);
            }

            InjectionRecord rec;
            if (cfg.method == Method::grpo_only) {
                rec.gamma_fail = failure_rate(group.rewards(), cfg.gate.delta);
                rec.gamma_fail_post = rec.gamma_fail;
            } else if (cfg.method == Method::repo) {
                Rng rep_rng(derive_seed(phase_seed, {qi, kTagRepMember}));
                Trajectory o_rep;
                if (cache != nullptr && cache->count(group.query)) {
                    o_rep = cache->at(group.query);
                } else {
                    o_rep = sample_rephrased(old_params, task.instance, task.trace, env.learner,
                                             projection, cfg.max_len, rep_rng);
                    if (cache != nullptr) {
                        cache->emplace(group.query, o_rep);
                    }
                }
                ++out.rephrase_attempts;
                if (o_rep.reward.value_or(0.0) >= 1.0) {
                    ++out.rephrase_successes;
                }
                TokenSeq rep_ctx;
                if (cfg.rep_ratio == RepRatioMode::plain) {
                    rep_ctx = group.query;
                } else {
                    rep_ctx = build_rephrase_context(group.query, task.trace, env.learner, projection);
                }
                recompute_behavior_logps(o_rep, old_params, rep_ctx);
                auto [gated, record] = apply_gate(std::move(group), std::move(o_rep), rep_ctx, cfg.gate);
                group = std::move(gated);
                rec = record;
            } else {
                auto [injected, record] = luffy_inject(std::move(group), task.trace, luffy_mapping,
                                                       old_params, env.learner, cfg.max_len,
                                                       cfg.gate.delta);
                group = std::move(injected);
                rec = record;
            }
            out.groups.push_back(std::move(group));
            out.records.push_back(rec);
        } catch (const std::exception& e) {
            throw std::runtime_error("rollout_phase: query " + std::to_string(qi) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

RolloutResult rollout_phase(const PolicyParams& old_params, const TaskEnv& env,
                            const std::vector<TaskInstance>& instances, const RunConfig& cfg,
                            uint64_t phase_seed) {
    return run_rollout_phase(old_params, env, instances, cfg, phase_seed, nullptr);
}

UpdateResult update_phase(PolicyParams& params, const PolicyParams* ref_params,
                          const RolloutResult& rollout, AdamState& adam, const RunConfig& cfg,
                          int step) {
    if (rollout.groups.empty()) {
        throw std::invalid_argument("update_phase: no rollout groups");
    }
    UpdateResult out;
    out.metrics.step = step;

    if (!params.all_finite()) {
        out.collapsed = true;
        out.metrics.halted = true;
        return out;
    }

    double value = 0.0;
    std::vector<double> grad(params.flat.size(), 0.0);
    RatioDiagnostics diag;
    for (const RolloutGroup& group : rollout.groups) {
        ObjectiveResult res = grpo_objective(group, params, ref_params, cfg.objective);
        value += res.value;
        for (size_t i = 0; i < grad.size(); ++i) {
            grad[i] += res.gradient[i];
        }
        diag.clamp_events += res.diag.clamp_events;
        diag.clipped_tokens += res.diag.clipped_tokens;
        diag.total_tokens += res.diag.total_tokens;
    }
    const double inv_groups = 1.0 / static_cast<double>(rollout.groups.size());
    value *= inv_groups;
    for (double& g : grad) {
        g *= inv_groups;
    }

    double grad_norm = vector_norm(grad);
    if (!std::isfinite(value) || !std::isfinite(grad_norm)) {
        out.collapsed = true;
        out.metrics.halted = true;
        return out;
    }
    if (cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip) {
        const double scale = cfg.grad_clip / grad_norm;
        for (double& g : grad) {
            g *= scale;
        }
        grad_norm = cfg.grad_clip;
    }

    // Ascent step.
    if (cfg.optimizer == OptimizerKind::sgd) {
        for (size_t i = 0; i < params.flat.size(); ++i) {
            params.flat[i] += cfg.learning_rate * grad[i];
        }
    } else {
        if (adam.m.size() != grad.size()) {
            adam.m.assign(grad.size(), 0.0);
            adam.v.assign(grad.size(), 0.0);
            adam.t = 0;
        }
        ++adam.t;
        const double b1 = cfg.adam_beta1;
        const double b2 = cfg.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
        for (size_t i = 0; i < grad.size(); ++i) {
            adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * grad[i];
            adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * grad[i] * grad[i];
            const double mhat = adam.m[i] / bc1;
            const double vhat = adam.v[i] / bc2;
            params.flat[i] += cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }

    // Step metrics over the final groups.
    double reward_sum = 0.0;
    long reward_count = 0;
    double entropy_sum = 0.0;
    long entropy_count = 0;
    for (const RolloutGroup& group : rollout.groups) {
        for (const Trajectory& traj : group.members) {
            reward_sum += traj.reward.value_or(0.0);
            ++reward_count;
            if (traj.origin == Origin::on_policy) {
                for (double h : traj.step_entropies) {
                    entropy_sum += h;
                    ++entropy_count;
                }
            }
        }
    }
    double gamma_sum = 0.0;
    long fired = 0;
    for (const InjectionRecord& rec : rollout.records) {
        gamma_sum += rec.gamma_fail;
        if (rec.fired) {
            ++fired;
        }
    }
    out.metrics.mean_reward = reward_sum / static_cast<double>(reward_count);
    out.metrics.mean_entropy = entropy_count > 0 ? entropy_sum / static_cast<double>(entropy_count) : 0.0;
    out.metrics.grad_norm = grad_norm;
    out.metrics.clip_fraction =
        diag.total_tokens > 0 ? static_cast<double>(diag.clipped_tokens) / static_cast<double>(diag.total_tokens)
                              : 0.0;
    out.metrics.gamma_fail_mean = gamma_sum / static_cast<double>(rollout.records.size());
    out.metrics.injections_fired = fired;
    if (rollout.rephrase_attempts > 0) {
        out.metrics.rephrased_success_rate = static_cast<double>(rollout.rephrase_successes) /
                                             static_cast<double>(rollout.rephrase_attempts);
    }
    return out;
}

namespace {

PolicyParams make_initial_params(const RunConfig& cfg, const TaskEnv& env) {
    const PolicyDims dims{env.learner.size(), cfg.hidden_dim, cfg.window};
    Rng rng(derive_seed(cfg.seed, {kTagInit}));
    switch (cfg.init) {
        case InitScheme::zero:
            return PolicyParams::zeros(dims);
        case InitScheme::gaussian:
            return PolicyParams::gaussian(dims, cfg.init_scale, rng);
        case InitScheme::copy_prior:
        default:
            return PolicyParams::copy_prior(dims, cfg.init_scale, cfg.copy_scale, kEos, cfg.eos_bias, rng);
    }
}

void save_optimizer_state(const std::filesystem::path& path, const AdamState& adam) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_optimizer_state: cannot open " + path.string());
    }
    out.write(kOptMagic, sizeof(kOptMagic));
    const uint64_t t = static_cast<uint64_t>(adam.t);
    const uint64_t n = adam.m.size();
    out.write(reinterpret_cast<const char*>(&t), 8);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(adam.m.data()), static_cast<std::streamsize>(n * 8));
    out.write(reinterpret_cast<const char*>(adam.v.data()), static_cast<std::streamsize>(n * 8));
}

}  // namespace

RunRecord train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    const TaskEnv env = TaskEnv::make(cfg.task);

    const bool persist = !out_dir.empty();
    std::optional<MetricsWriter> writer;
    if (persist) {
        std::filesystem::create_directories(out_dir);
        save_config(out_dir / "config.cfg", cfg);
        env.learner.save(out_dir / "vocab.txt");
        writer.emplace(out_dir / "metrics.jsonl");
    }

    std::vector<TaskRecord> replay;
    if (!cfg.tasks_file.empty()) {
        replay = load_task_suite(cfg.tasks_file, env);
        if (replay.empty()) {
            throw std::runtime_error("train: tasks_file contains no records");
        }
    }

    RunRecord record;
    record.config = cfg;
    PolicyParams params = make_initial_params(cfg, env);
    PolicyParams ref_params = params;
    const PolicyParams* ref = cfg.objective.beta != 0.0 ? &ref_params : nullptr;
    AdamState adam;
    adam.m.assign(params.flat.size(), 0.0);
    adam.v.assign(params.flat.size(), 0.0);
    RepCache cache;

    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 1; step <= cfg.steps; ++step) {
        const PolicyParams old_params = params;

        std::vector<TaskInstance> instances;
        instances.reserve(static_cast<size_t>(cfg.batch_queries));
        for (int qi = 0; qi < cfg.batch_queries; ++qi) {
            TaskInstance inst;
            if (!replay.empty()) {
                const size_t idx = (static_cast<size_t>(step - 1) * static_cast<size_t>(cfg.batch_queries) +
                                    static_cast<size_t>(qi)) %
                                   replay.size();
                inst.instance = replay[idx].instance;
                inst.trace = replay[idx].trace;
            } else {
                Rng rng(derive_seed(cfg.seed, {kTagTask, static_cast<uint64_t>(step),
                                               static_cast<uint64_t>(qi)}));
                inst.instance = generate_query(env, rng);
                inst.trace = expert_trace(env, inst.instance);
            }
            instances.push_back(std::move(inst));
        }

        RolloutResult rollout =
            run_rollout_phase(old_params, env, instances, cfg,
                              derive_seed(cfg.seed, {kTagRoll, static_cast<uint64_t>(step)}),
                              cfg.rep_cache ? &cache : nullptr);
        UpdateResult update = update_phase(params, ref, rollout, adam, cfg, step);

        if (update.collapsed) {
            record.halted = true;
            record.collapse_step = step;
            if (writer) {
                writer->write_halt_marker(step);
            }
            break;
        }
        record.metrics.push_back(update.metrics);
        if (writer) {
            writer->write(update.metrics);
        }
        if (persist && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            params.save(out_dir / ("step_" + std::to_string(step) + ".ckpt"));
        }
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.final_params = params;

    if (persist) {
        params.save(out_dir / "final.ckpt");
        if (cfg.optimizer == OptimizerKind::adam) {
            save_optimizer_state(out_dir / "final.opt", adam);
        }
        nlohmann::json j;
        j["steps_completed"] = record.metrics.size();
        j["halted"] = record.halted;
        if (record.collapse_step.has_value()) {
            j["collapse_step"] = *record.collapse_step;
        }
        j["wall_seconds"] = record.wall_seconds;
        std::ofstream out(out_dir / "run.json", std::ios::binary);
        out << j.dump(2) << '\n';
    }
    return record;
}

GradCheckReport grad_check(const RunConfig& cfg, int instances) {
    const TaskEnv env = TaskEnv::make(cfg.task);
    const PolicyDims dims{env.learner.size(), cfg.hidden_dim, cfg.window};
    if (PolicyParams::param_count(dims) > 500) {
        throw std::invalid_argument("grad_check: net too large (" +
                                    std::to_string(PolicyParams::param_count(dims)) +
                                    " params, limit 500)");
    }

    GradCheckReport report;
    for (int k = 0; k < instances; ++k) {
        Rng rng(derive_seed(cfg.seed, {kTagGradCheck, static_cast<uint64_t>(k)}));
        PolicyParams old_params = PolicyParams::gaussian(dims, 0.3, rng);
        PolicyParams params = old_params;
        // Small perturbation keeps the ratios inside the clip band, away from
        // the min/clip kink where finite differences are ill-defined.
        for (double& x : params.flat) {
            x += rng.normal(0.0, 0.003);
        }

        RolloutGroup group;
        const QueryInstance q = generate_query(env, rng);
        group.query = q.query;
        group.ground_truth = q.ground_truth;
        const int G = std::max(2, std::min(cfg.group_size, 4));
        for (int m = 0; m < G; ++m) {
            Trajectory traj = sample_trajectory(old_params, group.query, std::min(cfg.max_len, 6), kEos, rng);
            group.members.push_back(std::move(traj));
            group.contexts.push_back(group.query);
        }
        if (k % 5 == 0) {
            // Flat-reward group: zero advantages, zero gradient on both routes.
            for (auto& m : group.members) {
                m.reward = 1.0;
            }
        } else {
            group.members[0].reward = 1.0;
            group.members[1].reward = 0.0;
            for (size_t m = 2; m < group.members.size(); ++m) {
                group.members[m].reward = rng.uniform() < 0.5 ? 1.0 : 0.0;
            }
        }

        ObjectiveConfig obj = cfg.objective;
        PolicyParams ref = PolicyParams::gaussian(dims, 0.3, rng);
        const PolicyParams* ref_ptr = nullptr;
        if (k % 2 == 1) {
            obj.beta = 0.1;  // exercise the KL path on half the instances
            ref_ptr = &ref;
        }

        const ObjectiveResult res = grpo_objective(group, params, ref_ptr, obj);
        const std::vector<double> fd = finite_difference_gradient(
            params, [&](const PolicyParams& p) { return grpo_objective(group, p, ref_ptr, obj).value; },
            1e-4);

        double diff = 0.0;
        for (size_t i = 0; i < fd.size(); ++i) {
            const double d = res.gradient[i] - fd[i];
            diff += d * d;
        }
        const double na = vector_norm(res.gradient);
        const double nf = vector_norm(fd);
        const double denom = std::max(na, nf);
        const double rel = denom < 1e-12 ? 0.0 : std::sqrt(diff) / denom;
        report.errors.push_back(rel);
    }
    std::sort(report.errors.rbegin(), report.errors.rend());
    report.max_rel_error = report.errors.empty() ? 0.0 : report.errors.front();
    report.pass = report.max_rel_error < 1e-4;

    std::ostringstream os;
    os << "gradient check: " << instances << " instances, analytic vs central differences (h=1e-4)\n";
    os << "max relative error: " << report.max_rel_error << (report.pass ? "  [pass]" : "  [FAIL]") << "\n";
    os << "per-instance relative errors (descending):\n";
    for (double e : report.errors) {
        os << "  " << e << "\n";
    }
    report.text = os.str();
    return report;
}

}  // namespace grouprl
