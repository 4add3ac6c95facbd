// Command-line surface: train / grad-check / compare / plot / gen-tasks.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 run collapse
// (train), 3 verdict failure (compare --assert, failed grad-check).

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "grouprl/metrics.hpp"
#include "grouprl/trainer.hpp"

namespace {

using namespace grouprl;

// Compact task spec: kind[:key=value,...] with keys min, max, mod, difficulty.
TaskSpec parse_task_spec(const std::string& text) {
    const auto colon = text.find(':');
    TaskSpec spec;
    spec.kind = task_kind_from_name(text.substr(0, colon));
    if (colon != std::string::npos) {
        std::string rest = text.substr(colon + 1);
        size_t pos = 0;
        while (pos < rest.size()) {
            const auto comma = rest.find(',', pos);
            const std::string item = rest.substr(pos, comma == std::string::npos ? std::string::npos
                                                                                 : comma - pos);
            const auto eq = item.find('=');
            if (eq == std::string::npos) {
                throw std::invalid_argument("task spec: expected key=value in \"" + item + "\"");
            }
            const std::string key = item.substr(0, eq);
            const std::string value = item.substr(eq + 1);
            if (key == "min") {
                spec.min_len = std::stoi(value);
            } else if (key == "max") {
                spec.max_len = std::stoi(value);
            } else if (key == "mod") {
                spec.modulus = std::stoi(value);
            } else if (key == "difficulty") {
                const TaskSpec preset = TaskSpec::with_difficulty(
                    spec.kind, value == "hard" ? Difficulty::hard : Difficulty::easy);
                spec.min_len = preset.min_len;
                spec.max_len = preset.max_len;
            } else {
                throw std::invalid_argument("task spec: unknown key " + key);
            }
            if (comma == std::string::npos) {
                break;
            }
            pos = comma + 1;
        }
    }
    spec.validate();
    return spec;
}

int cmd_train(const std::string& config_path, const std::string& method_override,
              long long seed_override, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    if (!method_override.empty()) {
        cfg.method = method_from_name(method_override);
        cfg.gate.method = cfg.method;
    }
    if (seed_override >= 0) {
        cfg.seed = static_cast<uint64_t>(seed_override);
    }
    const RunRecord record = train(cfg, std::filesystem::path(out_dir));
    if (!record.metrics.empty()) {
        const MetricsRecord& last = record.metrics.back();
        std::cout << "completed " << record.metrics.size() << "/" << cfg.steps << " steps, final reward "
                  << last.mean_reward << ", final entropy " << last.mean_entropy << ", grad norm "
                  << last.grad_norm << "\n";
    }
    if (record.halted) {
        std::cerr << "run collapsed at step " << record.collapse_step.value_or(-1)
                  << " (non-finite objective or gradient)\n";
        return 2;
    }
    return 0;
}

int cmd_grad_check(const std::string& config_path) {
    const RunConfig cfg = load_config(config_path);
    const GradCheckReport report = grad_check(cfg);
    std::cout << report.text;
    return report.pass ? 0 : 3;
}

int cmd_compare(const std::vector<std::string>& run_dirs, const std::string& report_path,
                bool do_assert) {
    std::vector<RunData> runs;
    runs.reserve(run_dirs.size());
    for (const auto& dir : run_dirs) {
        runs.push_back(load_run(dir));
    }
    const ComparisonReport report = compare_runs(runs);
    std::cout << report.to_text();
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::binary);
        if (!out) {
            throw std::runtime_error("cannot open report file " + report_path);
        }
        out << report.to_json() << '\n';
    }
    if (do_assert && !report.all_applicable_hold()) {
        std::cerr << "compare --assert: at least one verdict failed\n";
        return 3;
    }
    return 0;
}

int cmd_plot(const std::vector<std::string>& run_dirs, const std::string& quantity,
             const std::string& out_dir) {
    std::vector<RunData> runs;
    runs.reserve(run_dirs.size());
    for (const auto& dir : run_dirs) {
        runs.push_back(load_run(dir));
    }
    emit_plot_data(runs, quantity, out_dir);
    std::cout << "wrote " << quantity << " tables and chart to " << out_dir << "\n";
    return 0;
}

int cmd_gen_tasks(const std::string& task_spec, int count, long long seed, const std::string& out) {
    const TaskSpec spec = parse_task_spec(task_spec);
    const TaskEnv env = TaskEnv::make(spec);
    std::vector<TaskRecord> records;
    records.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(static_cast<uint64_t>(seed), {static_cast<uint64_t>(i)}));
        TaskRecord rec;
        rec.instance = generate_query(env, rng);
        rec.trace = expert_trace(env, rec.instance);
        records.push_back(std::move(rec));
    }
    save_task_suite(out, env, records);
    std::cout << "wrote " << records.size() << " task records to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale group-based RL optimizer comparison (grpo / repo / luffy)"};
    app.require_subcommand(1);

    std::string config_path;
    std::string method_override;
    long long seed_override = -1;
    std::string out_dir;
    auto* train_cmd = app.add_subcommand("train", "run a training loop from a config file");
    train_cmd->add_option("--config", config_path, "config file")->required();
    train_cmd->add_option("--method", method_override, "override method: grpo|repo|luffy")
        ->check(CLI::IsMember({"grpo", "repo", "luffy"}));
    train_cmd->add_option("--seed", seed_override, "override master seed");
    train_cmd->add_option("--out", out_dir, "run output directory");

    std::string gc_config;
    auto* gc_cmd = app.add_subcommand("grad-check", "analytic vs finite-difference gradient check");
    gc_cmd->add_option("--config", gc_config, "config file (small net)")->required();

    std::vector<std::string> compare_dirs;
    std::string report_path;
    bool do_assert = false;
    auto* compare_cmd = app.add_subcommand("compare", "stability comparison across run directories");
    compare_cmd->add_option("--runs", compare_dirs, "run directories")->required()->expected(-1);
    compare_cmd->add_option("--report", report_path, "report output file (json)");
    compare_cmd->add_flag("--assert", do_assert, "exit 3 when an applicable verdict fails");

    std::vector<std::string> plot_dirs;
    std::string quantity;
    std::string plot_out;
    auto* plot_cmd = app.add_subcommand("plot", "emit per-run tables and an overlay chart");
    plot_cmd->add_option("--runs", plot_dirs, "run directories")->required()->expected(-1);
    plot_cmd->add_option("--quantity", quantity, "reward|entropy|grad_norm")
        ->required()
        ->check(CLI::IsMember({"reward", "entropy", "grad_norm"}));
    plot_cmd->add_option("--out", plot_out, "output directory")->required();

    std::string task_spec;
    int count = 0;
    long long gen_seed = 1;
    std::string gen_out;
    auto* gen_cmd = app.add_subcommand("gen-tasks", "generate a fixed replayable task dataset");
    gen_cmd->add_option("--task", task_spec, "task spec, e.g. modular_chain:min=2,max=2,mod=7")->required();
    gen_cmd->add_option("--count", count, "number of records")->required()->check(CLI::PositiveNumber);
    gen_cmd->add_option("--seed", gen_seed, "generator seed");
    gen_cmd->add_option("--out", gen_out, "output file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (*train_cmd) {
            return cmd_train(config_path, method_override, seed_override, out_dir);
        }
        if (*gc_cmd) {
            return cmd_grad_check(gc_config);
        }
        if (*compare_cmd) {
            return cmd_compare(compare_dirs, report_path, do_assert);
        }
        if (*plot_cmd) {
            return cmd_plot(plot_dirs, quantity, plot_out);
        }
        if (*gen_cmd) {
            return cmd_gen_tasks(task_spec, count, gen_seed, gen_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
