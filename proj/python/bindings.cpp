#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "grouprl/metrics.hpp"
#include "grouprl/trainer.hpp"

namespace py = pybind11;
using namespace grouprl;

namespace {

py::dict record_to_dict(const MetricsRecord& r) {
    py::dict d;
    d["step"] = r.step;
    d["mean_reward"] = r.mean_reward;
    d["mean_entropy"] = r.mean_entropy;
    d["grad_norm"] = r.grad_norm;
    d["clip_fraction"] = r.clip_fraction;
    d["gamma_fail_mean"] = r.gamma_fail_mean;
    d["injections_fired"] = r.injections_fired;
    if (r.rephrased_success_rate.has_value()) {
        d["rephrased_success_rate"] = *r.rephrased_success_rate;
    }
    d["halted"] = r.halted;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "group-based RL optimizer comparison engine (grpo / repo / luffy)";

    m.def(
        "group_advantages",
        [](const std::vector<double>& rewards, double adv_eps) {
            const GroupAdvantages a = group_advantages(rewards, adv_eps);
            return py::make_tuple(a.values, a.mean, a.stddev);
        },
        py::arg("rewards"), py::arg("adv_eps") = 1e-6,
        "Group-relative advantages (values, mean, population std).");

    m.def("failure_rate",
          [](const std::vector<double>& rewards, double delta) { return failure_rate(rewards, delta); },
          py::arg("rewards"), py::arg("delta") = 0.5);

    m.def("clipped_term", &clipped_term, py::arg("ratio"), py::arg("advantage"), py::arg("clip_eps") = 0.2);
    m.def("importance_ratio",
          [](double logp_new, double logp_old) { return importance_ratio(logp_new, logp_old); },
          py::arg("logp_new"), py::arg("logp_old"));
    m.def("kl_penalty_term", &kl_penalty_term, py::arg("logp_theta"), py::arg("logp_ref"));

    m.def(
        "strip_meta_tokens",
        [](const TokenSeq& seq, const std::string& task_kind) {
            TaskSpec spec;
            spec.kind = task_kind_from_name(task_kind);
            const TaskEnv env = TaskEnv::make(spec);
            return strip_meta_tokens(seq, env.learner);
        },
        py::arg("tokens"), py::arg("task_kind") = "modular_chain");

    m.def(
        "train",
        [](const std::string& config_path, const std::string& out_dir) {
            const RunConfig cfg = load_config(config_path);
            const RunRecord record =
                train(cfg, out_dir.empty() ? std::filesystem::path{} : std::filesystem::path(out_dir));
            py::list metrics;
            for (const auto& r : record.metrics) {
                metrics.append(record_to_dict(r));
            }
            py::dict result;
            result["metrics"] = metrics;
            result["halted"] = record.halted;
            if (record.collapse_step.has_value()) {
                result["collapse_step"] = *record.collapse_step;
            }
            return result;
        },
        py::arg("config_path"), py::arg("out_dir") = "",
        "Run a full training loop from a config file; returns metrics records.");

    m.def(
        "train_text",
        [](const std::string& config_text, const std::string& out_dir) {
            const RunConfig cfg = parse_config_text(config_text);
            const RunRecord record =
                train(cfg, out_dir.empty() ? std::filesystem::path{} : std::filesystem::path(out_dir));
            py::list metrics;
            for (const auto& r : record.metrics) {
                metrics.append(record_to_dict(r));
            }
            py::dict result;
            result["metrics"] = metrics;
            result["halted"] = record.halted;
            return result;
        },
        py::arg("config_text"), py::arg("out_dir") = "",
        "Same as train(), from config text instead of a file.");

    m.def(
        "grad_check",
        [](const std::string& config_path, int instances) {
            const GradCheckReport report = grad_check(load_config(config_path), instances);
            py::dict d;
            d["max_rel_error"] = report.max_rel_error;
            d["pass"] = report.pass;
            d["errors"] = report.errors;
            return d;
        },
        py::arg("config_path"), py::arg("instances") = 50);

    m.def(
        "read_metrics",
        [](const std::string& path) {
            const MetricsFile mf = read_metrics(path);
            py::list out;
            for (const auto& r : mf.records) {
                out.append(record_to_dict(r));
            }
            return out;
        },
        py::arg("path"));
}
