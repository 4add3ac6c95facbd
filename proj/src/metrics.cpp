#include "grouprl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "grouprl/tasks.hpp"

namespace grouprl {

namespace {

using nlohmann::json;

void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::runtime_error(msg);
    }
}

json record_to_json(const MetricsRecord& r) {
    json j;
    j["step"] = r.step;
    j["mean_reward"] = r.mean_reward;
    j["mean_entropy"] = r.mean_entropy;
    j["grad_norm"] = r.grad_norm;
    j["clip_fraction"] = r.clip_fraction;
    j["gamma_fail_mean"] = r.gamma_fail_mean;
    j["injections_fired"] = r.injections_fired;
    if (r.rephrased_success_rate.has_value()) {
        j["rephrased_success_rate"] = *r.rephrased_success_rate;
    }
    j["halted"] = r.halted;
    return j;
}

MetricsRecord record_from_json(const json& j, double entropy_cap, const std::string& where) {
    MetricsRecord r;
    r.step = j.at("step").get<int>();
    r.mean_reward = j.at("mean_reward").get<double>();
    r.mean_entropy = j.at("mean_entropy").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.clip_fraction = j.at("clip_fraction").get<double>();
    r.gamma_fail_mean = j.at("gamma_fail_mean").get<double>();
    r.injections_fired = j.at("injections_fired").get<long>();
    if (j.contains("rephrased_success_rate")) {
        r.rephrased_success_rate = j.at("rephrased_success_rate").get<double>();
    }
    r.halted = j.at("halted").get<bool>();

    require(r.step >= 1, where + ": step must be >= 1");
    require(r.mean_reward >= 0.0 && r.mean_reward <= 1.0, where + ": mean_reward out of [0,1]");
    require(std::isfinite(r.mean_entropy) && r.mean_entropy >= 0.0 && r.mean_entropy <= entropy_cap + 1e-12,
            where + ": mean_entropy out of bounds");
    require(std::isfinite(r.grad_norm) && r.grad_norm >= 0.0, where + ": grad_norm must be finite and >= 0");
    require(r.clip_fraction >= 0.0 && r.clip_fraction <= 1.0, where + ": clip_fraction out of [0,1]");
    require(r.gamma_fail_mean >= 0.0 && r.gamma_fail_mean <= 1.0, where + ": gamma_fail_mean out of [0,1]");
    require(r.injections_fired >= 0, where + ": injections_fired must be >= 0");
    if (r.rephrased_success_rate.has_value()) {
        require(*r.rephrased_success_rate >= 0.0 && *r.rephrased_success_rate <= 1.0,
                where + ": rephrased_success_rate out of [0,1]");
    }
    return r;
}

double median(std::vector<double> xs) {
    if (xs.empty()) {
        return 0.0;
    }
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double least_squares_slope(const std::vector<MetricsRecord>& records, size_t from) {
    if (records.size() < from + 2) {
        return 0.0;
    }
    double mx = 0.0;
    double my = 0.0;
    const size_t n = records.size() - from;
    for (size_t i = from; i < records.size(); ++i) {
        mx += records[i].step;
        my += records[i].mean_reward;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double num = 0.0;
    double den = 0.0;
    for (size_t i = from; i < records.size(); ++i) {
        const double dx = records[i].step - mx;
        num += dx * (records[i].mean_reward - my);
        den += dx * dx;
    }
    return den > 0.0 ? num / den : 0.0;
}

std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

double entropy_cap_for_config(const std::map<std::string, std::string>& config) {
    auto it = config.find("task_kind");
    if (it == config.end()) {
        return std::numeric_limits<double>::infinity();
    }
    TaskSpec spec;
    spec.kind = task_kind_from_name(it->second);
    const TaskEnv env = TaskEnv::make(spec);
    return std::log(static_cast<double>(env.learner.size()));
}

}  // namespace

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) {
        throw std::runtime_error("MetricsWriter: destination unwritable: " + path.string());
    }
}

void MetricsWriter::write(const MetricsRecord& record) {
    out_ << record_to_json(record).dump() << '\n';
    out_.flush();
    if (!out_) {
        throw std::runtime_error("MetricsWriter: write failed: " + path_.string());
    }
}

void MetricsWriter::write_halt_marker(int step) {
    json j;
    j["halt_step"] = step;
    out_ << j.dump() << '\n';
    out_.flush();
}

MetricsFile read_metrics(const std::filesystem::path& path, double entropy_cap) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("read_metrics: cannot open " + path.string());
    }
    MetricsFile out;
    std::string line;
    size_t lineno = 0;
    int prev_step = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, true);
        if (j.contains("halt_step")) {
            out.halt_step = j.at("halt_step").get<int>();
            continue;
        }
        MetricsRecord r = record_from_json(j, entropy_cap, where);
        require(r.step > prev_step, where + ": steps must strictly increase");
        prev_step = r.step;
        out.records.push_back(r);
    }
    return out;
}

RunData load_run(const std::filesystem::path& dir) {
    RunData run;
    run.dir = dir;
    run.name = dir.filename().string();
    if (run.name.empty()) {
        run.name = dir.parent_path().filename().string();
    }

    const auto config_path = dir / "config.cfg";
    std::ifstream cfg(config_path);
    if (!cfg) {
        throw std::runtime_error("load_run: missing " + config_path.string());
    }
    std::string line;
    while (std::getline(cfg, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        run.config[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    run.method = run.config.count("method") ? run.config.at("method") : "";
    if (run.config.count("seed")) {
        run.seed = std::stoull(run.config.at("seed"));
    }

    const MetricsFile mf = read_metrics(dir / "metrics.jsonl", entropy_cap_for_config(run.config));
    run.records = mf.records;
    run.halt_step = mf.halt_step;
    return run;
}

bool ComparisonReport::all_applicable_hold() const {
    auto ok = [](const std::vector<SeedVerdict>& vs) {
        return std::all_of(vs.begin(), vs.end(), [](const SeedVerdict& v) { return v.value; });
    };
    return ok(grad_norm_explosion) && ok(reward_plateau) && ok(entropy_in_bounds) && ok(reward_gap);
}

namespace {

RunSummary summarize(const RunData& run) {
    RunSummary s;
    s.name = run.name;
    s.method = run.method;
    s.seed = run.seed;
    s.steps = static_cast<int>(run.records.size());
    s.collapse_step = run.halt_step;

    std::vector<double> rewards;
    std::vector<double> grad_norms;
    double emin = std::numeric_limits<double>::infinity();
    double emax = -std::numeric_limits<double>::infinity();
    for (const auto& r : run.records) {
        rewards.push_back(r.mean_reward);
        grad_norms.push_back(r.grad_norm);
        emin = std::min(emin, r.mean_entropy);
        emax = std::max(emax, r.mean_entropy);
    }
    if (!rewards.empty()) {
        const size_t tail = std::min<size_t>(50, rewards.size());
        double acc = 0.0;
        for (size_t i = rewards.size() - tail; i < rewards.size(); ++i) {
            acc += rewards[i];
        }
        s.final50_mean_reward = acc / static_cast<double>(tail);
        s.median_reward = median(rewards);
        s.median_grad_norm = median(grad_norms);
        s.max_grad_norm = *std::max_element(grad_norms.begin(), grad_norms.end());
        s.min_entropy = emin;
        s.max_entropy = emax;
        s.trailing_reward_slope = least_squares_slope(run.records, rewards.size() - rewards.size() / 4);
    }
    return s;
}

const RunData* find_run(const std::vector<RunData>& runs, const std::string& method, uint64_t seed) {
    for (const auto& r : runs) {
        if (r.method == method && r.seed == seed) {
            return &r;
        }
    }
    return nullptr;
}

}  // namespace

ComparisonReport compare_runs(const std::vector<RunData>& runs) {
    if (runs.size() < 2) {
        throw std::invalid_argument("compare_runs: need at least 2 runs");
    }

    // All runs must be over the same task; methods must cover identical seed
    // sets so per-seed comparisons are meaningful.
    static const char* task_keys[] = {"task_kind", "task_min_len", "task_max_len",
                                      "task_modulus", "max_len"};
    for (const char* key : task_keys) {
        std::set<std::string> values;
        for (const auto& r : runs) {
            values.insert(r.config.count(key) ? r.config.at(key) : "");
        }
        if (values.size() > 1) {
            throw std::invalid_argument(std::string("compare_runs: runs differ in ") + key);
        }
    }
    std::map<std::string, std::set<uint64_t>> seeds_by_method;
    for (const auto& r : runs) {
        seeds_by_method[r.method].insert(r.seed);
    }
    const auto& first_seeds = seeds_by_method.begin()->second;
    for (const auto& [method, seeds] : seeds_by_method) {
        if (seeds != first_seeds) {
            throw std::invalid_argument("compare_runs: seed sets differ between methods");
        }
    }

    ComparisonReport report;
    for (const auto& r : runs) {
        report.runs.push_back(summarize(r));
        if (r.halt_step.has_value()) {
            report.collapses.push_back(r.name + " collapsed at step " + std::to_string(*r.halt_step));
        }
    }
    std::sort(report.runs.begin(), report.runs.end(), [](const RunSummary& a, const RunSummary& b) {
        return std::tie(a.method, a.seed) < std::tie(b.method, b.seed);
    });

    const bool has_repo = seeds_by_method.count("repo") > 0;
    const bool has_grpo = seeds_by_method.count("grpo") > 0;
    const bool has_luffy = seeds_by_method.count("luffy") > 0;

    double entropy_cap = std::numeric_limits<double>::infinity();
    if (!runs.empty()) {
        entropy_cap = entropy_cap_for_config(runs.front().config);
    }

    for (uint64_t seed : first_seeds) {
        if (has_luffy && has_repo) {
            const RunData* luffy = find_run(runs, "luffy", seed);
            const RunData* repo = find_run(runs, "repo", seed);
            const RunSummary ls = summarize(*luffy);
            const RunSummary rs = summarize(*repo);
            SeedVerdict v;
            v.seed = seed;
            const bool collapse_route = luffy->halt_step.has_value() && !repo->halt_step.has_value();
            const bool ratio_route =
                ls.median_grad_norm >= kGradNormExplosionRatio * rs.median_grad_norm &&
                rs.median_grad_norm >= 0.0;
            v.value = collapse_route || ratio_route;
            std::ostringstream os;
            os << "luffy median grad_norm " << ls.median_grad_norm << " vs repo " << rs.median_grad_norm
               << (collapse_route ? " (luffy collapsed, repo completed)" : "");
            v.detail = os.str();
            report.grad_norm_explosion.push_back(v);
        }
        if (has_grpo) {
            const RunData* grpo = find_run(runs, "grpo", seed);
            const RunSummary gs = summarize(*grpo);
            SeedVerdict v;
            v.seed = seed;
            v.value = gs.trailing_reward_slope < kPlateauSlopeThreshold;
            v.detail = "grpo trailing slope " + format_double(gs.trailing_reward_slope);
            report.reward_plateau.push_back(v);
        }
        if (has_repo) {
            const RunData* repo = find_run(runs, "repo", seed);
            const RunSummary rs = summarize(*repo);
            SeedVerdict v;
            v.seed = seed;
            const double floor = kEntropyFloorFraction * entropy_cap;
            v.value = std::isfinite(entropy_cap) && rs.min_entropy >= floor &&
                      rs.max_entropy <= entropy_cap + 1e-12;
            v.detail = "repo entropy range [" + format_double(rs.min_entropy) + ", " +
                       format_double(rs.max_entropy) + "], floor " + format_double(floor);
            report.entropy_in_bounds.push_back(v);
        }
        if (has_repo && has_grpo) {
            const RunSummary rs = summarize(*find_run(runs, "repo", seed));
            const RunSummary gs = summarize(*find_run(runs, "grpo", seed));
            SeedVerdict v;
            v.seed = seed;
            const double gap = rs.final50_mean_reward - gs.final50_mean_reward;
            v.value = gap >= kRewardGapThreshold;
            v.detail = "final-50 reward gap " + format_double(gap);
            report.reward_gap.push_back(v);
        }
    }
    return report;
}

std::string ComparisonReport::to_text() const {
    std::ostringstream os;
    os << "run comparison report\n";
    os << "thresholds (repository constants, calibrated for the desk-scale presets):\n"
       << "  grad-norm explosion ratio >= " << kGradNormExplosionRatio << "\n"
       << "  plateau slope < " << kPlateauSlopeThreshold << " reward/step over the final 25% of steps\n"
       << "  entropy floor = " << kEntropyFloorFraction << " * ln|V|\n"
       << "  reward gap >= " << kRewardGapThreshold << " (final-50-step means)\n\n";
    for (const auto& s : runs) {
        os << s.name << " (method=" << s.method << ", seed=" << s.seed << "): steps=" << s.steps
           << " final50_reward=" << format_double(s.final50_mean_reward)
           << " median_grad_norm=" << format_double(s.median_grad_norm)
           << " entropy=[" << format_double(s.min_entropy) << ", " << format_double(s.max_entropy) << "]";
        if (s.collapse_step.has_value()) {
            os << " collapsed_at=" << *s.collapse_step;
        }
        os << "\n";
    }
    auto emit = [&os](const char* name, const std::vector<SeedVerdict>& vs) {
        for (const auto& v : vs) {
            os << name << " seed=" << v.seed << ": " << (v.value ? "PASS" : "FAIL") << " (" << v.detail
               << ")\n";
        }
    };
    os << "\n";
    emit("grad_norm_explosion", grad_norm_explosion);
    emit("reward_plateau", reward_plateau);
    emit("entropy_in_bounds", entropy_in_bounds);
    emit("reward_gap", reward_gap);
    for (const auto& c : collapses) {
        os << "collapse: " << c << "\n";
    }
    return os.str();
}

std::string ComparisonReport::to_json() const {
    json j;
    j["thresholds"] = {{"grad_norm_explosion_ratio", kGradNormExplosionRatio},
                       {"plateau_slope", kPlateauSlopeThreshold},
                       {"entropy_floor_fraction", kEntropyFloorFraction},
                       {"reward_gap", kRewardGapThreshold},
                       {"note", "repository constants calibrated for the desk-scale presets"}};
    j["runs"] = json::array();
    for (const auto& s : runs) {
        json r;
        r["name"] = s.name;
        r["method"] = s.method;
        r["seed"] = s.seed;
        r["steps"] = s.steps;
        r["final50_mean_reward"] = s.final50_mean_reward;
        r["median_reward"] = s.median_reward;
        r["median_grad_norm"] = s.median_grad_norm;
        r["max_grad_norm"] = s.max_grad_norm;
        r["min_entropy"] = s.min_entropy;
        r["max_entropy"] = s.max_entropy;
        r["trailing_reward_slope"] = s.trailing_reward_slope;
        if (s.collapse_step.has_value()) {
            r["collapse_step"] = *s.collapse_step;
        }
        j["runs"].push_back(r);
    }
    auto verdicts = [](const std::vector<SeedVerdict>& vs) {
        json arr = json::array();
        for (const auto& v : vs) {
            arr.push_back({{"seed", v.seed}, {"pass", v.value}, {"detail", v.detail}});
        }
        return arr;
    };
    j["grad_norm_explosion"] = verdicts(grad_norm_explosion);
    j["reward_plateau"] = verdicts(reward_plateau);
    j["entropy_in_bounds"] = verdicts(entropy_in_bounds);
    j["reward_gap"] = verdicts(reward_gap);
    j["collapses"] = collapses;
    return j.dump(2);
}

void emit_plot_data(const std::vector<RunData>& runs, const std::string& quantity,
                    const std::filesystem::path& out_dir) {
    double MetricsRecord::*field = nullptr;
    if (quantity == "reward") {
        field = &MetricsRecord::mean_reward;
    } else if (quantity == "entropy") {
        field = &MetricsRecord::mean_entropy;
    } else if (quantity == "grad_norm") {
        field = &MetricsRecord::grad_norm;
    } else {
        throw std::invalid_argument("emit_plot_data: unknown quantity \"" + quantity + "\"");
    }
    std::filesystem::create_directories(out_dir);

    double xmax = 1.0;
    double ymin = 0.0;
    double ymax = 1e-12;
    for (const auto& run : runs) {
        const auto table = out_dir / (quantity + "__" + run.name + ".tsv");
        std::ofstream out(table, std::ios::binary);
        if (!out) {
            throw std::runtime_error("emit_plot_data: cannot open " + table.string());
        }
        out << "step\t" << quantity << "\n";
        for (const auto& r : run.records) {
            out << r.step << '\t' << format_double(r.*field) << '\n';
            xmax = std::max(xmax, static_cast<double>(r.step));
            ymax = std::max(ymax, r.*field);
            ymin = std::min(ymin, r.*field);
        }
    }

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    const double width = 720.0;
    const double height = 440.0;
    const double ml = 60.0;
    const double mr = 20.0;
    const double mt = 30.0;
    const double mb = 40.0;
    auto sx = [&](double step) { return ml + (width - ml - mr) * (step / xmax); };
    auto sy = [&](double v) {
        const double span = ymax - ymin;
        return height - mb - (height - mt - mb) * ((v - ymin) / (span > 0 ? span : 1.0));
    };

    std::ofstream svg(out_dir / (quantity + ".svg"), std::ios::binary);
    if (!svg) {
        throw std::runtime_error("emit_plot_data: cannot open svg output");
    }
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr << "\" y2=\""
        << height - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << height - mb
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">step</text>\n";
    svg << "<text x=\"14\" y=\"" << height / 2 << "\" transform=\"rotate(-90 14 " << height / 2
        << ")\" text-anchor=\"middle\">" << quantity << "</text>\n";
    svg << "<text x=\"" << ml << "\" y=\"" << height - mb + 16 << "\">0</text>\n";
    svg << "<text x=\"" << width - mr << "\" y=\"" << height - mb + 16 << "\" text-anchor=\"end\">"
        << static_cast<long>(xmax) << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << height - mb << "\" text-anchor=\"end\">"
        << format_double(ymin) << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 4 << "\" text-anchor=\"end\">" << format_double(ymax)
        << "</text>\n";
    size_t color = 0;
    double legend_y = mt;
    for (const auto& run : runs) {
        const char* stroke = palette[color % (sizeof(palette) / sizeof(palette[0]))];
        svg << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& r : run.records) {
            svg << sx(r.step) << ',' << sy(r.*field) << ' ';
        }
        svg << "\"/>\n";
        svg << "<text x=\"" << width - mr - 4 << "\" y=\"" << legend_y << "\" text-anchor=\"end\" fill=\""
            << stroke << "\">" << run.name << "</text>\n";
        legend_y += 16.0;
        ++color;
    }
    svg << "</svg>\n";
}

}  // namespace grouprl
