#ifndef GROUPRL_METRICS_HPP
#define GROUPRL_METRICS_HPP

#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace grouprl {

// Per-step stability snapshot.
struct MetricsRecord {
    int step = 0;
    double mean_reward = 0.0;    // [0, 1]
    double mean_entropy = 0.0;   // [0, ln |V|]
    double grad_norm = 0.0;      // >= 0
    double clip_fraction = 0.0;  // [0, 1]
    double gamma_fail_mean = 0.0;
    long injections_fired = 0;
    std::optional<double> rephrased_success_rate;
    bool halted = false;

    bool operator==(const MetricsRecord&) const = default;
};

// Append-only line-delimited writer, flushed per record so a halted run
// preserves every completed step. Construction fails when the destination is
// unwritable.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::filesystem::path& path);
    void write(const MetricsRecord& record);
    void write_halt_marker(int step);

private:
    std::ofstream out_;
    std::filesystem::path path_;
};

struct MetricsFile {
    std::vector<MetricsRecord> records;
    std::optional<int> halt_step;
};

// Parses a metrics file, validating every record against the MetricsRecord
// bounds (entropy against entropy_cap when finite). Throws on violations.
MetricsFile read_metrics(const std::filesystem::path& path,
                         double entropy_cap = std::numeric_limits<double>::infinity());

// A completed (or halted) training run directory.
struct RunData {
    std::filesystem::path dir;
    std::string name;
    std::map<std::string, std::string> config;
    std::vector<MetricsRecord> records;
    std::optional<int> halt_step;
    std::string method;
    uint64_t seed = 0;
};

RunData load_run(const std::filesystem::path& dir);

// Report thresholds. These are repository constants chosen for the desk-scale
// experiments, not values with any external source; the report states this.
inline constexpr double kGradNormExplosionRatio = 3.0;
inline constexpr double kPlateauSlopeThreshold = 5e-4;  // reward per step, final 25% of steps
inline constexpr double kEntropyFloorFraction = 0.05;   // of ln |V|
inline constexpr double kRewardGapThreshold = 0.2;      // repo minus grpo, final-50-step means

struct RunSummary {
    std::string name;
    std::string method;
    uint64_t seed = 0;
    int steps = 0;
    double final50_mean_reward = 0.0;
    double median_reward = 0.0;
    double median_grad_norm = 0.0;
    double max_grad_norm = 0.0;
    double min_entropy = 0.0;
    double max_entropy = 0.0;
    double trailing_reward_slope = 0.0;  // least-squares, final 25% of steps
    std::optional<int> collapse_step;
};

struct SeedVerdict {
    uint64_t seed = 0;
    bool value = false;
    std::string detail;
};

struct ComparisonReport {
    std::vector<RunSummary> runs;
    // luffy median grad norm >= ratio threshold x repo's, or luffy collapsed
    // while repo completed; evaluated per seed when both methods are present.
    std::vector<SeedVerdict> grad_norm_explosion;
    // grpo_only trailing reward slope below the plateau threshold.
    std::vector<SeedVerdict> reward_plateau;
    // repo entropy within [floor, ln |V|] at every step.
    std::vector<SeedVerdict> entropy_in_bounds;
    // repo final-50 mean reward exceeds grpo_only's by the gap threshold.
    std::vector<SeedVerdict> reward_gap;
    std::vector<std::string> collapses;

    bool all_applicable_hold() const;
    std::string to_text() const;
    std::string to_json() const;
};

// Summarizes >= 2 runs over identical tasks and seed sets and evaluates the
// directional verdicts. Throws std::invalid_argument on mismatched task
// configuration or seed sets.
ComparisonReport compare_runs(const std::vector<RunData>& runs);

// Writes one two-column table (step <TAB> value) per run, plus a line-chart
// SVG overlaying the runs. The table is the source of truth; values
// round-trip bit-exactly through the decimal encoding.
void emit_plot_data(const std::vector<RunData>& runs, const std::string& quantity,
                    const std::filesystem::path& out_dir);

}  // namespace grouprl

#endif
