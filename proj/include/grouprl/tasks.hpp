#ifndef GROUPRL_TASKS_HPP
#define GROUPRL_TASKS_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "grouprl/policy.hpp"
#include "grouprl/rng.hpp"
#include "grouprl/vocab.hpp"

namespace grouprl {

enum class TaskKind { reverse_sequence, modular_chain };
enum class Difficulty { easy, hard };

// reverse_sequence: the query is a random letter string, the answer is its
// reversal. length = string length.
// modular_chain: the query encodes "d1 + d2 + ... + dk mod m", the answer is
// the decimal encoding of the residue. length = number of addends k.
struct TaskSpec {
    TaskKind kind = TaskKind::reverse_sequence;
    int min_len = 1;
    int max_len = 2;
    int modulus = 7;  // modular_chain only

    // Calibrated length ranges per difficulty; see configs/ for the presets
    // these feed.
    static TaskSpec with_difficulty(TaskKind kind, Difficulty difficulty);

    void validate() const;  // throws std::invalid_argument
};

// Owns the learner and teacher token spaces for a task family. The teacher
// vocabulary is a superset of the learner one: it adds derivation-only
// narration tokens, which is the engineered vocabulary mismatch.
struct TaskEnv {
    TaskSpec spec;
    Vocabulary learner;
    Vocabulary teacher;

    static TaskEnv make(const TaskSpec& spec);
};

struct QueryInstance {
    TokenSeq query;         // learner tokens
    TokenSeq ground_truth;  // learner content tokens
};

// Off-policy knowledge: a worked derivation plus the answer, in teacher
// tokens, ending with the answer inside a <resp>...</resp> segment.
struct ExpertTrace {
    TokenSeq teacher_tokens;
    TokenSeq answer;  // learner content tokens, equal to the ground truth
};

QueryInstance generate_query(const TaskEnv& env, Rng& rng);

// Binary verifier: extracts the trajectory's answer segment and compares it
// with the ground truth, exactly. Extraction rule: cut at the first EOS;
// when a <resp> token is present take the span after the first <resp> up to
// the next </resp> (or the end, tolerating an unclosed segment), otherwise
// take everything; then drop all reserved tokens.
double verify(const Trajectory& traj, const TokenSeq& ground_truth, const Vocabulary& vocab);

ExpertTrace expert_trace(const TaskEnv& env, const QueryInstance& instance);

// [BOS] ++ query ++ [<cot>] ++ projection(trace) ++ [</cot>], where the
// projection maps teacher tokens through the given mapping (callers pass the
// exact-or-unk mapping: shared symbols survive, derivation-only tokens become
// UNK).
TokenSeq build_rephrase_context(const TokenSeq& query, const ExpertTrace& trace,
                                const Vocabulary& learner, const TokenMapping& projection);

struct TaskRecord {
    QueryInstance instance;
    ExpertTrace trace;
};

// Line-delimited record file so runs can replay fixed datasets.
void save_task_suite(const std::filesystem::path& path, const TaskEnv& env,
                     const std::vector<TaskRecord>& records);
std::vector<TaskRecord> load_task_suite(const std::filesystem::path& path, const TaskEnv& env);

const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

}  // namespace grouprl

#endif
