#include "grouprl/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace grouprl {

namespace {

std::vector<std::string> letter_symbols() {
    std::vector<std::string> out;
    for (char c = 'a'; c <= 'j'; ++c) {
        out.emplace_back(1, c);
    }
    return out;
}

std::vector<std::string> digit_symbols() {
    std::vector<std::string> out;
    for (char c = '0'; c <= '9'; ++c) {
        out.emplace_back(1, c);
    }
    return out;
}

// Decimal digits of n as learner/teacher shared digit tokens.
std::vector<std::string> decimal_symbols(long n) {
    std::string s = std::to_string(n);
    std::vector<std::string> out;
    for (char c : s) {
        out.emplace_back(1, c);
    }
    return out;
}

}  // namespace

TaskSpec TaskSpec::with_difficulty(TaskKind kind, Difficulty difficulty) {
    TaskSpec s;
    s.kind = kind;
    if (kind == TaskKind::reverse_sequence) {
        s.min_len = difficulty == Difficulty::easy ? 1 : 2;
        s.max_len = difficulty == Difficulty::easy ? 1 : 3;
    } else {
        s.min_len = difficulty == Difficulty::easy ? 1 : 2;
        s.max_len = difficulty == Difficulty::easy ? 1 : 2;
        s.modulus = 7;
    }
    return s;
}

void TaskSpec::validate() const {
    if (min_len < 1 || max_len < min_len) {
        throw std::invalid_argument("TaskSpec: need 1 <= min_len <= max_len");
    }
    if (kind == TaskKind::modular_chain && modulus < 2) {
        throw std::invalid_argument("TaskSpec: modulus must be >= 2");
    }
}

TaskEnv TaskEnv::make(const TaskSpec& spec) {
    spec.validate();
    TaskEnv env;
    env.spec = spec;
    if (spec.kind == TaskKind::reverse_sequence) {
        env.learner = Vocabulary::build(letter_symbols());
        auto teacher_symbols = letter_symbols();
        teacher_symbols.push_back("swap");
        env.teacher = Vocabulary::build(teacher_symbols);
    } else {
        auto content = digit_symbols();
        content.push_back("+");
        content.push_back("mod");
        env.learner = Vocabulary::build(content);
        auto teacher_symbols = content;
        teacher_symbols.push_back("add");
        teacher_symbols.push_back("acc");
        teacher_symbols.push_back("reduce");
        env.teacher = Vocabulary::build(teacher_symbols);
    }
    return env;
}

QueryInstance generate_query(const TaskEnv& env, Rng& rng) {
    const TaskSpec& spec = env.spec;
    const int len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    QueryInstance out;
    if (spec.kind == TaskKind::reverse_sequence) {
        for (int i = 0; i < len; ++i) {
            const char c = static_cast<char>('a' + rng.below(10));
            out.query.push_back(env.learner.id(std::string(1, c)));
        }
        out.ground_truth.assign(out.query.rbegin(), out.query.rend());
    } else {
        long sum = 0;
        const TokenId plus = env.learner.id("+");
        for (int i = 0; i < len; ++i) {
            const int digit = rng.below(10);
            sum += digit;
            if (i > 0) {
                out.query.push_back(plus);
            }
            out.query.push_back(env.learner.id(std::string(1, static_cast<char>('0' + digit))));
        }
        out.query.push_back(env.learner.id("mod"));
        for (const auto& s : decimal_symbols(spec.modulus)) {
            out.query.push_back(env.learner.id(s));
        }
        for (const auto& s : decimal_symbols(sum % spec.modulus)) {
            out.ground_truth.push_back(env.learner.id(s));
        }
    }
    return out;
}

double verify(const Trajectory& traj, const TokenSeq& ground_truth, const Vocabulary& vocab) {
    TokenSeq content;
    for (TokenId t : traj.tokens) {
        if (t == kEos) {
            break;
        }
        content.push_back(t);
    }
    auto resp_open = std::find(content.begin(), content.end(), kRespOpen);
    TokenSeq segment;
    if (resp_open != content.end()) {
        auto resp_close = std::find(resp_open + 1, content.end(), kRespClose);
        segment.assign(resp_open + 1, resp_close);
    } else {
        segment = content;
    }
    TokenSeq answer;
    for (TokenId t : segment) {
        if (!vocab.is_reserved(t)) {
            answer.push_back(t);
        }
    }
    return answer == ground_truth ? 1.0 : 0.0;
}

ExpertTrace expert_trace(const TaskEnv& env, const QueryInstance& instance) {
    ExpertTrace trace;
    trace.answer = instance.ground_truth;
    const Vocabulary& teacher = env.teacher;
    if (env.spec.kind == TaskKind::reverse_sequence) {
        if (instance.query.size() > 1) {
            const TokenId swap = teacher.id("swap");
            for (auto it = instance.query.rbegin(); it != instance.query.rend(); ++it) {
                trace.teacher_tokens.push_back(swap);
                trace.teacher_tokens.push_back(teacher.id(env.learner.symbol(*it)));
            }
        }
    } else {
        const TokenId add = teacher.id("add");
        const TokenId acc = teacher.id("acc");
        const TokenId reduce = teacher.id("reduce");
        const TokenId plus = env.learner.id("+");
        const TokenId mod = env.learner.id("mod");
        std::vector<int> digits;
        for (TokenId t : instance.query) {
            if (t == mod) {
                break;
            }
            if (t != plus) {
                digits.push_back(env.learner.symbol(t)[0] - '0');
            }
        }
        long running = digits.empty() ? 0 : digits[0];
        for (size_t i = 1; i < digits.size(); ++i) {
            running += digits[i];
            trace.teacher_tokens.push_back(add);
            trace.teacher_tokens.push_back(teacher.id(std::string(1, static_cast<char>('0' + digits[i]))));
            trace.teacher_tokens.push_back(acc);
            for (const auto& s : decimal_symbols(running)) {
                trace.teacher_tokens.push_back(teacher.id(s));
            }
        }
        trace.teacher_tokens.push_back(reduce);
        for (const auto& s : decimal_symbols(running % env.spec.modulus)) {
            trace.teacher_tokens.push_back(teacher.id(s));
        }
    }
    trace.teacher_tokens.push_back(kRespOpen);
    for (TokenId t : instance.ground_truth) {
        trace.teacher_tokens.push_back(teacher.id(env.learner.symbol(t)));
    }
    trace.teacher_tokens.push_back(kRespClose);
    return trace;
}

TokenSeq build_rephrase_context(const TokenSeq& query, const ExpertTrace& trace,
                                const Vocabulary& learner, const TokenMapping& projection) {
    (void)learner;
    TokenSeq ctx;
    ctx.reserve(3 + query.size() + trace.teacher_tokens.size());
    ctx.push_back(kBos);
    ctx.insert(ctx.end(), query.begin(), query.end());
    ctx.push_back(kCotOpen);
    for (TokenId t : trace.teacher_tokens) {
        ctx.push_back(projection.map(t));
    }
    ctx.push_back(kCotClose);
    return ctx;
}

void save_task_suite(const std::filesystem::path& path, const TaskEnv& env,
                     const std::vector<TaskRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_task_suite: cannot open " + path.string());
    }
    for (const auto& rec : records) {
        nlohmann::json j;
        j["kind"] = task_kind_name(env.spec.kind);
        j["query"] = env.learner.decode(rec.instance.query);
        j["ground_truth"] = env.learner.decode(rec.instance.ground_truth);
        j["trace"] = env.teacher.decode(rec.trace.teacher_tokens);
        out << j.dump() << '\n';
    }
}

namespace {

TokenSeq encode_space_joined(const Vocabulary& vocab, const std::string& text) {
    TokenSeq out;
    std::istringstream is(text);
    std::string sym;
    while (is >> sym) {
        out.push_back(vocab.id(sym));
    }
    return out;
}

}  // namespace

std::vector<TaskRecord> load_task_suite(const std::filesystem::path& path, const TaskEnv& env) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_task_suite: cannot open " + path.string());
    }
    std::vector<TaskRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line);
        if (j.at("kind").get<std::string>() != task_kind_name(env.spec.kind)) {
            throw std::runtime_error("load_task_suite: task kind mismatch at line " + std::to_string(lineno));
        }
        TaskRecord rec;
        rec.instance.query = encode_space_joined(env.learner, j.at("query").get<std::string>());
        rec.instance.ground_truth = encode_space_joined(env.learner, j.at("ground_truth").get<std::string>());
        rec.trace.teacher_tokens = encode_space_joined(env.teacher, j.at("trace").get<std::string>());
        rec.trace.answer = rec.instance.ground_truth;
        records.push_back(std::move(rec));
    }
    return records;
}

const char* task_kind_name(TaskKind kind) {
    return kind == TaskKind::reverse_sequence ? "reverse_sequence" : "modular_chain";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "reverse_sequence") {
        return TaskKind::reverse_sequence;
    }
    if (name == "modular_chain") {
        return TaskKind::modular_chain;
    }
    throw std::invalid_argument("unknown task kind: " + name);
}

}  // namespace grouprl
