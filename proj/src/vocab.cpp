#include "grouprl/vocab.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace grouprl {

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= static_cast<uint64_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& symbols) {
    if (symbols.empty()) {
        throw std::invalid_argument("Vocabulary::build: empty symbol list");
    }
    Vocabulary v;
    v.tokens_.reserve(kNumReserved + symbols.size());
    for (auto sv : kReservedSymbols) {
        v.tokens_.emplace_back(sv);
    }
    for (const auto& s : symbols) {
        v.tokens_.push_back(s);
    }
    for (size_t i = 0; i < v.tokens_.size(); ++i) {
        auto [it, inserted] = v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i));
        if (!inserted) {
            throw std::invalid_argument("Vocabulary::build: duplicate symbol \"" + v.tokens_[i] + "\"");
        }
    }
    return v;
}

const std::string& Vocabulary::symbol(TokenId id) const {
    if (!in_range(id)) {
        throw std::out_of_range("Vocabulary::symbol: token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

TokenId Vocabulary::id(std::string_view symbol) const {
    auto t = find(symbol);
    if (!t) {
        throw std::out_of_range("Vocabulary::id: unknown symbol \"" + std::string(symbol) + "\"");
    }
    return *t;
}

TokenSeq Vocabulary::encode(const std::vector<std::string>& symbols) const {
    TokenSeq out;
    out.reserve(symbols.size());
    for (const auto& s : symbols) {
        out.push_back(id(s));
    }
    return out;
}

std::string Vocabulary::decode(const TokenSeq& seq) const {
    std::ostringstream os;
    for (size_t i = 0; i < seq.size(); ++i) {
        if (i > 0) {
            os << ' ';
        }
        os << symbol(seq[i]);
    }
    return os.str();
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("Vocabulary::save: cannot open " + path.string());
    }
    for (const auto& t : tokens_) {
        out << t << '\n';
    }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("Vocabulary::load: cannot open " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    if (lines.size() < kNumReserved) {
        throw std::runtime_error("Vocabulary::load: file shorter than reserved block");
    }
    for (int i = 0; i < kNumReserved; ++i) {
        if (lines[static_cast<size_t>(i)] != kReservedSymbols[static_cast<size_t>(i)]) {
            throw std::runtime_error("Vocabulary::load: reserved block mismatch at line " + std::to_string(i));
        }
    }
    std::vector<std::string> content(lines.begin() + kNumReserved, lines.end());
    return build(content);
}

TokenMapping::TokenMapping(const Vocabulary& teacher, const Vocabulary& learner, MappingMode mode)
    : mode_(mode) {
    table_.resize(static_cast<size_t>(teacher.size()));
    const int content = learner.content_size();
    for (TokenId t = 0; t < teacher.size(); ++t) {
        const std::string& sym = teacher.symbol(t);
        if (auto l = learner.find(sym)) {
            table_[static_cast<size_t>(t)] = *l;
        } else if (mode == MappingMode::exact_or_unk) {
            table_[static_cast<size_t>(t)] = kUnk;
        } else {
            table_[static_cast<size_t>(t)] =
                kNumReserved + static_cast<TokenId>(fnv1a64(sym) % static_cast<uint64_t>(content));
        }
    }
}

TokenId TokenMapping::map(TokenId teacher_index) const {
    if (teacher_index < 0 || static_cast<size_t>(teacher_index) >= table_.size()) {
        throw std::out_of_range("TokenMapping::map: teacher index " + std::to_string(teacher_index) +
                                " out of range");
    }
    return table_[static_cast<size_t>(teacher_index)];
}

TokenSeq TokenMapping::map_sequence(const TokenSeq& teacher_tokens) const {
    TokenSeq out;
    out.reserve(teacher_tokens.size());
    for (TokenId t : teacher_tokens) {
        out.push_back(map(t));
    }
    return out;
}

TokenSeq strip_meta_tokens(const TokenSeq& seq, const Vocabulary& vocab) {
    TokenSeq out;
    out.reserve(seq.size());
    for (TokenId t : seq) {
        if (!vocab.is_reserved(t) || t == kEos) {
            out.push_back(t);
        }
    }
    return out;
}

}  // namespace grouprl
