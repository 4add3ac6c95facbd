#ifndef GROUPRL_VOCAB_HPP
#define GROUPRL_VOCAB_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace grouprl {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

// Canonical reserved block, always the first seven indices of any vocabulary.
inline constexpr int kNumReserved = 7;
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr TokenId kCotOpen = 3;
inline constexpr TokenId kCotClose = 4;
inline constexpr TokenId kRespOpen = 5;
inline constexpr TokenId kRespClose = 6;

inline constexpr std::array<std::string_view, kNumReserved> kReservedSymbols = {
    "<bos>", "<eos>", "<unk>", "<cot>", "</cot>", "<resp>", "</resp>"};

// FNV-1a 64-bit. This is the repository's fixed string hash for the
// surface-hash token mapping; do not swap it for std::hash, which is not
// stable across implementations.
uint64_t fnv1a64(std::string_view s);

// Immutable ordered token table: reserved block first, then content tokens.
class Vocabulary {
public:
    // Prepends the canonical reserved block to the given content symbols.
    // Throws std::invalid_argument naming the duplicate when symbols collide
    // (with each other or with a reserved symbol), or when `symbols` is empty.
    static Vocabulary build(const std::vector<std::string>& symbols);

    int size() const { return static_cast<int>(tokens_.size()); }
    int content_size() const { return size() - kNumReserved; }

    const std::string& symbol(TokenId id) const;
    std::optional<TokenId> find(std::string_view symbol) const;
    // Lookup that throws std::out_of_range when the symbol is absent.
    TokenId id(std::string_view symbol) const;
    bool is_reserved(TokenId id) const { return id >= 0 && id < kNumReserved; }
    bool in_range(TokenId id) const { return id >= 0 && id < size(); }

    TokenSeq encode(const std::vector<std::string>& symbols) const;
    std::string decode(const TokenSeq& seq) const;  // space-joined, for logs

    // Plain-text serialization: one symbol per line, reserved block first.
    // save/load round-trips bit-exactly.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

enum class MappingMode { exact_or_unk, surface_hash };

// Total teacher-index -> learner-index table, fixed at construction.
//
// exact_or_unk: a teacher token maps to the learner token with the identical
// symbol when one exists, otherwise to UNK.
// surface_hash: unmatched teacher tokens map to a learner *content* token
// chosen by fnv1a64(symbol) mod content count. Collisions are allowed; this
// mode deliberately produces a lossy, inconsistent fit.
class TokenMapping {
public:
    TokenMapping(const Vocabulary& teacher, const Vocabulary& learner, MappingMode mode);

    // Throws std::out_of_range when teacher_index is outside the teacher
    // vocabulary.
    TokenId map(TokenId teacher_index) const;
    TokenSeq map_sequence(const TokenSeq& teacher_tokens) const;

    MappingMode mode() const { return mode_; }
    const std::vector<TokenId>& table() const { return table_; }

private:
    MappingMode mode_;
    std::vector<TokenId> table_;
};

// Returns the subsequence of `seq` with every reserved index except EOS
// removed. Unbalanced delimiters are tolerated: delimiters are simply
// dropped. Idempotent, never length-increasing.
TokenSeq strip_meta_tokens(const TokenSeq& seq, const Vocabulary& vocab);

}  // namespace grouprl

#endif
