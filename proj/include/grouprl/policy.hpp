#ifndef GROUPRL_POLICY_HPP
#define GROUPRL_POLICY_HPP

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "grouprl/rng.hpp"
#include "grouprl/vocab.hpp"

namespace grouprl {

// Tiny autoregressive softmax policy. The next-token distribution depends on
// the last `window` context positions only:
//
//   slot_j   = context token j positions back (BOS when the context is short)
//   pre      = hidden_bias + (1/w) * sum_j Mix_j * embed(slot_j)
//   hidden   = tanh(pre)
//   logits   = out_bias + out_proj^T * hidden
//
// All arithmetic is double precision.
struct PolicyDims {
    int vocab_size = 0;  // |V|
    int hidden_dim = 0;  // d
    int window = 0;      // w
};

// Flat parameter vector with a fixed index map onto named slices, in order:
//   embedding    |V| x d   (row per token)
//   mix          w x d x d (one matrix per window slot, slot 0 = most recent)
//   out_proj     d x |V|
//   hidden_bias  d
//   out_bias     |V|
struct PolicyParams {
    PolicyDims dims;
    std::vector<double> flat;

    static size_t param_count(const PolicyDims& dims);
    static PolicyParams zeros(const PolicyDims& dims);
    static PolicyParams gaussian(const PolicyDims& dims, double scale, Rng& rng);
    // Tied-embedding initialization with a near-identity mix: the untrained
    // policy starts with a weak bias toward repeating tokens present in its
    // context window, plus an end-of-sequence bias that favors short
    // responses. This is the stand-in for a base model that can already
    // restate material it was shown.
    static PolicyParams copy_prior(const PolicyDims& dims, double embed_scale, double copy_scale,
                                   TokenId eos, double eos_bias, Rng& rng);

    size_t embedding_offset() const { return 0; }
    size_t mix_offset() const;
    size_t out_proj_offset() const;
    size_t hidden_bias_offset() const;
    size_t out_bias_offset() const;

    std::span<double> embedding(TokenId token);
    std::span<const double> embedding(TokenId token) const;
    std::span<double> mix(int slot);
    std::span<const double> mix(int slot) const;

    bool all_finite() const;

    // Binary checkpoint: magic + version + dims + little-endian doubles.
    // save/load round-trips bit-exactly.
    void save(const std::filesystem::path& path) const;
    static PolicyParams load(const std::filesystem::path& path);
};

enum class Origin { on_policy, rephrased, direct_injected };

struct Trajectory {
    TokenSeq tokens;                     // ends at EOS or at max_len
    std::vector<double> behavior_logps;  // one per token, from the behavior policy
    std::optional<double> reward;        // set by the verifier
    Origin origin = Origin::on_policy;
    std::vector<double> step_entropies;  // sampling-time entropy per emitted token
};

// Unnormalized scores over the vocabulary for the next token. Throws
// std::out_of_range when a context token is outside the vocabulary.
std::vector<double> logits(const PolicyParams& params, const TokenSeq& context);

// tanh hidden layer for the same context; exposed for diagnostics.
std::vector<double> hidden_activations(const PolicyParams& params, const TokenSeq& context);

// log softmax(logits)[token] with max-subtraction stabilization; always <= 0.
double token_log_prob(const PolicyParams& params, const TokenSeq& context, TokenId token);

std::vector<double> log_softmax(std::span<const double> logit_values);
std::vector<double> softmax(std::span<const double> logit_values);
double entropy_of_logits(std::span<const double> logit_values);  // nats

// Shannon entropy of the next-token distribution, in [0, ln |V|].
double step_entropy(const PolicyParams& params, const TokenSeq& context);

// Sum over t of token_log_prob(params, query ++ traj[..t], traj[t]).
double sequence_log_prob(const PolicyParams& params, const TokenSeq& query, const TokenSeq& traj);

// Ancestral sampling until EOS is emitted or max_len tokens are reached.
// behavior_logps and step_entropies are filled from the sampling
// distribution. Deterministic given (params, context, rng seed).
Trajectory sample_trajectory(const PolicyParams& params, const TokenSeq& context, int max_len,
                             TokenId eos, Rng& rng);

// Adds sum_t weights[t] * grad log pi(traj[t] | query ++ traj[..t]) into
// `grad` (reverse accumulation; exact). weights.size() must equal traj size.
void accumulate_weighted_grad_log_prob(const PolicyParams& params, const TokenSeq& query,
                                       const TokenSeq& traj, std::span<const double> weights,
                                       std::span<double> grad);

// Exact gradient of sequence_log_prob with respect to the flat vector.
std::vector<double> grad_sequence_log_prob(const PolicyParams& params, const TokenSeq& query,
                                           const TokenSeq& traj);

// Central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Throws std::runtime_error identifying the coordinate when f evaluates
// non-finite.
std::vector<double> finite_difference_gradient(const PolicyParams& params,
                                               const std::function<double(const PolicyParams&)>& f,
                                               double h);

}  // namespace grouprl

#endif
