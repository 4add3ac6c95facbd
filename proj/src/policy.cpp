#include "grouprl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace grouprl {

namespace {

constexpr char kCheckpointMagic[8] = {'G', 'R', 'L', 'P', 'O', 'L', '1', '\0'};
constexpr uint32_t kCheckpointVersion = 1;

void check_dims(const PolicyDims& d) {
    if (d.vocab_size < 2 || d.hidden_dim < 1 || d.window < 1) {
        throw std::invalid_argument("PolicyDims: need vocab_size >= 2, hidden_dim >= 1, window >= 1");
    }
}

// Tokens feeding each window slot, slot 0 = most recent; BOS fills slots
// beyond the start of the context.
inline TokenId slot_token(const TokenSeq& context, int slot) {
    const int len = static_cast<int>(context.size());
    return slot < len ? context[static_cast<size_t>(len - 1 - slot)] : kBos;
}

}  // namespace

size_t PolicyParams::param_count(const PolicyDims& d) {
    const size_t v = static_cast<size_t>(d.vocab_size);
    const size_t h = static_cast<size_t>(d.hidden_dim);
    const size_t w = static_cast<size_t>(d.window);
    return v * h + w * h * h + h * v + h + v;
}

size_t PolicyParams::mix_offset() const {
    return static_cast<size_t>(dims.vocab_size) * static_cast<size_t>(dims.hidden_dim);
}

size_t PolicyParams::out_proj_offset() const {
    const size_t h = static_cast<size_t>(dims.hidden_dim);
    return mix_offset() + static_cast<size_t>(dims.window) * h * h;
}

size_t PolicyParams::hidden_bias_offset() const {
    return out_proj_offset() + static_cast<size_t>(dims.hidden_dim) * static_cast<size_t>(dims.vocab_size);
}

size_t PolicyParams::out_bias_offset() const {
    return hidden_bias_offset() + static_cast<size_t>(dims.hidden_dim);
}

PolicyParams PolicyParams::zeros(const PolicyDims& d) {
    check_dims(d);
    PolicyParams p;
    p.dims = d;
    p.flat.assign(param_count(d), 0.0);
    return p;
}

PolicyParams PolicyParams::gaussian(const PolicyDims& d, double scale, Rng& rng) {
    PolicyParams p = zeros(d);
    for (double& x : p.flat) {
        x = rng.normal(0.0, scale);
    }
    return p;
}

PolicyParams PolicyParams::copy_prior(const PolicyDims& d, double embed_scale, double copy_scale,
                                      TokenId eos, double eos_bias, Rng& rng) {
    PolicyParams p = zeros(d);
    const int V = d.vocab_size;
    const int H = d.hidden_dim;
    for (TokenId v = 0; v < V; ++v) {
        auto e = p.embedding(v);
        for (int i = 0; i < H; ++i) {
            e[i] = rng.normal(0.0, embed_scale);
        }
    }
    for (int j = 0; j < d.window; ++j) {
        auto m = p.mix(j);
        for (int r = 0; r < H; ++r) {
            for (int c = 0; c < H; ++c) {
                m[static_cast<size_t>(r) * static_cast<size_t>(H) + static_cast<size_t>(c)] =
                    (r == c ? copy_scale : 0.0) + rng.normal(0.0, 0.01);
            }
        }
    }
    // Tie the output projection to the embedding table so repeating a window
    // token scores higher than emitting an arbitrary one.
    const size_t proj = p.out_proj_offset();
    for (int i = 0; i < H; ++i) {
        for (TokenId v = 0; v < V; ++v) {
            p.flat[proj + static_cast<size_t>(i) * static_cast<size_t>(V) + static_cast<size_t>(v)] =
                p.embedding(v)[i];
        }
    }
    if (eos >= 0 && eos < V) {
        p.flat[p.out_bias_offset() + static_cast<size_t>(eos)] = eos_bias;
    }
    return p;
}

std::span<double> PolicyParams::embedding(TokenId token) {
    const size_t h = static_cast<size_t>(dims.hidden_dim);
    return {flat.data() + static_cast<size_t>(token) * h, h};
}

std::span<const double> PolicyParams::embedding(TokenId token) const {
    const size_t h = static_cast<size_t>(dims.hidden_dim);
    return {flat.data() + static_cast<size_t>(token) * h, h};
}

std::span<double> PolicyParams::mix(int slot) {
    const size_t h = static_cast<size_t>(dims.hidden_dim);
    return {flat.data() + mix_offset() + static_cast<size_t>(slot) * h * h, h * h};
}

std::span<const double> PolicyParams::mix(int slot) const {
    const size_t h = static_cast<size_t>(dims.hidden_dim);
    return {flat.data() + mix_offset() + static_cast<size_t>(slot) * h * h, h * h};
}

bool PolicyParams::all_finite() const {
    return std::all_of(flat.begin(), flat.end(), [](double x) { return std::isfinite(x); });
}

void PolicyParams::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("PolicyParams::save: cannot open " + path.string());
    }
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    auto write_u32 = [&](uint32_t x) { out.write(reinterpret_cast<const char*>(&x), 4); };
    auto write_i32 = [&](int32_t x) { out.write(reinterpret_cast<const char*>(&x), 4); };
    write_u32(kCheckpointVersion);
    write_i32(dims.vocab_size);
    write_i32(dims.hidden_dim);
    write_i32(dims.window);
    const uint64_t n = flat.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(n * 8));
    if (!out) {
        throw std::runtime_error("PolicyParams::save: write failed for " + path.string());
    }
}

PolicyParams PolicyParams::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("PolicyParams::load: cannot open " + path.string());
    }
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("PolicyParams::load: bad magic in " + path.string());
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("PolicyParams::load: unsupported version");
    }
    PolicyDims d;
    in.read(reinterpret_cast<char*>(&d.vocab_size), 4);
    in.read(reinterpret_cast<char*>(&d.hidden_dim), 4);
    in.read(reinterpret_cast<char*>(&d.window), 4);
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in || n != param_count(d)) {
        throw std::runtime_error("PolicyParams::load: size mismatch");
    }
    PolicyParams p = zeros(d);
    in.read(reinterpret_cast<char*>(p.flat.data()), static_cast<std::streamsize>(n * 8));
    if (!in) {
        throw std::runtime_error("PolicyParams::load: truncated file");
    }
    return p;
}

std::vector<double> hidden_activations(const PolicyParams& params, const TokenSeq& context) {
    const PolicyDims& d = params.dims;
    const int H = d.hidden_dim;
    for (TokenId t : context) {
        if (t < 0 || t >= d.vocab_size) {
            throw std::out_of_range("policy: context token " + std::to_string(t) + " out of range");
        }
    }
    std::vector<double> pre(static_cast<size_t>(H));
    const double inv_w = 1.0 / static_cast<double>(d.window);
    const size_t hb = params.hidden_bias_offset();
    for (int i = 0; i < H; ++i) {
        pre[static_cast<size_t>(i)] = params.flat[hb + static_cast<size_t>(i)];
    }
    for (int j = 0; j < d.window; ++j) {
        const TokenId tok = slot_token(context, j);
        auto emb = params.embedding(tok);
        auto m = params.mix(j);
        for (int r = 0; r < H; ++r) {
            double acc = 0.0;
            const size_t row = static_cast<size_t>(r) * static_cast<size_t>(H);
            for (int c = 0; c < H; ++c) {
                acc += m[row + static_cast<size_t>(c)] * emb[static_cast<size_t>(c)];
            }
            pre[static_cast<size_t>(r)] += inv_w * acc;
        }
    }
    for (double& x : pre) {
        x = std::tanh(x);
    }
    return pre;
}

std::vector<double> logits(const PolicyParams& params, const TokenSeq& context) {
    const PolicyDims& d = params.dims;
    const int V = d.vocab_size;
    const int H = d.hidden_dim;
    const std::vector<double> h = hidden_activations(params, context);
    const size_t proj = params.out_proj_offset();
    const size_t ob = params.out_bias_offset();
    std::vector<double> out(static_cast<size_t>(V));
    for (int v = 0; v < V; ++v) {
        out[static_cast<size_t>(v)] = params.flat[ob + static_cast<size_t>(v)];
    }
    for (int i = 0; i < H; ++i) {
        const double hi = h[static_cast<size_t>(i)];
        const size_t row = proj + static_cast<size_t>(i) * static_cast<size_t>(V);
        for (int v = 0; v < V; ++v) {
            out[static_cast<size_t>(v)] += hi * params.flat[row + static_cast<size_t>(v)];
        }
    }
    return out;
}

std::vector<double> log_softmax(std::span<const double> logit_values) {
    const double m = *std::max_element(logit_values.begin(), logit_values.end());
    double sum = 0.0;
    for (double l : logit_values) {
        sum += std::exp(l - m);
    }
    const double lse = m + std::log(sum);
    std::vector<double> out(logit_values.size());
    for (size_t i = 0; i < logit_values.size(); ++i) {
        out[i] = logit_values[i] - lse;
    }
    return out;
}

std::vector<double> softmax(std::span<const double> logit_values) {
    std::vector<double> out = log_softmax(logit_values);
    for (double& x : out) {
        x = std::exp(x);
    }
    return out;
}

double entropy_of_logits(std::span<const double> logit_values) {
    const std::vector<double> lp = log_softmax(logit_values);
    double h = 0.0;
    for (double l : lp) {
        const double p = std::exp(l);
        if (p > 0.0) {
            h -= p * l;
        }
    }
    return std::max(0.0, h);
}

double token_log_prob(const PolicyParams& params, const TokenSeq& context, TokenId token) {
    if (token < 0 || token >= params.dims.vocab_size) {
        throw std::out_of_range("token_log_prob: token out of range");
    }
    const std::vector<double> l = logits(params, context);
    const std::vector<double> lp = log_softmax(l);
    return std::min(0.0, lp[static_cast<size_t>(token)]);
}

double step_entropy(const PolicyParams& params, const TokenSeq& context) {
    const std::vector<double> l = logits(params, context);
    return entropy_of_logits(l);
}

double sequence_log_prob(const PolicyParams& params, const TokenSeq& query, const TokenSeq& traj) {
    TokenSeq ctx = query;
    double total = 0.0;
    for (TokenId t : traj) {
        total += token_log_prob(params, ctx, t);
        ctx.push_back(t);
    }
    return total;
}

Trajectory sample_trajectory(const PolicyParams& params, const TokenSeq& context, int max_len,
                             TokenId eos, Rng& rng) {
    if (max_len < 1) {
        throw std::invalid_argument("sample_trajectory: max_len must be >= 1");
    }
    Trajectory traj;
    traj.origin = Origin::on_policy;
    TokenSeq ctx = context;
    for (int step = 0; step < max_len; ++step) {
        const std::vector<double> l = logits(params, ctx);
        const std::vector<double> lp = log_softmax(l);
        std::vector<double> probs(lp.size());
        for (size_t i = 0; i < lp.size(); ++i) {
            probs[i] = std::exp(lp[i]);
        }
        const TokenId tok = rng.categorical(probs);
        traj.tokens.push_back(tok);
        traj.behavior_logps.push_back(std::min(0.0, lp[static_cast<size_t>(tok)]));
        traj.step_entropies.push_back(entropy_of_logits(l));
        if (tok == eos) {
            break;
        }
        ctx.push_back(tok);
    }
    return traj;
}

void accumulate_weighted_grad_log_prob(const PolicyParams& params, const TokenSeq& query,
                                       const TokenSeq& traj, std::span<const double> weights,
                                       std::span<double> grad) {
    if (weights.size() != traj.size()) {
        throw std::invalid_argument("accumulate_weighted_grad_log_prob: weights/trajectory size mismatch");
    }
    if (grad.size() != params.flat.size()) {
        throw std::invalid_argument("accumulate_weighted_grad_log_prob: gradient size mismatch");
    }
    const PolicyDims& d = params.dims;
    const int V = d.vocab_size;
    const int H = d.hidden_dim;
    const double inv_w = 1.0 / static_cast<double>(d.window);
    const size_t proj = params.out_proj_offset();
    const size_t hb = params.hidden_bias_offset();
    const size_t ob = params.out_bias_offset();

    TokenSeq ctx = query;
    std::vector<double> glogits(static_cast<size_t>(V));
    std::vector<double> gpre(static_cast<size_t>(H));
    for (size_t t = 0; t < traj.size(); ++t) {
        const TokenId target = traj[t];
        if (target < 0 || target >= V) {
            throw std::out_of_range("accumulate_weighted_grad_log_prob: trajectory token out of range");
        }
        const double wgt = weights[t];
        if (wgt != 0.0) {
            const std::vector<double> h = hidden_activations(params, ctx);
            const std::vector<double> l = logits(params, ctx);
            const std::vector<double> p = softmax(l);

            // d log softmax[target] / d logits = onehot(target) - p
            for (int v = 0; v < V; ++v) {
                glogits[static_cast<size_t>(v)] = wgt * ((v == target ? 1.0 : 0.0) - p[static_cast<size_t>(v)]);
            }
            for (int v = 0; v < V; ++v) {
                grad[ob + static_cast<size_t>(v)] += glogits[static_cast<size_t>(v)];
            }
            for (int i = 0; i < H; ++i) {
                const double hi = h[static_cast<size_t>(i)];
                const size_t row = proj + static_cast<size_t>(i) * static_cast<size_t>(V);
                double acc = 0.0;
                for (int v = 0; v < V; ++v) {
                    grad[row + static_cast<size_t>(v)] += hi * glogits[static_cast<size_t>(v)];
                    acc += params.flat[row + static_cast<size_t>(v)] * glogits[static_cast<size_t>(v)];
                }
                gpre[static_cast<size_t>(i)] = acc * (1.0 - hi * hi);  // tanh'
            }
            for (int i = 0; i < H; ++i) {
                grad[hb + static_cast<size_t>(i)] += gpre[static_cast<size_t>(i)];
            }
            for (int j = 0; j < d.window; ++j) {
                const TokenId tok = slot_token(ctx, j);
                auto emb = params.embedding(tok);
                auto m = params.mix(j);
                const size_t mix_base = params.mix_offset() +
                                        static_cast<size_t>(j) * static_cast<size_t>(H) * static_cast<size_t>(H);
                const size_t emb_base = static_cast<size_t>(tok) * static_cast<size_t>(H);
                for (int r = 0; r < H; ++r) {
                    const double gr = inv_w * gpre[static_cast<size_t>(r)];
                    const size_t row = static_cast<size_t>(r) * static_cast<size_t>(H);
                    for (int c = 0; c < H; ++c) {
                        grad[mix_base + row + static_cast<size_t>(c)] += gr * emb[static_cast<size_t>(c)];
                        grad[emb_base + static_cast<size_t>(c)] += gr * m[row + static_cast<size_t>(c)];
                    }
                }
            }
        }
        ctx.push_back(target);
    }
}

std::vector<double> grad_sequence_log_prob(const PolicyParams& params, const TokenSeq& query,
                                           const TokenSeq& traj) {
    std::vector<double> grad(params.flat.size(), 0.0);
    const std::vector<double> ones(traj.size(), 1.0);
    accumulate_weighted_grad_log_prob(params, query, traj, ones, grad);
    return grad;
}

std::vector<double> finite_difference_gradient(const PolicyParams& params,
                                               const std::function<double(const PolicyParams&)>& f,
                                               double h) {
    if (!(h > 0.0)) {
        throw std::invalid_argument("finite_difference_gradient: h must be positive");
    }
    PolicyParams probe = params;
    std::vector<double> grad(params.flat.size());
    for (size_t i = 0; i < params.flat.size(); ++i) {
        const double orig = probe.flat[i];
        probe.flat[i] = orig + h;
        const double fp = f(probe);
        probe.flat[i] = orig - h;
        const double fm = f(probe);
        probe.flat[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_difference_gradient: non-finite evaluation at coordinate " +
                                     std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace grouprl
