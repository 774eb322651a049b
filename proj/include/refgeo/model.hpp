#pragma once

// Minimal pre-norm decoder-only transformer with residual-stream hooks.
//
//   x^(0)   = Embed(t) + Pos
//   x̃^(l)   = x^(l) + Attn^(l)(RMSNorm(x^(l)))
//   x^(l+1) = x̃^(l) + MLP^(l)(RMSNorm(x̃^(l)))
//   logits  = Unembed(RMSNorm(x^(L)))
//
// The trace exposes x^(0..L). Under directional ablation every write into the
// residual stream (embedding output, each attention output, each MLP output)
// is projected onto the orthogonal complement of the direction.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/ops.hpp"
#include "refgeo/task.hpp"
#include "refgeo/tensor.hpp"

namespace refgeo {

struct ModelConfig {
    int vocab_size = 32;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_mlp = 128;
    int max_seq_len = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size < tok::num_special) {
            throw std::invalid_argument("model: vocab_size " + std::to_string(vocab_size) + " leaves no room for " +
                                        std::to_string(tok::num_special) + " special tokens");
        }
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
            throw std::invalid_argument("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                        std::to_string(n_heads));
        }
        if (n_layers <= 0 || d_mlp <= 0 || max_seq_len <= 0) throw std::invalid_argument("model: non-positive extent");
    }
};

struct LayerWeights {
    Tensor attn_gain;  // [d]
    Tensor w_qkv;      // [d, 3d]
    Tensor w_o;        // [d, d]
    Tensor mlp_gain;   // [d]
    Tensor w_in;       // [d, d_mlp]
    Tensor b_in;       // [d_mlp]
    Tensor w_out;      // [d_mlp, d]
    Tensor b_out;      // [d]
};

class ToyModel {
   public:
    ToyModel() = default;

    static ToyModel init(const ModelConfig& cfg) {
        cfg.validate();
        ToyModel m;
        m.cfg_ = cfg;
        std::mt19937_64 rng(cfg.seed);
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto V = static_cast<std::size_t>(cfg.vocab_size);
        const auto H = static_cast<std::size_t>(cfg.d_mlp);
        const auto S = static_cast<std::size_t>(cfg.max_seq_len);
        auto normal = [&rng](Shape shape, double std) {
            std::normal_distribution<double> nd(0.0, std);
            std::vector<double> v(shape_numel(shape));
            for (auto& x : v) x = nd(rng);
            return Tensor(std::move(shape), std::move(v));
        };
        auto fill = [](Shape shape, double value) {
            const auto n = shape_numel(shape);
            return Tensor(std::move(shape), std::vector<double>(n, value));
        };
        const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
        m.embed = normal({V, d}, 0.5);
        m.pos = normal({S, d}, 0.1);
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerWeights w;
            w.attn_gain = fill({d}, 1.0);
            w.w_qkv = normal({d, 3 * d}, 1.0 / std::sqrt(static_cast<double>(d)));
            w.w_o = normal({d, d}, resid_scale / std::sqrt(static_cast<double>(d)));
            w.mlp_gain = fill({d}, 1.0);
            w.w_in = normal({d, H}, 1.0 / std::sqrt(static_cast<double>(d)));
            w.b_in = fill({H}, 0.0);
            w.w_out = normal({H, d}, resid_scale / std::sqrt(static_cast<double>(H)));
            w.b_out = fill({d}, 0.0);
            m.layers.push_back(std::move(w));
        }
        m.final_gain = fill({d}, 1.0);
        m.unembed = normal({d, V}, 1.0 / std::sqrt(static_cast<double>(d)));
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    void set_config(const ModelConfig& cfg) { cfg_ = cfg; }

    // Stable, ordered list of (name, tensor) pairs; defines checkpoint layout.
    std::vector<std::pair<std::string, Tensor*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor*>> out{{"embed", &embed}, {"pos", &pos}};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& w = layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            out.emplace_back(p + "attn_gain", &w.attn_gain);
            out.emplace_back(p + "w_qkv", &w.w_qkv);
            out.emplace_back(p + "w_o", &w.w_o);
            out.emplace_back(p + "mlp_gain", &w.mlp_gain);
            out.emplace_back(p + "w_in", &w.w_in);
            out.emplace_back(p + "b_in", &w.b_in);
            out.emplace_back(p + "w_out", &w.w_out);
            out.emplace_back(p + "b_out", &w.b_out);
        }
        out.emplace_back("final_gain", &final_gain);
        out.emplace_back("unembed", &unembed);
        return out;
    }

    std::vector<std::pair<std::string, const Tensor*>> named_parameters() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (auto& [n, t] : const_cast<ToyModel*>(this)->named_parameters()) out.emplace_back(n, t);
        return out;
    }

    void set_trainable(bool on) {
        for (auto& [name, t] : named_parameters()) t->set_requires_grad(on);
    }

    // FNV-1a over the config and raw weight bytes.
    std::string checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ULL;
            }
        };
        const int ints[] = {cfg_.vocab_size, cfg_.d_model, cfg_.n_layers, cfg_.n_heads, cfg_.d_mlp, cfg_.max_seq_len};
        mix(ints, sizeof(ints));
        for (const auto& [name, t] : named_parameters()) mix(t->data().data(), t->numel() * sizeof(double));
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }

    Tensor embed;       // [V, d]
    Tensor pos;         // [N_seq, d]
    std::vector<LayerWeights> layers;
    Tensor final_gain;  // [d]
    Tensor unembed;     // [d, V]

   private:
    ModelConfig cfg_;
};

enum class InterventionKind { none, ablate, add, subtract };

inline std::string to_string(InterventionKind k) {
    switch (k) {
        case InterventionKind::none: return "none";
        case InterventionKind::ablate: return "ablate";
        case InterventionKind::add: return "add";
        case InterventionKind::subtract: return "subtract";
    }
    return "?";
}

// What to do to the residual stream during a forward pass. The direction is a
// Tensor so that a requires_grad parameter can be threaded through the model.
struct InterventionSpec {
    InterventionKind kind = InterventionKind::none;
    Tensor direction;  // [d_model], normalized inside forward
    double alpha = 0.0;
    int layer = 0;  // l_add

    static InterventionSpec none() { return {}; }
    static InterventionSpec ablate(Tensor r) { return {InterventionKind::ablate, std::move(r), 0.0, 0}; }
    static InterventionSpec ablate(const Direction& r) { return ablate(r.tensor()); }
    static InterventionSpec add(Tensor r, double alpha, int layer) {
        return {InterventionKind::add, std::move(r), alpha, layer};
    }
    static InterventionSpec add(const Direction& r, double alpha, int layer) { return add(r.tensor(), alpha, layer); }
    static InterventionSpec subtract(Tensor r, double alpha, int layer) {
        return {InterventionKind::subtract, std::move(r), alpha, layer};
    }
    static InterventionSpec subtract(const Direction& r, double alpha, int layer) {
        return subtract(r.tensor(), alpha, layer);
    }

    void validate(const ModelConfig& cfg) const {
        if (kind == InterventionKind::none) return;
        if (!direction.defined() || direction.numel() != static_cast<std::size_t>(cfg.d_model)) {
            throw ShapeError("intervention: direction has " +
                             std::to_string(direction.defined() ? direction.numel() : 0) +
                             " components, model d_model is " + std::to_string(cfg.d_model));
        }
        if (norm2(direction.data()) == 0.0) throw DegenerateDirection("intervention: zero-norm direction");
        if (kind == InterventionKind::add || kind == InterventionKind::subtract) {
            if (!std::isfinite(alpha)) throw std::invalid_argument("intervention: alpha is not finite");
            if (layer < 0 || layer >= cfg.n_layers) {
                throw std::invalid_argument("intervention: l_add " + std::to_string(layer) + " outside [0," +
                                            std::to_string(cfg.n_layers) + ")");
            }
        }
    }

    std::string describe() const {
        std::ostringstream os;
        os << to_string(kind);
        if (kind == InterventionKind::add || kind == InterventionKind::subtract) {
            os << "(alpha=" << alpha << ",layer=" << layer << ")";
        }
        return os.str();
    }
};

// Residual-stream activations captured during a forward pass.
struct ActivationTrace {
    std::vector<Tensor> resid;     // L+1 entries, x^(l) as [T, d]
    std::vector<Tensor> attn_out;  // L entries, residual writes of attention
    std::vector<Tensor> mlp_out;   // L entries, residual writes of the MLP

    std::size_t num_layers() const { return resid.size(); }
    std::size_t seq_len() const { return resid.empty() ? 0 : resid[0].rows(); }
    std::vector<double> at(std::size_t layer, std::size_t position) const { return resid.at(layer).row(position); }
    std::vector<double> last(std::size_t layer) const { return at(layer, seq_len() - 1); }
};

struct ForwardResult {
    Tensor logits;  // [T, V]
    ActivationTrace trace;
};

namespace detail {

inline void check_finite(const Tensor& x, const std::string& where) {
    for (double v : x.data())
        if (!std::isfinite(v)) throw NumericError("forward: non-finite activation " + where);
}

struct Hook {
    InterventionKind kind = InterventionKind::none;
    Tensor rcol, rrow, shift;
    int layer = 0;

    Hook(const InterventionSpec& iv) : kind(iv.kind), layer(iv.layer) {
        if (kind == InterventionKind::none) return;
        const auto d = iv.direction.numel();
        const Tensor rhat = normalize(reshape(iv.direction, {d}));
        if (kind == InterventionKind::ablate) {
            rcol = reshape(rhat, {d, 1});
            rrow = reshape(rhat, {1, d});
        } else {
            shift = scale(rhat, kind == InterventionKind::add ? iv.alpha : -iv.alpha);
        }
    }

    Tensor write(const Tensor& x) const {
        if (kind != InterventionKind::ablate) return x;
        return sub(x, matmul(matmul(x, rcol), rrow));
    }

    Tensor stream(const Tensor& x, int l) const {
        if ((kind == InterventionKind::add || kind == InterventionKind::subtract) && l == layer) return add(x, shift);
        return x;
    }
};

inline Tensor attention(const ModelConfig& cfg, const LayerWeights& w, const Tensor& x) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto nh = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t dh = d / nh;
    const Tensor qkv = matmul(rms_norm(x, w.attn_gain), w.w_qkv);
    std::vector<Tensor> heads;
    heads.reserve(nh);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < nh; ++h) {
        const Tensor q = slice_cols(qkv, h * dh, (h + 1) * dh);
        const Tensor k = slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
        const Tensor v = slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        const Tensor p = softmax(scale(matmul_nt(q, k), inv_sqrt), /*causal=*/true);
        heads.push_back(matmul(p, v));
    }
    return matmul(nh == 1 ? heads[0] : concat(heads), w.w_o);
}

inline Tensor mlp(const LayerWeights& w, const Tensor& x) {
    const Tensor h = gelu(add(matmul(rms_norm(x, w.mlp_gain), w.w_in), w.b_in));
    return add(matmul(h, w.w_out), w.b_out);
}

}  // namespace detail

// Forward pass from precomputed token embeddings [T, d] (positions are added
// here). Used directly by the one-hot relaxation in suffix search.
inline ForwardResult forward_embedded(const ToyModel& model, const Tensor& token_embeddings,
                                      const InterventionSpec& iv = {}) {
    const auto& cfg = model.config();
    iv.validate(cfg);
    const std::size_t T = token_embeddings.rows();
    if (T == 0) throw std::invalid_argument("forward: empty token sequence");
    if (T > static_cast<std::size_t>(cfg.max_seq_len)) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    }
    if (token_embeddings.cols() != static_cast<std::size_t>(cfg.d_model)) {
        throw ShapeError("forward: embeddings " + shape_str(token_embeddings.shape()) + " vs d_model " +
                         std::to_string(cfg.d_model));
    }
    const detail::Hook hook(iv);
    ForwardResult out;
    auto& tr = out.trace;
    Tensor x = hook.write(add(token_embeddings, slice_rows(model.pos, 0, T)));
    for (int l = 0; l < cfg.n_layers; ++l) {
        x = hook.stream(x, l);
        tr.resid.push_back(x);
        detail::check_finite(x, "at layer " + std::to_string(l));
        const auto& w = model.layers[static_cast<std::size_t>(l)];
        const Tensor a = hook.write(detail::attention(cfg, w, x));
        tr.attn_out.push_back(a);
        x = add(x, a);
        const Tensor m = hook.write(detail::mlp(w, x));
        tr.mlp_out.push_back(m);
        x = add(x, m);
    }
    tr.resid.push_back(x);
    detail::check_finite(x, "at layer " + std::to_string(cfg.n_layers));
    out.logits = matmul(rms_norm(x, model.final_gain), model.unembed);
    return out;
}

inline ForwardResult forward(const ToyModel& model, std::span<const int> tokens, const InterventionSpec& iv = {}) {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    for (int t : tokens) {
        if (t < 0 || t >= model.config().vocab_size) {
            throw std::invalid_argument("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                                        std::to_string(model.config().vocab_size));
        }
    }
    return forward_embedded(model, embedding(model.embed, tokens), iv);
}

inline int argmax_row(const Tensor& logits, std::size_t r) {
    const std::size_t V = logits.cols();
    int best = 0;
    double bv = logits.at(r, 0);
    for (std::size_t j = 1; j < V; ++j) {
        if (logits.at(r, j) > bv) {
            bv = logits.at(r, j);
            best = static_cast<int>(j);
        }
    }
    return best;
}

namespace detail {
inline void check_context(const ToyModel& model, std::size_t prompt_len, int max_new_tokens) {
    if (max_new_tokens < 0) throw std::invalid_argument("generate: negative max_new_tokens");
    if (prompt_len == 0) throw std::invalid_argument("generate: empty prompt");
    if (prompt_len + static_cast<std::size_t>(max_new_tokens) > static_cast<std::size_t>(model.config().max_seq_len)) {
        throw std::invalid_argument("generate: context overflow, prompt " + std::to_string(prompt_len) + " + " +
                                    std::to_string(max_new_tokens) + " new tokens > max_seq_len " +
                                    std::to_string(model.config().max_seq_len));
    }
}
}  // namespace detail

// Greedy decoding; returns prompt followed by the continuation. Generation
// halts early after emitting `stop_token` when one is given.
inline Tokens generate(const ToyModel& model, std::span<const int> prompt, int max_new_tokens,
                       const InterventionSpec& iv = {}, std::optional<int> stop_token = std::nullopt) {
    detail::check_context(model, prompt.size(), max_new_tokens);
    Tokens seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new_tokens; ++step) {
        const auto res = forward(model, seq, iv);
        const int next = argmax_row(res.logits, seq.size() - 1);
        seq.push_back(next);
        if (stop_token && next == *stop_token) break;
    }
    return seq;
}

// Temperature sampling counterpart of generate().
template <class Rng>
Tokens generate_sampled(const ToyModel& model, std::span<const int> prompt, int max_new_tokens,
                        const InterventionSpec& iv, double temperature, Rng& rng,
                        std::optional<int> stop_token = std::nullopt) {
    if (!(temperature > 0.0)) throw std::invalid_argument("generate_sampled: temperature must be positive");
    detail::check_context(model, prompt.size(), max_new_tokens);
    Tokens seq(prompt.begin(), prompt.end());
    for (int step = 0; step < max_new_tokens; ++step) {
        const auto res = forward(model, seq, iv);
        const auto row = res.logits.row(seq.size() - 1);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : row) mx = std::max(mx, v);
        std::vector<double> w(row.size());
        for (std::size_t j = 0; j < row.size(); ++j) w[j] = std::exp((row[j] - mx) / temperature);
        std::discrete_distribution<int> dist(w.begin(), w.end());
        const int next = dist(rng);
        seq.push_back(next);
        if (stop_token && next == *stop_token) break;
    }
    return seq;
}

inline Tokens completion_of(std::span<const int> full, std::size_t prompt_len) {
    return Tokens(full.begin() + static_cast<std::ptrdiff_t>(prompt_len), full.end());
}

}  // namespace refgeo
