#pragma once

// Greedy coordinate search for adversarial suffixes. The objective mixes the
// cross-entropy of a compliance target with the squared cosine between a
// direction and the last-token residual over the late layers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/losses.hpp"
#include "refgeo/model.hpp"
#include "refgeo/ops.hpp"
#include "refgeo/repind.hpp"
#include "refgeo/task.hpp"

namespace refgeo {

struct SuffixAttackConfig {
    int suffix_length = 4;
    int top_k = 8;  // exact evaluations per position per iteration
    int max_iterations = 32;
    double w_ce = 1.0;
    double w_dir = 1.0;
    double late_fraction = 0.25;
    // Cartesian products of per-position pools up to this size are
    // evaluated jointly instead of one coordinate at a time.
    int joint_budget = 1024;
    std::vector<int> allowed_tokens;  // empty: every non-special token
    std::uint64_t seed = 0;

    void validate(int vocab) const {
        if (suffix_length < 1) throw std::invalid_argument("attack: suffix_length must be at least 1");
        if (top_k < 1) throw std::invalid_argument("attack: top_k must be at least 1");
        if (max_iterations < 0) throw std::invalid_argument("attack: max_iterations must be nonnegative");
        if (w_ce < 0.0 || w_dir < 0.0) throw std::invalid_argument("attack: negative loss weight");
        if (!(late_fraction > 0.0 && late_fraction <= 1.0)) throw std::invalid_argument("attack: late_fraction must lie in (0, 1]");
        for (int t : allowed_tokens)
            if (t < 0 || t >= vocab) throw std::invalid_argument("attack: allowed token " + std::to_string(t) + " outside vocabulary");
    }

    std::vector<int> pool(int vocab) const {
        if (!allowed_tokens.empty()) return allowed_tokens;
        std::vector<int> p;
        for (int t = tok::num_special; t < vocab; ++t) p.push_back(t);
        return p;
    }
};

// Last ceil(fraction * (L + 1)) residual layers.
inline std::vector<std::size_t> late_layers(int n_layers, double fraction = 0.25) {
    const auto total = static_cast<std::size_t>(n_layers) + 1;
    const auto count = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total) - 1e-9)), 1, total);
    std::vector<std::size_t> ls;
    for (std::size_t l = total - count; l < total; ++l) ls.push_back(l);
    return ls;
}

// BOS content EOP -> BOS content suffix EOP.
inline Tokens insert_suffix(std::span<const int> prompt, std::span<const int> suffix) {
    if (prompt.empty() || prompt.back() != tok::eop) throw std::invalid_argument("attack: prompt must end with EOP");
    Tokens out(prompt.begin(), prompt.end() - 1);
    out.insert(out.end(), suffix.begin(), suffix.end());
    out.push_back(tok::eop);
    return out;
}

namespace detail {

inline Tensor attack_objective(const ForwardResult& res, std::size_t prompt_len,
                               std::span<const int> target, const Tensor& direction,
                               std::span<const std::size_t> layers, double w_ce, double w_dir) {
    Tensor loss = Tensor::scalar(0.0);
    if (w_ce > 0.0) {
        const Tensor pred = slice_rows(res.logits, prompt_len - 1, prompt_len - 1 + target.size());
        loss = add(loss, scale(cross_entropy(pred, target), w_ce));
    }
    if (w_dir > 0.0) {
        Tensor c = Tensor::scalar(0.0);
        for (auto l : layers) c = add(c, square(cosine(row(res.trace.resid[l], prompt_len - 1), direction)));
        loss = add(loss, scale(c, w_dir / static_cast<double>(layers.size())));
    }
    return loss;
}

}  // namespace detail

// w_ce * CE(target | prompt) + w_dir * mean over late layers of cos(direction, x_last)^2.
// `prompt` already contains any suffix.
inline double attack_loss(const ToyModel& model, std::span<const int> prompt, std::span<const int> target,
                          const Direction& direction, double w_ce = 1.0, double w_dir = 1.0, double late_fraction = 0.25) {
    if (target.empty()) throw std::invalid_argument("attack_loss: empty target");
    if (direction.dim() != static_cast<std::size_t>(model.config().d_model)) throw ShapeError("attack_loss: direction width");
    const auto layers = late_layers(model.config().n_layers, late_fraction);
    const Tokens seq = concat_tokens(prompt, target.first(target.size() - 1));
    const auto res = forward(model, seq);
    return detail::attack_objective(res, prompt.size(), target, direction.tensor(), layers, w_ce, w_dir).item();
}

struct SuffixAttackResult {
    Tokens suffix;
    Tokens attacked_prompt;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_trace;  // best-so-far after each iteration
    int iterations = 0;
    bool early_stopped = false;  // a full sweep found no improving swap
    CosineProfile before;
    CosineProfile after;
};

// Differentiable loss w.r.t. a one-hot relaxation of the full sequence.
inline std::vector<std::vector<double>> suffix_token_gradients(const ToyModel& model, std::span<const int> prompt,
                                                               std::size_t suffix_begin, std::size_t suffix_len,
                                                               std::span<const int> target, const Direction& direction,
                                                               const SuffixAttackConfig& cfg) {
    const auto V = static_cast<std::size_t>(model.config().vocab_size);
    const Tokens seq = concat_tokens(prompt, target.first(target.size() - 1));
    std::vector<double> onehot(seq.size() * V, 0.0);
    for (std::size_t t = 0; t < seq.size(); ++t) onehot[t * V + static_cast<std::size_t>(seq[t])] = 1.0;
    Tensor oh({seq.size(), V}, std::move(onehot), true);
    const auto res = forward_embedded(model, matmul(oh, model.embed));
    const auto layers = late_layers(model.config().n_layers, cfg.late_fraction);
    const Tensor loss =
        detail::attack_objective(res, prompt.size(), target, direction.tensor(), layers, cfg.w_ce, cfg.w_dir);
    const auto g = backward(loss).of(oh);
    std::vector<std::vector<double>> out(suffix_len, std::vector<double>(V));
    for (std::size_t i = 0; i < suffix_len; ++i)
        for (std::size_t v = 0; v < V; ++v) out[i][v] = g[(suffix_begin + i) * V + v];
    return out;
}

// Greedy coordinate search: candidates per position are the top-k tokens by
// most negative one-hot gradient, each evaluated exactly; the best single
// swap (or best joint assignment when the pool product is small) is kept if
// it improves the loss.
inline SuffixAttackResult suffix_attack(const ToyModel& model, std::span<const int> prompt, std::span<const int> target,
                                        const Direction& direction, const SuffixAttackConfig& cfg) {
    const auto& mc = model.config();
    cfg.validate(mc.vocab_size);
    if (target.empty()) throw std::invalid_argument("suffix_attack: empty target");
    const std::size_t L = static_cast<std::size_t>(cfg.suffix_length);
    const std::size_t total = prompt.size() + L + target.size() - 1;
    if (total > static_cast<std::size_t>(mc.max_seq_len)) {
        throw std::invalid_argument("suffix_attack: prompt + suffix + target needs " + std::to_string(total) +
                                    " positions, context is " + std::to_string(mc.max_seq_len));
    }
    const auto pool = cfg.pool(mc.vocab_size);
    if (pool.empty()) throw std::invalid_argument("suffix_attack: empty token pool");
    const std::size_t suffix_begin = prompt.size() - 1;

    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    Tokens suffix(L);
    for (auto& t : suffix) t = pool[pick(rng)];

    auto eval = [&](const Tokens& s) {
        return attack_loss(model, insert_suffix(prompt, s), target, direction, cfg.w_ce, cfg.w_dir, cfg.late_fraction);
    };

    SuffixAttackResult res;
    res.before = cosine_profile(model, direction, {Tokens(prompt.begin(), prompt.end())});
    double best = eval(suffix);
    res.initial_loss = best;
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), pool.size());

    for (int it = 0; it < cfg.max_iterations; ++it) {
        const auto grads =
            suffix_token_gradients(model, insert_suffix(prompt, suffix), suffix_begin, L, target, direction, cfg);
        std::vector<std::vector<int>> cands(L);
        std::size_t product = 1;
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<int> order = pool;
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return grads[i][a] < grads[i][b]; });
            order.resize(k);
            if (std::find(order.begin(), order.end(), suffix[i]) == order.end()) order.push_back(suffix[i]);
            cands[i] = std::move(order);
            product = product > static_cast<std::size_t>(cfg.joint_budget) ? product : product * cands[i].size();
        }
        Tokens best_suffix = suffix;
        double best_loss = best;
        if (product <= static_cast<std::size_t>(cfg.joint_budget)) {
            std::vector<std::size_t> idx(L, 0);
            for (;;) {
                Tokens s(L);
                for (std::size_t i = 0; i < L; ++i) s[i] = cands[i][idx[i]];
                if (s != suffix) {
                    const double l = eval(s);
                    if (l < best_loss) {
                        best_loss = l;
                        best_suffix = s;
                    }
                }
                std::size_t i = 0;
                while (i < L && ++idx[i] == cands[i].size()) idx[i++] = 0;
                if (i == L) break;
            }
        } else {
            for (std::size_t i = 0; i < L; ++i) {
                for (int c : cands[i]) {
                    if (c == suffix[i]) continue;
                    Tokens s = suffix;
                    s[i] = c;
                    const double l = eval(s);
                    if (l < best_loss) {
                        best_loss = l;
                        best_suffix = std::move(s);
                    }
                }
            }
        }
        res.iterations = it + 1;
        if (!(best_loss < best)) {
            res.early_stopped = true;
            res.loss_trace.push_back(best);
            break;
        }
        best = best_loss;
        suffix = std::move(best_suffix);
        res.loss_trace.push_back(best);
    }
    res.suffix = suffix;
    res.final_loss = best;
    res.attacked_prompt = insert_suffix(prompt, suffix);
    res.after = cosine_profile(model, direction, {res.attacked_prompt});
    return res;
}

// Mean of a cosine profile over the late layers.
inline double late_mean(const CosineProfile& p, int n_layers, double fraction = 0.25) {
    double s = 0.0;
    const auto ls = late_layers(n_layers, fraction);
    for (auto l : ls) s += p.values.at(l);
    return s / static_cast<double>(ls.size());
}

}  // namespace refgeo
