#pragma once

// Objectives shared by direction training and evaluation.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "refgeo/model.hpp"
#include "refgeo/ops.hpp"

namespace refgeo {

// KL(p || q) for two probability vectors.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
    return s;
}

inline Tokens concat_tokens(std::span<const int> a, std::span<const int> b) {
    Tokens out(a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

// Mean cross-entropy of `target` continuing `prompt` under an intervention.
inline Tensor target_cross_entropy(const ToyModel& model, std::span<const int> prompt, std::span<const int> target,
                                   const InterventionSpec& iv) {
    if (target.empty()) throw std::invalid_argument("cross-entropy: empty target");
    const Tokens seq = concat_tokens(prompt, target.first(target.size() - 1));
    const auto res = forward(model, seq, iv);
    const Tensor pred = slice_rows(res.logits, prompt.size() - 1, prompt.size() - 1 + target.size());
    return cross_entropy(pred, target);
}

// Positions scored by the retain loss: the last prompt token and every
// target token, i.e. the final |t_retain| + 1 positions of p_safe + t_retain.
inline std::vector<std::size_t> retain_mask(std::size_t prompt_len, std::size_t target_len) {
    std::vector<std::size_t> m;
    for (std::size_t i = prompt_len - 1; i < prompt_len + target_len; ++i) m.push_back(i);
    return m;
}

// Mean over masked positions of KL(f(p+t) || f_ablate(r)(p+t)), full vocabulary.
// `direction` may require gradients.
inline Tensor retain_kl(const ToyModel& model, const Tensor& direction, std::span<const int> p_safe,
                        std::span<const int> t_retain, std::span<const std::size_t> mask) {
    if (mask.empty()) throw std::invalid_argument("retain_kl: empty mask");
    const Tokens seq = concat_tokens(p_safe, t_retain);
    for (auto i : mask)
        if (i >= seq.size()) throw std::invalid_argument("retain_kl: mask index outside sequence");
    const auto clean = forward(model, seq);
    const auto ablated = forward(model, seq, InterventionSpec::ablate(direction));
    const Tensor logp = log_softmax(clean.logits);
    const Tensor logq = log_softmax(ablated.logits);
    const std::size_t V = clean.logits.cols();
    std::vector<Tensor> terms;
    terms.reserve(mask.size());
    for (auto i : mask) {
        const Tensor lp = row(logp, i);
        std::vector<double> p(V);
        for (std::size_t j = 0; j < V; ++j) p[j] = std::exp(lp[j]);
        terms.push_back(dot(Tensor::vector(std::move(p)), sub(lp, row(logq, i))));
    }
    Tensor total = terms[0];
    for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
    return scale(total, 1.0 / static_cast<double>(mask.size()));
}

inline Tensor retain_kl(const ToyModel& model, const Tensor& direction, std::span<const int> p_safe,
                        std::span<const int> t_retain) {
    const auto mask = retain_mask(p_safe.size(), t_retain.size());
    return retain_kl(model, direction, p_safe, t_retain, mask);
}

// Mean teacher-forced log-probability of the canonical refusal template.
inline double refusal_propensity(const ToyModel& model, std::span<const int> prompt, const InterventionSpec& iv) {
    return -target_cross_entropy(model, prompt, refusal_template(), iv).item();
}

inline double mean_refusal_propensity(const ToyModel& model, const std::vector<Tokens>& prompts,
                                      const InterventionSpec& iv) {
    double s = 0.0;
    for (const auto& p : prompts) s += refusal_propensity(model, p, iv);
    return prompts.empty() ? 0.0 : s / static_cast<double>(prompts.size());
}

}  // namespace refgeo
