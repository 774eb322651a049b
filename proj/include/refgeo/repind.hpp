#pragma once

// Representational independence: per-layer cosine profiles under ablation,
// the independence penalty and the search for directions that satisfy it.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/eval.hpp"
#include "refgeo/model.hpp"
#include "refgeo/ops.hpp"
#include "refgeo/rdo.hpp"
#include "refgeo/selection.hpp"

namespace refgeo {

struct CosineProfile {
    std::vector<double> values;  // one per residual layer 0..L, last prompt token
    std::string intervention;
};

// Mean over prompts of cos(direction, x_last^(l)) for every layer.
inline CosineProfile cosine_profile(const ToyModel& model, std::span<const double> direction,
                                    const std::vector<Tokens>& prompts, const InterventionSpec& iv = InterventionSpec::none()) {
    if (prompts.empty()) throw std::invalid_argument("cosine_profile: no prompts");
    if (direction.size() != static_cast<std::size_t>(model.config().d_model)) {
        throw ShapeError("cosine_profile: direction has " + std::to_string(direction.size()) + " entries, model width is " +
                         std::to_string(model.config().d_model));
    }
    CosineProfile prof;
    prof.intervention = iv.describe();
    prof.values.assign(static_cast<std::size_t>(model.config().n_layers) + 1, 0.0);
    for (const auto& p : prompts) {
        const auto res = forward(model, p, iv);
        for (std::size_t l = 0; l < prof.values.size(); ++l) {
            const auto x = res.trace.last(l);
            const double nx = norm2(x), nd = norm2(direction);
            prof.values[l] += nx > 0.0 && nd > 0.0 ? dot(x, direction) / (nx * nd) : 0.0;
        }
    }
    for (auto& v : prof.values) v /= static_cast<double>(prompts.size());
    return prof;
}

inline CosineProfile cosine_profile(const ToyModel& model, const Direction& direction, const std::vector<Tokens>& prompts,
                                    const InterventionSpec& iv = InterventionSpec::none()) {
    return cosine_profile(model, std::span<const double>(direction.vector), prompts, iv);
}

// Residual layers inside the first `cutoff` fraction of the L + 1 layers:
// floor(cutoff * (L + 1)), at least one. Rounding down keeps the final layer
// out of the set even when L is small.
inline std::vector<std::size_t> repind_layers(int n_layers, double cutoff = 0.9) {
    if (!(cutoff > 0.0 && cutoff <= 1.0)) throw std::invalid_argument("repind: layer cutoff must lie in (0, 1]");
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(cutoff * static_cast<double>(n_layers + 1) + 1e-9)));
    std::vector<std::size_t> ls(count);
    for (std::size_t l = 0; l < count; ++l) ls[l] = l;
    return ls;
}

// (1/|L|) sum_l [(cos(x,r) - cos(x_abl(v),r))^2 + (cos(x,v) - cos(x_abl(r),v))^2],
// averaged over every token of the prompt. Differentiable in r.
inline Tensor repind_loss(const ToyModel& model, const Tensor& r, const Tensor& v, std::span<const int> prompt,
                          std::span<const std::size_t> layers) {
    if (layers.empty()) throw std::invalid_argument("repind_loss: empty layer set");
    const auto n_resid = static_cast<std::size_t>(model.config().n_layers) + 1;
    for (auto l : layers)
        if (l >= n_resid) throw std::invalid_argument("repind_loss: layer " + std::to_string(l) + " out of range");
    const Tensor vc = v.detach();
    const auto clean = forward(model, prompt);
    const auto abl_v = forward(model, prompt, InterventionSpec::ablate(vc));
    const auto abl_r = forward(model, prompt, InterventionSpec::ablate(r));
    Tensor total = Tensor::scalar(0.0);
    for (auto l : layers) {
        const Tensor d_r = sub(row_cosines(clean.trace.resid[l], r), row_cosines(abl_v.trace.resid[l], r));
        const Tensor d_v = sub(row_cosines(clean.trace.resid[l], vc), row_cosines(abl_r.trace.resid[l], vc));
        total = add(total, add(mean(square(d_r)), mean(square(d_v))));
    }
    return scale(total, 1.0 / static_cast<double>(layers.size()));
}

struct IndependenceConstraintSet {
    std::vector<Direction> references;
    double layer_cutoff = 0.9;
    double lambda_ind = 200.0;

    void validate(std::size_t d_model) const {
        if (!(layer_cutoff > 0.0 && layer_cutoff <= 1.0)) throw std::invalid_argument("repind: layer cutoff must lie in (0, 1]");
        if (lambda_ind < 0.0) throw std::invalid_argument("repind: negative lambda_ind");
        for (const auto& v : references) {
            if (v.dim() != d_model) throw ShapeError("repind: constraint direction has wrong dimension");
            if (std::abs(norm2(v.vector) - 1.0) > 1e-9) throw std::invalid_argument("repind: constraint direction not unit-norm");
        }
    }
};

// lambda_ind * sum over references of the batch-mean independence loss.
inline ExtraLoss make_repind_penalty(const ToyModel& model, const IndependenceConstraintSet& cs) {
    const auto layers = repind_layers(model.config().n_layers, cs.layer_cutoff);
    return [&model, cs, layers](const Tensor& r, std::span<const PromptRecord> batch) {
        Tensor total = Tensor::scalar(0.0);
        for (const auto& v : cs.references) {
            const Tensor vt = v.tensor();
            for (const auto& rec : batch) total = add(total, repind_loss(model, r, vt, rec.p_harm, layers));
        }
        return scale(total, cs.lambda_ind / static_cast<double>(batch.size()));
    };
}

struct RepIndCandidate {
    Direction direction;
    CandidateScore score;
    double validation_asr = 0.0;
    std::uint64_t seed = 0;
    std::vector<StepLog> history;
};

struct RepIndResult {
    Direction direction;
    std::size_t selected = 0;
    std::vector<RepIndCandidate> candidates;
    double random_baseline_asr = 0.0;
    bool failed = false;  // no candidate beat the random-direction ASR
};

// Trains `n_candidates` penalized directions with distinct seeds and keeps
// the one whose ablation lowers validation refusal propensity the most.
inline RepIndResult train_repind_direction(const ToyModel& model, const std::vector<PromptRecord>& dataset,
                                           const IndependenceConstraintSet& cs, const OptimConfig& cfg,
                                           const SelectionSet& validation, int n_candidates = 5,
                                           const EvalOptions& opt = {}) {
    const auto d = static_cast<std::size_t>(model.config().d_model);
    cs.validate(d);
    if (n_candidates < 1) throw std::invalid_argument("repind: need at least one candidate");
    if (validation.harmful.empty()) throw std::invalid_argument("repind: empty validation set");
    const ExtraLoss penalty = cs.references.empty() ? ExtraLoss{} : make_repind_penalty(model, cs);
    RepIndResult res;
    {
        std::mt19937_64 rng(detail::derive_seed(cfg.seed, 0x7a4d));
        const auto rd = Direction::from_vector(detail::random_unit(d, rng), DirectionSource::random);
        res.random_baseline_asr = asr(model, validation.harmful, InterventionSpec::ablate(rd), opt).asr;
    }
    const double base = mean_refusal_propensity(model, validation.harmful, InterventionSpec::none());
    std::vector<CandidateScore> scores;
    for (int k = 0; k < n_candidates; ++k) {
        OptimConfig c = cfg;
        c.seed = k == 0 ? cfg.seed : detail::derive_seed(cfg.seed, 0xca9d, static_cast<std::uint64_t>(k));
        auto run = rdo_train(model, dataset, c, validation, penalty);
        RepIndCandidate cand;
        cand.direction = run.direction;
        cand.direction.source = DirectionSource::repind;
        cand.seed = c.seed;
        cand.history = std::move(run.history);
        cand.score = score_candidate(model, cand.direction, validation, base);
        cand.validation_asr = asr(model, validation.harmful, InterventionSpec::ablate(cand.direction), opt).asr;
        scores.push_back(cand.score);
        res.candidates.push_back(std::move(cand));
    }
    res.selected = 0;
    for (std::size_t k = 1; k < scores.size(); ++k)
        if (scores[k].ablated_propensity < scores[res.selected].ablated_propensity) res.selected = k;
    res.direction = res.candidates[res.selected].direction;
    res.failed = std::none_of(res.candidates.begin(), res.candidates.end(), [&](const RepIndCandidate& c) {
        return c.validation_asr > res.random_baseline_asr;
    });
    return res;
}

struct IndependenceReport {
    std::vector<std::size_t> layers;
    std::vector<double> deviation_r;  // |cos(x, r) - cos(x_abl(v), r)| per layer
    std::vector<double> deviation_v;  // |cos(x, v) - cos(x_abl(r), v)| per layer
    double max_deviation_r = 0.0;
    double max_deviation_v = 0.0;
    double epsilon = 0.05;
    bool pass = false;
};

// Deviations are averaged over prompts, then maximized over the layer set.
inline IndependenceReport verify_independence(const ToyModel& model, const Direction& r, const Direction& v,
                                              const std::vector<Tokens>& prompts, double epsilon = 0.05,
                                              double layer_cutoff = 0.9) {
    IndependenceReport rep;
    rep.epsilon = epsilon;
    rep.layers = repind_layers(model.config().n_layers, layer_cutoff);
    const auto cr = cosine_profile(model, r, prompts);
    const auto cr_abl = cosine_profile(model, r, prompts, InterventionSpec::ablate(v));
    const auto cv = cosine_profile(model, v, prompts);
    const auto cv_abl = cosine_profile(model, v, prompts, InterventionSpec::ablate(r));
    for (auto l : rep.layers) {
        rep.deviation_r.push_back(std::abs(cr.values[l] - cr_abl.values[l]));
        rep.deviation_v.push_back(std::abs(cv.values[l] - cv_abl.values[l]));
    }
    rep.max_deviation_r = *std::max_element(rep.deviation_r.begin(), rep.deviation_r.end());
    rep.max_deviation_v = *std::max_element(rep.deviation_v.begin(), rep.deviation_v.end());
    rep.pass = rep.max_deviation_r < epsilon && rep.max_deviation_v < epsilon;
    return rep;
}

}  // namespace refgeo
