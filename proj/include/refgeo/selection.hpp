#pragma once

// Picks the most effective direction from a candidate pool.
//
// Score: mean over harmful validation prompts of the drop in refusal
// propensity (teacher-forced mean log-prob of the refusal template) caused
// by ablating the candidate. Candidates whose side-effect KL on safe prompts
// exceeds the threshold are filtered first; ties go to the lower KL, then the
// lower index.

#include <limits>
#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/eval.hpp"
#include "refgeo/losses.hpp"

namespace refgeo {

struct SelectionSet {
    std::vector<Tokens> harmful;
    std::vector<RetainPair> safe;
    double kl_threshold = 0.1;
};

struct CandidateScore {
    double refusal_score = 0.0;
    double kl = 0.0;
    double ablated_propensity = 0.0;
};

struct SelectionResult {
    std::size_t index = 0;
    Direction direction;
    CandidateScore score;
    bool warning = false;  // every candidate exceeded the KL threshold
    std::vector<CandidateScore> all;
};

inline CandidateScore score_candidate(const ToyModel& model, const Direction& d, const SelectionSet& set,
                                      double baseline_propensity) {
    CandidateScore s;
    s.ablated_propensity = mean_refusal_propensity(model, set.harmful, InterventionSpec::ablate(d));
    s.refusal_score = baseline_propensity - s.ablated_propensity;
    s.kl = side_effect_kl(model, d, set.safe);
    return s;
}

// Filter-then-rank over precomputed scores.
inline std::size_t select_index(const std::vector<CandidateScore>& scores, double kl_threshold, bool* warning = nullptr) {
    if (scores.empty()) throw std::invalid_argument("select_direction: no candidates");
    auto better = [](const CandidateScore& a, std::size_t ia, const CandidateScore& b, std::size_t ib) {
        if (a.refusal_score != b.refusal_score) return a.refusal_score > b.refusal_score;
        if (a.kl != b.kl) return a.kl < b.kl;
        return ia < ib;
    };
    std::size_t best = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!(scores[i].kl < kl_threshold)) continue;
        if (best == scores.size() || better(scores[i], i, scores[best], best)) best = i;
    }
    if (warning) *warning = best == scores.size();
    if (best == scores.size()) {
        best = 0;
        for (std::size_t i = 1; i < scores.size(); ++i)
            if (better(scores[i], i, scores[best], best)) best = i;
    }
    return best;
}

inline SelectionResult select_direction(const ToyModel& model, const std::vector<Direction>& candidates,
                                        const SelectionSet& set) {
    if (candidates.empty()) throw std::invalid_argument("select_direction: no candidates");
    SelectionResult res;
    if (candidates.size() == 1) {
        res.direction = candidates[0];
        return res;
    }
    const double base = mean_refusal_propensity(model, set.harmful, InterventionSpec::none());
    for (const auto& c : candidates) res.all.push_back(score_candidate(model, c, set, base));
    res.index = select_index(res.all, set.kl_threshold, &res.warning);
    res.direction = candidates[res.index];
    res.score = res.all[res.index];
    return res;
}

}  // namespace refgeo
