#pragma once

// Balanced train/val/test splits of labelled synthetic prompts.

#include <cstdint>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include "refgeo/task.hpp"

namespace refgeo {

struct LabeledPrompt {
    Tokens prompt;
    bool harmful = false;
};

struct DatasetSplits {
    std::vector<LabeledPrompt> train;
    std::vector<LabeledPrompt> val;
    std::vector<LabeledPrompt> test;
};

inline std::vector<Tokens> prompts_where(const std::vector<LabeledPrompt>& xs, bool harmful) {
    std::vector<Tokens> out;
    for (const auto& x : xs)
        if (x.harmful == harmful) out.push_back(x.prompt);
    return out;
}

// Alternating harmful/safe prompts, half of each (the extra one is harmful
// for odd sizes). No prompt appears twice across all splits.
inline DatasetSplits generate_dataset(const SyntheticTaskSpec& spec) {
    spec.validate();
    if (spec.train_size < 0 || spec.val_size < 0 || spec.test_size < 0) {
        throw std::invalid_argument("generate_dataset: negative split size");
    }
    std::mt19937_64 rng(spec.seed);
    std::set<Tokens> seen;
    auto fill = [&](int n) {
        std::vector<LabeledPrompt> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const bool harmful = i % 2 == 0;
            for (int attempt = 0;; ++attempt) {
                if (attempt > 100000) throw std::runtime_error("generate_dataset: prompt space exhausted");
                Tokens p = sample_prompt(spec, harmful, rng);
                if (seen.insert(p).second) {
                    out.push_back({std::move(p), harmful});
                    break;
                }
            }
        }
        return out;
    };
    DatasetSplits d;
    d.train = fill(spec.train_size);
    d.val = fill(spec.val_size);
    d.test = fill(spec.test_size);
    return d;
}

}  // namespace refgeo
