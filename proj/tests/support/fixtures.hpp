#pragma once

// Models and prompt sets shared across test binaries. The trained toy model
// is cached under REFGEO_CACHE_DIR so only the first binary pays for it.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "refgeo/checkpoint.hpp"
#include "refgeo/dim.hpp"
#include "refgeo/rdo.hpp"
#include "refgeo/task.hpp"
#include "refgeo/train.hpp"

#ifndef REFGEO_CACHE_DIR
#define REFGEO_CACHE_DIR "."
#endif

namespace fixtures {

using namespace refgeo;

// Untrained model, small enough for finite differences.
inline ToyModel tiny_model(std::uint64_t seed = 3, int n_layers = 2, int d_model = 16) {
    ModelConfig c;
    c.vocab_size = 32;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = 2;
    c.d_mlp = 2 * d_model;
    c.max_seq_len = 32;
    c.seed = seed;
    return ToyModel::init(c);
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

inline ToyTrainConfig toy_train_config() {
    ToyTrainConfig cfg;
    cfg.seed = 7;
    cfg.model.seed = 0;
    return cfg;
}

inline std::string cache_path(const std::string& name) {
    return (std::filesystem::path(REFGEO_CACHE_DIR) / name).string();
}

// The calibrated toy model, trained once and then loaded from disk.
inline const ToyModel& trained_toy() {
    static const ToyModel model = [] {
        const auto path = cache_path("toy_s7_m0.ckpt");
        if (std::filesystem::exists(path)) return load_checkpoint(path);
        auto res = train_toy_model(toy_train_config());
        save_checkpoint(res.model, path);
        return res.model;
    }();
    return model;
}

struct PromptSets {
    std::vector<Tokens> harm_train, safe_train;
    std::vector<Tokens> harm_test, safe_test;
};

inline PromptSets prompt_sets(std::uint64_t seed, std::size_t n_train, std::size_t n_test) {
    SyntheticTaskSpec task;
    std::mt19937_64 rng(seed);
    PromptSets s;
    for (std::size_t i = 0; i < n_train; ++i) {
        s.harm_train.push_back(sample_prompt(task, true, rng));
        s.safe_train.push_back(sample_prompt(task, false, rng));
    }
    for (std::size_t i = 0; i < n_test; ++i) {
        s.harm_test.push_back(sample_prompt(task, true, rng));
        s.safe_test.push_back(sample_prompt(task, false, rng));
    }
    return s;
}

// Hand-built record for loss tests on untrained models.
inline PromptRecord toy_record(std::uint64_t seed) {
    SyntheticTaskSpec task;
    std::mt19937_64 rng(seed);
    PromptRecord r;
    r.p_harm = sample_prompt(task, true, rng);
    r.p_safe = sample_prompt(task, false, rng);
    r.t_answer = answer_completion(r.p_harm);
    r.t_answer.resize(4);
    r.t_refusal = Tokens(refusal_template().begin(), refusal_template().begin() + 4);
    r.t_retain = {tok::answer, 12, 13};
    return r;
}

}  // namespace fixtures
