#pragma once

// Supervised training of the toy model on the synthetic refusal task.

#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "refgeo/model.hpp"
#include "refgeo/optim.hpp"
#include "refgeo/task.hpp"

namespace refgeo {

struct ToyTrainConfig {
    ModelConfig model;
    SyntheticTaskSpec task;
    int completion_len = 12;
    int batch_size = 16;
    int max_steps = 4000;
    int warmup_steps = 50;
    double lr = 3e-3;
    double target_accuracy = 0.99;
    int eval_every = 100;
    int eval_size = 256;
    std::uint64_t seed = 7;
};

struct LearningCurvePoint {
    int step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct ToyTrainResult {
    ToyModel model;
    std::vector<LearningCurvePoint> curve;
    double accuracy = 0.0;
    int steps = 0;
};

class TrainingError : public std::runtime_error {
   public:
    TrainingError(const std::string& what, std::vector<LearningCurvePoint> curve)
        : std::runtime_error(what), curve_(std::move(curve)) {}
    const std::vector<LearningCurvePoint>& curve() const { return curve_; }

   private:
    std::vector<LearningCurvePoint> curve_;
};

struct TaskExample {
    Tokens prompt;
    Tokens completion;
    bool harmful = false;
};

template <class Rng>
TaskExample sample_example(const SyntheticTaskSpec& task, int completion_len, Rng& rng) {
    TaskExample ex;
    ex.harmful = std::bernoulli_distribution(0.5)(rng);
    ex.prompt = sample_prompt(task, ex.harmful, rng);
    ex.completion = expected_completion(task, ex.prompt, completion_len);
    return ex;
}

// Mean cross-entropy of the completion given the prompt, teacher-forced.
inline Tensor completion_loss(const Tensor& logits, std::size_t prompt_len, std::span<const int> completion) {
    const Tensor pred = slice_rows(logits, prompt_len - 1, prompt_len - 1 + completion.size());
    return cross_entropy(pred, completion);
}

// Fraction of completion tokens predicted correctly under teacher forcing.
inline double task_accuracy(const ToyModel& model, const std::vector<TaskExample>& examples) {
    std::size_t hit = 0, total = 0;
    for (const auto& ex : examples) {
        Tokens seq = ex.prompt;
        seq.insert(seq.end(), ex.completion.begin(), ex.completion.end());
        const auto res = forward(model, seq);
        for (std::size_t j = 0; j < ex.completion.size(); ++j) {
            hit += argmax_row(res.logits, ex.prompt.size() - 1 + j) == ex.completion[j];
            ++total;
        }
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

inline std::vector<TaskExample> heldout_examples(const ToyTrainConfig& cfg) {
    std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
    std::vector<TaskExample> out;
    for (int i = 0; i < cfg.eval_size; ++i) out.push_back(sample_example(cfg.task, cfg.completion_len, rng));
    return out;
}

inline ToyTrainResult train_toy_model(const ToyTrainConfig& cfg,
                                      const std::function<void(const LearningCurvePoint&)>& on_eval = {}) {
    cfg.task.validate();
    if (cfg.model.vocab_size != cfg.task.vocab_size) {
        throw std::invalid_argument("train: model vocab_size differs from task vocab_size");
    }
    if (cfg.task.max_prompt_len() + cfg.completion_len > cfg.model.max_seq_len) {
        throw std::invalid_argument("train: prompt + completion exceeds max_seq_len");
    }
    ToyTrainResult res;
    res.model = ToyModel::init(cfg.model);
    auto params = res.model.named_parameters();
    res.model.set_trainable(true);
    std::vector<std::vector<double>*> buffers;
    for (auto& [name, t] : params) buffers.push_back(&t->mutable_data());

    AdamW opt({.lr = cfg.lr, .weight_decay = 0.0});
    std::mt19937_64 rng(cfg.seed);
    const auto heldout = heldout_examples(cfg);
    double running = 0.0;
    int since_eval = 0;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        Gradients acc;
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto ex = sample_example(cfg.task, cfg.completion_len, rng);
            Tokens seq = ex.prompt;
            seq.insert(seq.end(), ex.completion.begin(), ex.completion.end() - 1);
            const auto out = forward(res.model, seq);
            const Tensor loss = completion_loss(out.logits, ex.prompt.size(), ex.completion);
            batch_loss += loss.item();
            acc.accumulate(backward(loss));
        }
        std::vector<std::vector<double>> grads;
        grads.reserve(params.size());
        for (auto& [name, t] : params) {
            auto g = acc.of(*t);
            for (auto& v : g) v /= cfg.batch_size;
            grads.push_back(std::move(g));
        }
        opt.set_lr(cfg.lr * std::min(1.0, static_cast<double>(step) / std::max(1, cfg.warmup_steps)));
        opt.step(buffers, grads);
        running += batch_loss / cfg.batch_size;
        ++since_eval;
        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            res.model.set_trainable(false);
            LearningCurvePoint pt{step, running / since_eval, task_accuracy(res.model, heldout)};
            res.model.set_trainable(true);
            running = 0.0;
            since_eval = 0;
            res.curve.push_back(pt);
            if (on_eval) on_eval(pt);
            res.steps = step;
            res.accuracy = pt.accuracy;
            if (pt.accuracy >= cfg.target_accuracy) break;
        }
    }
    res.model.set_trainable(false);
    if (res.accuracy < cfg.target_accuracy) {
        std::ostringstream os;
        os << "train: accuracy " << res.accuracy << " below target " << cfg.target_accuracy << " after " << res.steps
           << " steps; curve:";
        for (const auto& p : res.curve) os << " (" << p.step << ", loss " << p.loss << ", acc " << p.accuracy << ")";
        throw TrainingError(os.str(), res.curve);
    }
    return res;
}

}  // namespace refgeo
