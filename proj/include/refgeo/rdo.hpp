#pragma once

// Refusal direction optimization: targets, the three weighted losses and the
// projected-gradient training loop over a unit direction.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/eval.hpp"
#include "refgeo/losses.hpp"
#include "refgeo/model.hpp"
#include "refgeo/optim.hpp"
#include "refgeo/selection.hpp"

namespace refgeo {

struct PromptRecord {
    Tokens p_harm;
    Tokens p_safe;
    Tokens t_answer;
    Tokens t_refusal;
    Tokens t_retain;

    bool complete() const {
        return !p_harm.empty() && !p_safe.empty() && !t_answer.empty() && !t_refusal.empty() && !t_retain.empty();
    }
};

// Toy analogs of the 30/30/29-token targets, shrunk to fit a 32-token context.
struct TargetConfig {
    int answer_len = 12;
    int refusal_len = 12;
    int retain_len = 11;
    double alpha = 0.0;  // 0: use the seed direction's norm_at_extraction
    int add_layer = -1;  // -1: use the seed direction's extraction layer
    double min_answer_rate = 0.5;
    // Drop pairs whose ablated completion still refuses; otherwise the
    // ablation loss would teach the seed direction's failures.
    bool drop_refused_answers = true;
    RefusalMatcher matcher = RefusalMatcher::toy();
};

struct TargetReport {
    std::vector<PromptRecord> records;
    std::vector<std::string> dropped;  // one log line per dropped pair
    double answer_rate = 0.0;          // share of generated t_answer that comply
    bool low_quality = false;
};

inline int resolve_add_layer(int requested, const Direction& d, const ModelConfig& cfg) {
    int l = requested >= 0 ? requested : d.layer;
    if (l < 0) l = cfg.n_layers / 2;
    return std::min(l, cfg.n_layers - 1);
}

// t_answer: greedy completion of p_harm under ablation of the seed direction.
// t_refusal: greedy completion of p_safe under activation addition.
// t_retain: greedy completion of p_safe without intervention.
inline TargetReport generate_targets(const ToyModel& model, const Direction& seed,
                                     const std::vector<std::pair<Tokens, Tokens>>& pairs, const TargetConfig& cfg = {}) {
    TargetReport rep;
    const double alpha = cfg.alpha > 0.0 ? cfg.alpha : seed.norm_at_extraction;
    const int layer = resolve_add_layer(cfg.add_layer, seed, model.config());
    const auto ablate = InterventionSpec::ablate(seed);
    const auto addition = InterventionSpec::add(seed, alpha, layer);
    std::size_t answered = 0, generated = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& [harm, safe] = pairs[i];
        try {
            PromptRecord r;
            r.p_harm = harm;
            r.p_safe = safe;
            r.t_answer = completion_of(generate(model, harm, cfg.answer_len, ablate), harm.size());
            r.t_refusal = completion_of(generate(model, safe, cfg.refusal_len, addition), safe.size());
            r.t_retain = completion_of(generate(model, safe, cfg.retain_len), safe.size());
            const bool complied = classify(r.t_answer, cfg.matcher) == Outcome::complied;
            answered += complied;
            ++generated;
            if (!complied && cfg.drop_refused_answers) {
                rep.dropped.push_back("pair " + std::to_string(i) + ": answer target does not comply");
                continue;
            }
            rep.records.push_back(std::move(r));
        } catch (const std::exception& e) {
            rep.dropped.push_back("pair " + std::to_string(i) + ": " + e.what());
        }
    }
    rep.answer_rate = generated == 0 ? 0.0 : static_cast<double>(answered) / static_cast<double>(generated);
    rep.low_quality = rep.answer_rate < cfg.min_answer_rate;
    return rep;
}

struct OptimConfig {
    double lambda_abl = 1.0;
    double lambda_add = 0.2;
    double lambda_ret = 1.0;
    double alpha = 1.0;
    int add_layer = 0;
    double lr = 0.01;
    int batch_size = 16;   // records per optimizer step
    int grad_accum = 16;   // micro-steps the batch is split into
    int max_steps = 200;
    int retain_mask_len = 0;  // 0: every t_retain token plus the last prompt token
    std::uint64_t seed = 0;

    // Plateau schedule: divide lr by 10 when the loss has not improved for
    // `plateau_patience` steps, at most `max_lr_reductions` times; then stop
    // once the loss stays flat for `flat_patience` steps. Neither happens
    // before `min_steps`.
    int plateau_patience = 5;
    double lr_factor = 0.1;
    int max_lr_reductions = 2;
    int flat_patience = 10;
    double improvement_tol = 1e-3;
    int min_steps = 0;

    int divergence_patience = 25;
    int pool_size = 20;

    // Directions the optimized vector must stay orthogonal to; gradient and
    // iterate are projected onto their orthogonal complement each step.
    std::vector<Direction> orthogonal_to;

    void validate() const {
        if (lambda_abl < 0 || lambda_add < 0 || lambda_ret < 0) throw std::invalid_argument("optim: negative loss weight");
        if (batch_size <= 0 || grad_accum <= 0 || batch_size % grad_accum != 0) {
            throw std::invalid_argument("optim: batch_size must be a positive multiple of grad_accum");
        }
        if (!(lr > 0.0) || max_steps <= 0) throw std::invalid_argument("optim: bad lr or max_steps");
        if (!std::isfinite(alpha)) throw std::invalid_argument("optim: alpha is not finite");
    }
};

struct LossTerms {
    Tensor ablation;
    Tensor addition;
    Tensor retain;
    Tensor total;
};

class NonFiniteLoss : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline std::vector<std::size_t> masked_positions(const PromptRecord& rec, int mask_len) {
    auto m = retain_mask(rec.p_safe.size(), rec.t_retain.size());
    if (mask_len > 0 && static_cast<std::size_t>(mask_len) < m.size()) {
        m.erase(m.begin(), m.end() - mask_len);
    }
    return m;
}

// ComputeLoss over a batch of records; each term is the mean over records.
// Terms with zero weight are skipped and reported as 0.
inline LossTerms compute_loss(const Tensor& r, const ToyModel& model, std::span<const PromptRecord> batch,
                              const OptimConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("compute_loss: empty batch");
    for (double v : r.data())
        if (!std::isfinite(v)) throw NonFiniteLoss("compute_loss: direction has non-finite entries");
    const auto ablate = InterventionSpec::ablate(r);
    const auto addition = InterventionSpec::add(r, cfg.alpha, cfg.add_layer);
    std::vector<Tensor> abl, add_t, ret;
    for (const auto& rec : batch) {
        if (cfg.lambda_abl > 0) abl.push_back(target_cross_entropy(model, rec.p_harm, rec.t_answer, ablate));
        if (cfg.lambda_add > 0) add_t.push_back(target_cross_entropy(model, rec.p_safe, rec.t_refusal, addition));
        if (cfg.lambda_ret > 0) {
            const auto mask = masked_positions(rec, cfg.retain_mask_len);
            ret.push_back(retain_kl(model, r, rec.p_safe, rec.t_retain, mask));
        }
    }
    auto mean_of = [](const std::vector<Tensor>& xs) {
        if (xs.empty()) return Tensor::scalar(0.0);
        Tensor s = xs[0];
        for (std::size_t i = 1; i < xs.size(); ++i) s = add(s, xs[i]);
        return scale(s, 1.0 / static_cast<double>(xs.size()));
    };
    LossTerms out;
    out.ablation = mean_of(abl);
    out.addition = mean_of(add_t);
    out.retain = mean_of(ret);
    std::vector<Tensor> parts;
    if (cfg.lambda_abl > 0) parts.push_back(scale(out.ablation, cfg.lambda_abl));
    if (cfg.lambda_add > 0) parts.push_back(scale(out.addition, cfg.lambda_add));
    if (cfg.lambda_ret > 0) parts.push_back(scale(out.retain, cfg.lambda_ret));
    out.total = parts.empty() ? Tensor::scalar(0.0) : parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out.total = add(out.total, parts[i]);
    if (!std::isfinite(out.total.item())) throw NonFiniteLoss("compute_loss: non-finite total loss");
    return out;
}

// Extra differentiable objective hooked into the training loop (used for the
// independence penalty); receives the raw parameter and the micro-batch.
using ExtraLoss = std::function<Tensor(const Tensor& r, std::span<const PromptRecord> batch)>;

struct StepLog {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct RdoResult {
    Direction direction;
    std::vector<Direction> pool;  // last `pool_size` iterates, oldest first
    std::vector<int> pool_steps;
    std::vector<StepLog> history;
    SelectionResult selection;
    int steps = 0;
};

class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seed for an independent stream keyed by (seed, a, b).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

inline void project_out(std::vector<double>& v, const std::vector<Direction>& basis) {
    for (const auto& b : basis) {
        const double p = dot(v, b.vector);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b.vector[i];
    }
}

inline void normalize_in_place(std::vector<double>& v) {
    const double n = norm2(v);
    if (!(n > 0.0)) throw NonFiniteLoss("direction collapsed to zero");
    for (auto& x : v) x /= n;
}

template <class Rng>
std::vector<double> random_unit(std::size_t d, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> v(d);
    for (auto& x : v) x = nd(rng);
    normalize_in_place(v);
    return v;
}

// Tracks the plateau / lr-reduction / stop rule.
class PlateauSchedule {
   public:
    explicit PlateauSchedule(const OptimConfig& cfg) : cfg_(cfg), lr_(cfg.lr) {}

    double lr() const { return lr_; }

    // Returns true when training should stop. Minibatch losses are noisy, so
    // the plateau test runs on the mean of the last `plateau_patience` steps.
    bool observe(int step, double loss) {
        window_.push_back(loss);
        if (static_cast<int>(window_.size()) > cfg_.plateau_patience) window_.pop_front();
        if (static_cast<int>(window_.size()) < cfg_.plateau_patience) return false;
        double smooth = 0.0;
        for (double v : window_) smooth += v;
        smooth /= static_cast<double>(window_.size());
        if (!std::isfinite(best_) || smooth < best_ - cfg_.improvement_tol * std::abs(best_)) {
            best_ = smooth;
            stale_ = 0;
        } else {
            ++stale_;
        }
        if (step < cfg_.min_steps) return false;
        if (reductions_ < cfg_.max_lr_reductions) {
            if (stale_ >= cfg_.plateau_patience) {
                lr_ *= cfg_.lr_factor;
                ++reductions_;
                stale_ = 0;
            }
            return false;
        }
        return stale_ >= cfg_.flat_patience;
    }

   private:
    const OptimConfig& cfg_;
    double lr_;
    double best_ = std::numeric_limits<double>::infinity();
    std::deque<double> window_;
    int stale_ = 0;
    int reductions_ = 0;
};

// Loss of a micro-batch given the parameter matrix [K, d]; `micro_seed`
// keys any Monte Carlo sampling inside the loss.
using MicroLoss = std::function<Tensor(const Tensor& params, std::span<const PromptRecord> batch,
                                       std::uint64_t micro_seed)>;
using Projection = std::function<void(std::vector<double>& flat)>;

struct ProjectedRun {
    std::vector<std::pair<int, std::vector<double>>> pool;
    std::vector<StepLog> history;
    int steps = 0;
};

// Shared projected-gradient loop: AdamW on the flattened [K, d] parameter,
// optional gradient projection, then projection of the iterate after every
// step. Batches are drawn with replacement from the dataset.
inline ProjectedRun train_projected(std::vector<double> params, std::size_t rows, const std::vector<PromptRecord>& dataset,
                                    const OptimConfig& cfg, const MicroLoss& loss_fn, const Projection& project_grad,
                                    const Projection& project_params) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("training: empty dataset");
    for (const auto& rec : dataset)
        if (!rec.complete()) throw std::invalid_argument("training: incomplete prompt record");
    const std::size_t n = params.size();
    const std::size_t d = n / rows;
    std::mt19937_64 batch_rng(derive_seed(cfg.seed, 0xba7c4));
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    AdamW opt({.lr = cfg.lr, .weight_decay = 0.0});
    PlateauSchedule sched(cfg);
    ProjectedRun run;
    const int micro = cfg.batch_size / cfg.grad_accum;
    double initial = std::numeric_limits<double>::quiet_NaN();
    int above_initial = 0;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        std::vector<double> grad(n, 0.0);
        double step_loss = 0.0;
        for (int a = 0; a < cfg.grad_accum; ++a) {
            std::vector<PromptRecord> batch;
            for (int b = 0; b < micro; ++b) batch.push_back(dataset[pick(batch_rng)]);
            Tensor p({rows, d}, params, true);
            Tensor loss = loss_fn(p, batch, derive_seed(cfg.seed, static_cast<std::uint64_t>(step), a));
            if (!std::isfinite(loss.item())) {
                throw NonFiniteLoss("training: non-finite loss at step " + std::to_string(step));
            }
            step_loss += loss.item() / cfg.grad_accum;
            const auto g = backward(loss).of(p);
            for (std::size_t i = 0; i < n; ++i) grad[i] += g[i] / cfg.grad_accum;
        }
        if (project_grad) project_grad(grad);
        opt.set_lr(sched.lr());
        std::vector<std::vector<double>*> ps{&params};
        opt.step(ps, {grad});
        project_params(params);

        run.history.push_back({step, step_loss, sched.lr()});
        run.pool.emplace_back(step, params);
        if (static_cast<int>(run.pool.size()) > cfg.pool_size) run.pool.erase(run.pool.begin());
        run.steps = step;

        if (std::isnan(initial)) initial = step_loss;
        above_initial = step_loss > initial ? above_initial + 1 : 0;
        if (above_initial >= cfg.divergence_patience) {
            std::ostringstream os;
            os << "training diverged: loss above initial " << initial << " for " << above_initial
               << " consecutive steps (last " << step_loss << ", lr " << sched.lr() << ", step " << step << ")";
            throw DivergenceError(os.str());
        }
        if (sched.observe(step, step_loss)) break;
    }
    return run;
}

inline std::vector<double> initial_vector(std::size_t d, const OptimConfig& cfg, std::uint64_t index = 0) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x1417, index));
    return random_unit(d, rng);
}

}  // namespace detail

// Projected gradient descent on a unit direction; returns the selected
// member of the final-iterate pool.
inline RdoResult rdo_train(const ToyModel& model, const std::vector<PromptRecord>& dataset, const OptimConfig& cfg,
                           const SelectionSet& validation, const ExtraLoss& extra = {},
                           std::optional<std::vector<double>> init = std::nullopt) {
    const auto d = static_cast<std::size_t>(model.config().d_model);
    std::vector<double> r = init ? *init : detail::initial_vector(d, cfg);
    if (r.size() != d) throw ShapeError("rdo_train: initial direction has wrong dimension");
    // Orthonormal basis of the constraint span, so one projection pass is exact.
    std::vector<Direction> constraints;
    for (const auto& o : cfg.orthogonal_to) {
        if (o.dim() != d) throw ShapeError("rdo_train: constraint direction has wrong dimension");
        auto v = o.vector;
        detail::project_out(v, constraints);
        detail::project_out(v, constraints);
        if (norm2(v) < 1e-8 * norm2(o.vector)) continue;
        constraints.push_back(Direction::from_vector(std::move(v), o.source));
    }
    auto project = [&](std::vector<double>& v) {
        detail::project_out(v, constraints);
        detail::normalize_in_place(v);
    };
    project(r);
    auto loss_fn = [&](const Tensor& p, std::span<const PromptRecord> batch, std::uint64_t) {
        const Tensor rt = row(p, 0);
        Tensor loss = compute_loss(rt, model, batch, cfg).total;
        if (extra) loss = add(loss, extra(rt, batch));
        return loss;
    };
    auto project_grad = [&](std::vector<double>& g) { detail::project_out(g, constraints); };
    auto run = detail::train_projected(std::move(r), 1, dataset, cfg, loss_fn, project_grad, project);

    RdoResult res;
    res.history = std::move(run.history);
    res.steps = run.steps;
    for (auto& [s, v] : run.pool) {
        auto dir = Direction::from_vector(v, DirectionSource::rdo, cfg.add_layer);
        dir.norm_at_extraction = cfg.alpha;
        dir.model_checksum = model.checksum();
        res.pool.push_back(std::move(dir));
        res.pool_steps.push_back(s);
    }
    res.selection = select_direction(model, res.pool, validation);
    res.direction = res.selection.direction;
    return res;
}

}  // namespace refgeo
