#pragma once

// Polyhedral refusal cones: an orthonormal basis B = [b_1..b_N] spanning
// {sum_i l_i b_i | l_i >= 0} \ {0}, uniform sampling of unit directions in
// it, and joint basis training with Gram-Schmidt re-projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/eval.hpp"
#include "refgeo/rdo.hpp"
#include "refgeo/selection.hpp"

namespace refgeo {

class DegenerateBasis : public std::runtime_error {
   public:
    DegenerateBasis(std::size_t index, const std::string& what)
        : std::runtime_error(what), index_(index) {}
    std::size_t index() const { return index_; }

   private:
    std::size_t index_;
};

inline constexpr double kDegenerateResidual = 1e-8;

// Classical Gram-Schmidt with one re-orthogonalization pass. Inputs are
// scaled to unit length first, so the residual test is scale-free.
inline std::vector<std::vector<double>> gram_schmidt(const std::vector<std::vector<double>>& vectors) {
    std::vector<std::vector<double>> q;
    q.reserve(vectors.size());
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        std::vector<double> v = vectors[i];
        if (!q.empty() && v.size() != q[0].size()) throw ShapeError("gram_schmidt: vectors differ in length");
        const double n0 = norm2(v);
        if (!(n0 >= kDegenerateResidual) || !std::isfinite(n0)) {
            throw DegenerateBasis(i, "gram_schmidt: vector " + std::to_string(i) + " is zero or non-finite");
        }
        for (auto& x : v) x /= n0;
        for (int pass = 0; pass < 2; ++pass) {
            std::vector<double> c(q.size());
            for (std::size_t j = 0; j < q.size(); ++j) c[j] = dot(q[j], v);
            for (std::size_t j = 0; j < q.size(); ++j)
                for (std::size_t k = 0; k < v.size(); ++k) v[k] -= c[j] * q[j][k];
            if (pass == 0 && norm2(v) < kDegenerateResidual) {
                throw DegenerateBasis(i, "gram_schmidt: vector " + std::to_string(i) +
                                             " is linearly dependent on the preceding vectors");
            }
        }
        const double n = norm2(v);
        for (auto& x : v) x /= n;
        q.push_back(std::move(v));
    }
    return q;
}

struct ConeBasis {
    std::vector<std::vector<double>> vectors;
    int layer = -1;
    double alpha = 0.0;  // activation-addition scale for samples
    int steps = 0;
    std::uint64_t seed = 0;
    std::string model_checksum;

    std::size_t dim() const { return vectors.size(); }
    std::size_t d_model() const { return vectors.empty() ? 0 : vectors[0].size(); }

    // Max |b_i.b_j - delta_ij|.
    double orthonormality_error() const {
        double e = 0.0;
        for (std::size_t i = 0; i < vectors.size(); ++i)
            for (std::size_t j = 0; j < vectors.size(); ++j)
                e = std::max(e, std::abs(dot(vectors[i], vectors[j]) - (i == j ? 1.0 : 0.0)));
        return e;
    }

    void validate(double tol = 1e-6) const {
        if (vectors.empty()) throw std::invalid_argument("cone basis: N must be at least 1");
        if (vectors.size() > d_model()) throw std::invalid_argument("cone basis: N exceeds d_model");
        for (const auto& v : vectors)
            if (v.size() != d_model()) throw ShapeError("cone basis: vectors differ in length");
        if (orthonormality_error() > tol) throw std::invalid_argument("cone basis: vectors are not orthonormal");
    }

    Direction basis_direction(std::size_t i) const {
        auto d = Direction::from_vector(vectors.at(i), DirectionSource::cone_sample, layer);
        d.norm_at_extraction = alpha;
        d.model_checksum = model_checksum;
        return d;
    }
};

struct ConeSample {
    std::vector<double> coefficients;  // s >= 0, |s| = 1
    std::vector<double> direction;     // r = B s

    Direction as_direction(const ConeBasis& basis) const {
        Direction d;
        d.vector = direction;
        d.norm_at_extraction = basis.alpha;
        d.source = DirectionSource::cone_sample;
        d.layer = basis.layer;
        d.model_checksum = basis.model_checksum;
        return d;
    }
};

// s uniform on the positive-orthant patch of the unit sphere.
template <class Rng>
std::vector<double> sample_orthant_unit(std::size_t n, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> s(n);
    double norm = 0.0;
    while (!(norm > 0.0)) {
        for (auto& x : s) x = std::abs(nd(rng));
        norm = norm2(s);
    }
    for (auto& x : s) x /= norm;
    return s;
}

inline std::vector<double> combine(const std::vector<std::vector<double>>& basis, std::span<const double> s) {
    std::vector<double> r(basis.at(0).size(), 0.0);
    for (std::size_t i = 0; i < basis.size(); ++i)
        for (std::size_t k = 0; k < r.size(); ++k) r[k] += s[i] * basis[i][k];
    return r;
}

template <class Rng>
ConeSample sample_cone_direction(const ConeBasis& basis, Rng& rng) {
    if (basis.vectors.empty()) throw std::invalid_argument("sample_cone_direction: empty basis");
    ConeSample out;
    out.coefficients = sample_orthant_unit(basis.dim(), rng);
    out.direction = combine(basis.vectors, out.coefficients);
    return out;
}

struct ConeConfig {
    std::size_t n = 2;
    int samples_per_step = 16;  // Monte Carlo cone samples per accumulation step
    int selection_samples = 16;
    // A basis vector "mediates refusal" when ablating it lowers refusal
    // propensity by more than this and its side-effect KL passes the filter.
    double min_refusal_score = 0.0;
};

struct BasisScore {
    std::vector<CandidateScore> vectors;
    double min_refusal_score = 0.0;
    double max_kl = 0.0;
    double sample_score = 0.0;  // mean refusal score of fixed cone samples (fallback)
    bool all_effective = false;
};

struct ConeResult {
    ConeBasis basis;
    std::vector<ConeBasis> pool;
    std::vector<StepLog> history;
    std::vector<BasisScore> pool_scores;
    std::size_t selected = 0;
    bool fallback = false;  // no pool member had every vector effective
    std::vector<std::string> log;
};

namespace detail {

inline std::vector<std::vector<double>> unflatten(const std::vector<double>& flat, std::size_t rows) {
    const std::size_t d = flat.size() / rows;
    std::vector<std::vector<double>> out(rows);
    for (std::size_t i = 0; i < rows; ++i) out[i].assign(flat.begin() + i * d, flat.begin() + (i + 1) * d);
    return out;
}

inline std::vector<double> flatten(const std::vector<std::vector<double>>& rows) {
    std::vector<double> out;
    for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
    return out;
}

}  // namespace detail

// Scores every pool basis and picks one where all vectors mediate refusal
// (highest worst-vector score); otherwise the basis whose samples are most
// effective under ablation.
inline std::size_t select_basis(const ToyModel& model, const std::vector<ConeBasis>& pool, const SelectionSet& set,
                                const ConeConfig& cc, std::uint64_t seed, std::vector<BasisScore>* scores_out,
                                bool* fallback) {
    if (pool.empty()) throw std::invalid_argument("select_basis: empty pool");
    const double base = mean_refusal_propensity(model, set.harmful, InterventionSpec::none());
    std::vector<BasisScore> scores;
    for (const auto& b : pool) {
        BasisScore bs;
        bs.min_refusal_score = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < b.dim(); ++i) {
            bs.vectors.push_back(score_candidate(model, b.basis_direction(i), set, base));
            bs.min_refusal_score = std::min(bs.min_refusal_score, bs.vectors.back().refusal_score);
            bs.max_kl = std::max(bs.max_kl, bs.vectors.back().kl);
        }
        bs.all_effective = bs.max_kl < set.kl_threshold && bs.min_refusal_score > cc.min_refusal_score;
        scores.push_back(std::move(bs));
    }
    std::size_t best = pool.size();
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!scores[i].all_effective) continue;
        if (best == pool.size() || scores[i].min_refusal_score > scores[best].min_refusal_score ||
            (scores[i].min_refusal_score == scores[best].min_refusal_score && scores[i].max_kl < scores[best].max_kl)) {
            best = i;
        }
    }
    if (fallback) *fallback = best == pool.size();
    if (best == pool.size()) {
        for (std::size_t i = 0; i < pool.size(); ++i) {
            std::mt19937_64 rng(seed);
            double s = 0.0;
            for (int k = 0; k < cc.selection_samples; ++k) {
                const auto smp = sample_cone_direction(pool[i], rng);
                s += base - mean_refusal_propensity(model, set.harmful, InterventionSpec::ablate(smp.as_direction(pool[i])));
            }
            scores[i].sample_score = s / std::max(1, cc.selection_samples);
            if (best == pool.size() || scores[i].sample_score > scores[best].sample_score) best = i;
        }
    }
    if (scores_out) *scores_out = std::move(scores);
    return best;
}

// Joint projected gradient descent on the basis: per accumulation step the
// loss is the mean over fresh cone samples plus the mean over basis vectors.
inline ConeResult rco_train(const ToyModel& model, const std::vector<PromptRecord>& dataset, const OptimConfig& cfg,
                            const ConeConfig& cc, const SelectionSet& validation) {
    const auto d = static_cast<std::size_t>(model.config().d_model);
    if (cc.n < 1 || cc.n > d) throw std::invalid_argument("rco_train: cone dimension must be in [1, d_model]");
    if (cc.samples_per_step < 1) throw std::invalid_argument("rco_train: samples_per_step must be positive");
    const std::size_t n = cc.n;
    ConeResult res;

    std::uint64_t reseeds = 0;
    auto project = [&](std::vector<double>& flat) {
        auto rows = detail::unflatten(flat, n);
        for (;;) {
            try {
                rows = gram_schmidt(rows);
                break;
            } catch (const DegenerateBasis& e) {
                std::mt19937_64 rng(detail::derive_seed(cfg.seed, 0xdead, ++reseeds));
                rows[e.index()] = detail::random_unit(d, rng);
                res.log.push_back(std::string(e.what()) + "; re-randomized vector " + std::to_string(e.index()));
            }
        }
        flat = detail::flatten(rows);
    };

    std::vector<std::vector<double>> init;
    for (std::size_t i = 0; i < n; ++i) init.push_back(detail::initial_vector(d, cfg, i));
    std::vector<double> flat = detail::flatten(init);
    project(flat);

    auto loss_fn = [&](const Tensor& B, std::span<const PromptRecord> batch, std::uint64_t micro_seed) {
        std::mt19937_64 rng(micro_seed);
        Tensor sample_sum = Tensor::scalar(0.0);
        for (int k = 0; k < cc.samples_per_step; ++k) {
            const auto s = sample_orthant_unit(n, rng);
            const Tensor r = row(matmul(Tensor::matrix(1, n, s), B), 0);
            sample_sum = add(sample_sum, compute_loss(r, model, batch, cfg).total);
        }
        Tensor basis_sum = Tensor::scalar(0.0);
        for (std::size_t i = 0; i < n; ++i) basis_sum = add(basis_sum, compute_loss(row(B, i), model, batch, cfg).total);
        return add(scale(sample_sum, 1.0 / cc.samples_per_step), scale(basis_sum, 1.0 / static_cast<double>(n)));
    };
    auto run = detail::train_projected(std::move(flat), n, dataset, cfg, loss_fn, {}, project);

    res.history = std::move(run.history);
    for (auto& [step, v] : run.pool) {
        ConeBasis b;
        b.vectors = detail::unflatten(v, n);
        b.layer = cfg.add_layer;
        b.alpha = cfg.alpha;
        b.steps = step;
        b.seed = cfg.seed;
        b.model_checksum = model.checksum();
        res.pool.push_back(std::move(b));
    }
    res.selected = select_basis(model, res.pool, validation, cc, detail::derive_seed(cfg.seed, 0x5e1ec7),
                                &res.pool_scores, &res.fallback);
    res.basis = res.pool[res.selected];
    return res;
}

struct ConeEvaluation {
    std::vector<double> sample_asr;
    std::vector<std::vector<double>> coefficients;
    double min = 0.0;
    double median = 0.0;
    double max = 0.0;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Ablation ASR of `n_samples` uniformly sampled cone directions.
inline ConeEvaluation evaluate_cone(const ToyModel& model, const ConeBasis& basis, const std::vector<Tokens>& harmful,
                                    int n_samples = 256, std::uint64_t seed = 0, const EvalOptions& opt = {}) {
    basis.validate();
    ConeEvaluation ev;
    std::mt19937_64 rng(seed);
    for (int k = 0; k < n_samples; ++k) {
        const auto s = sample_cone_direction(basis, rng);
        ev.coefficients.push_back(s.coefficients);
        ev.sample_asr.push_back(asr(model, harmful, InterventionSpec::ablate(s.as_direction(basis)), opt).asr);
    }
    if (!ev.sample_asr.empty()) {
        const auto [lo, hi] = std::minmax_element(ev.sample_asr.begin(), ev.sample_asr.end());
        ev.min = *lo;
        ev.max = *hi;
        ev.median = median_of(ev.sample_asr);
    }
    return ev;
}

}  // namespace refgeo
