#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "refgeo/cone.hpp"
#include "support/fixtures.hpp"

using namespace refgeo;
using fixtures::random_vector;
using fixtures::tiny_model;

namespace {

// Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double f = cdf(xs[i]);
        d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
    }
    return d;
}

ConeBasis random_basis(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::vector<std::vector<double>> vs;
    for (std::size_t i = 0; i < n; ++i) vs.push_back(random_vector(d, seed + i));
    ConeBasis b;
    b.vectors = gram_schmidt(vs);
    b.layer = 1;
    b.alpha = 2.0;
    return b;
}

}  // namespace

TEST(GramSchmidt, HandExample) {
    const auto q = gram_schmidt({{3, 1}, {2, 2}});
    const double s = std::sqrt(10.0);
    EXPECT_NEAR(q[0][0], 3 / s, 1e-15);
    EXPECT_NEAR(q[0][1], 1 / s, 1e-15);
    EXPECT_NEAR(q[1][0], -1 / s, 1e-15);
    EXPECT_NEAR(q[1][1], 3 / s, 1e-15);
}

TEST(GramSchmidt, OrthonormalAndSpanPreservingOnRandomInputs) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const std::size_t d = 8 + seed % 9, n = 1 + seed % 6;
        std::vector<std::vector<double>> vs;
        for (std::size_t i = 0; i < n; ++i) vs.push_back(random_vector(d, 1000 * seed + i, 1.0 + i));
        const auto q = gram_schmidt(vs);
        ConeBasis b;
        b.vectors = q;
        EXPECT_LT(b.orthonormality_error(), 1e-12);
        // Span preservation: every input is reproduced by its projection onto q.
        for (const auto& v : vs) {
            std::vector<double> resid = v;
            for (const auto& qi : q) {
                const double c = dot(qi, v);
                for (std::size_t k = 0; k < d; ++k) resid[k] -= c * qi[k];
            }
            EXPECT_LT(norm2(resid), 1e-12 * norm2(v));
        }
        // Triangular structure: q_i lies in span(v_0..v_i), so q_i . v_j = 0 for j < i.
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j) EXPECT_LT(std::abs(dot(q[i], vs[j])), 1e-11 * norm2(vs[j]));
    }
}

TEST(GramSchmidt, NearlyDependentInputsStayOrthonormal) {
    auto a = random_vector(10, 1);
    auto b = a;
    b[0] += 1e-6;
    const auto q = gram_schmidt({a, b});
    ConeBasis basis;
    basis.vectors = q;
    EXPECT_LT(basis.orthonormality_error(), 1e-10);
}

TEST(GramSchmidt, DegenerateInputsNamed) {
    const auto a = random_vector(6, 2);
    auto twice = a;
    for (auto& x : twice) x *= 2.0;
    try {
        gram_schmidt({random_vector(6, 1), a, twice});
        FAIL();
    } catch (const DegenerateBasis& e) {
        EXPECT_EQ(e.index(), 2u);
    }
    try {
        gram_schmidt({a, std::vector<double>(6, 0.0)});
        FAIL();
    } catch (const DegenerateBasis& e) {
        EXPECT_EQ(e.index(), 1u);
    }
    EXPECT_THROW(gram_schmidt({{1, 0}, {1, 0, 0}}), ShapeError);
}

TEST(ConeBasis, Validate) {
    ConeBasis b;
    EXPECT_THROW(b.validate(), std::invalid_argument);
    b.vectors = {{1, 0}, {1, 1}};
    EXPECT_THROW(b.validate(), std::invalid_argument);
    b.vectors = {{1, 0}, {0, 1}, {0, 1}};
    EXPECT_THROW(b.validate(), std::invalid_argument);
    b.vectors = {{1, 0}, {0, 1}};
    EXPECT_NO_THROW(b.validate());
}

TEST(ConeSampling, UnitNormNonNegativeAndInsideCone) {
    const auto b = random_basis(3, 12, 5);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 2000; ++i) {
        const auto s = sample_cone_direction(b, rng);
        EXPECT_NEAR(norm2(s.direction), 1.0, 1e-12);
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_GE(s.coefficients[k], 0.0);
            // Coordinates in the basis recover the coefficients.
            EXPECT_NEAR(dot(b.vectors[k], s.direction), s.coefficients[k], 1e-12);
        }
        const auto d = s.as_direction(b);
        EXPECT_EQ(d.layer, 1);
        EXPECT_DOUBLE_EQ(d.norm_at_extraction, 2.0);
    }
}

TEST(ConeSampling, TwoDimensionalAnglesAreUniform) {
    std::mt19937_64 rng(9);
    const int n = 20000;
    std::vector<double> first;
    double angle = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto s = sample_orthant_unit(2, rng);
        angle += std::atan2(s[1], s[0]);
        first.push_back(s[0]);
    }
    EXPECT_NEAR(angle / n * 180.0 / std::numbers::pi, 45.0, 1.0);
    // s_0 = cos(theta), theta ~ U[0, pi/2]: P(s_0 <= t) = (2/pi) asin(t).
    const double d = ks_statistic(first, [](double t) { return 2.0 / std::numbers::pi * std::asin(std::clamp(t, 0.0, 1.0)); });
    EXPECT_LT(d, 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST(ConeSampling, ThreeDimensionalMarginalIsUniform) {
    // On S^2 each coordinate of a uniform point is uniform on [-1, 1]; folding
    // into the orthant makes it uniform on [0, 1].
    std::mt19937_64 rng(10);
    const int n = 20000;
    std::vector<double> xs;
    for (int i = 0; i < n; ++i) xs.push_back(sample_orthant_unit(3, rng)[2]);
    EXPECT_LT(ks_statistic(xs, [](double t) { return std::clamp(t, 0.0, 1.0); }), 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST(ConeSampling, DeterministicUnderSeed) {
    const auto b = random_basis(2, 8, 3);
    std::mt19937_64 r1(5), r2(5);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_cone_direction(b, r1).direction, sample_cone_direction(b, r2).direction);
}

TEST(ConeSampling, SingleVectorConeIsTheVector) {
    const auto b = random_basis(1, 8, 3);
    std::mt19937_64 rng(1);
    const auto s = sample_cone_direction(b, rng);
    EXPECT_NEAR(s.coefficients[0], 1.0, 1e-15);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(s.direction[k], b.vectors[0][k], 1e-15);
}

namespace {

SelectionSet tiny_validation() {
    SelectionSet s;
    for (std::uint64_t i = 0; i < 3; ++i) {
        const auto rec = fixtures::toy_record(40 + i);
        s.harmful.push_back(rec.p_harm);
        s.safe.push_back({rec.p_safe, rec.t_retain});
    }
    return s;
}

OptimConfig small_config() {
    OptimConfig c;
    c.batch_size = 2;
    c.grad_accum = 1;
    c.max_steps = 8;
    c.alpha = 2.0;
    c.add_layer = 1;
    c.pool_size = 3;
    c.seed = 3;
    return c;
}

}  // namespace

TEST(Rco, TrainedBasisIsOrthonormalAndTagged) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7), fixtures::toy_record(8)};
    ConeConfig cc;
    cc.n = 3;
    cc.samples_per_step = 2;
    cc.selection_samples = 2;
    const auto res = rco_train(m, data, small_config(), cc, tiny_validation());
    EXPECT_EQ(res.basis.dim(), 3u);
    EXPECT_LT(res.basis.orthonormality_error(), 1e-10);
    EXPECT_EQ(res.basis.layer, 1);
    EXPECT_DOUBLE_EQ(res.basis.alpha, 2.0);
    EXPECT_EQ(res.basis.model_checksum, m.checksum());
    EXPECT_EQ(res.pool.size(), 3u);
    for (const auto& b : res.pool) EXPECT_LT(b.orthonormality_error(), 1e-10);
}

TEST(Rco, SingleVectorConeMatchesRdo) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7), fixtures::toy_record(8)};
    ConeConfig cc;
    cc.n = 1;
    cc.samples_per_step = 2;
    auto cfg = small_config();
    cfg.pool_size = 1;
    const auto cone = rco_train(m, data, cfg, cc, tiny_validation());
    const auto rdo = rdo_train(m, data, cfg, tiny_validation());
    EXPECT_GT(cosine(cone.basis.vectors[0], rdo.direction.vector), 1.0 - 1e-6);
}

TEST(Rco, RejectsBadDimensions) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7)};
    ConeConfig cc;
    cc.n = 0;
    EXPECT_THROW(rco_train(m, data, small_config(), cc, tiny_validation()), std::invalid_argument);
    cc.n = 17;
    EXPECT_THROW(rco_train(m, data, small_config(), cc, tiny_validation()), std::invalid_argument);
}

TEST(Rco, DeterministicUnderSeed) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7), fixtures::toy_record(8)};
    ConeConfig cc;
    cc.samples_per_step = 2;
    cc.selection_samples = 2;
    const auto a = rco_train(m, data, small_config(), cc, tiny_validation());
    const auto b = rco_train(m, data, small_config(), cc, tiny_validation());
    EXPECT_EQ(a.basis.vectors, b.basis.vectors);
}

TEST(ConeEval, SummaryStatistics) {
    EXPECT_DOUBLE_EQ(median_of({3, 1, 2}), 2.0);
    EXPECT_DOUBLE_EQ(median_of({4, 1, 2, 3}), 2.5);
    const auto m = tiny_model();
    const auto b = random_basis(2, 16, 4);
    const auto ev = evaluate_cone(m, b, {fixtures::toy_record(1).p_harm}, 8, 2);
    ASSERT_EQ(ev.sample_asr.size(), 8u);
    EXPECT_LE(ev.min, ev.median);
    EXPECT_LE(ev.median, ev.max);
    EXPECT_EQ(ev.coefficients.size(), 8u);
}
