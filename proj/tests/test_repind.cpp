#include <gtest/gtest.h>

#include <cmath>

#include "refgeo/gradcheck.hpp"
#include "refgeo/repind.hpp"
#include "support/fixtures.hpp"

using namespace refgeo;
using fixtures::random_vector;
using fixtures::tiny_model;

namespace {

double cos_of(std::span<const double> a, std::span<const double> b) { return dot(a, b) / (norm2(a) * norm2(b)); }

// Plain-double independence loss for one prompt.
double oracle_repind(const ToyModel& m, const std::vector<double>& r, const std::vector<double>& v, const Tokens& p,
                     const std::vector<std::size_t>& layers) {
    const auto clean = forward(m, p);
    const auto abl_v = forward(m, p, InterventionSpec::ablate(Tensor::vector(v)));
    const auto abl_r = forward(m, p, InterventionSpec::ablate(Tensor::vector(r)));
    double total = 0.0;
    for (auto l : layers) {
        double sr = 0.0, sv = 0.0;
        for (std::size_t t = 0; t < p.size(); ++t) {
            const double dr = cos_of(clean.trace.resid[l].row(t), r) - cos_of(abl_v.trace.resid[l].row(t), r);
            const double dv = cos_of(clean.trace.resid[l].row(t), v) - cos_of(abl_r.trace.resid[l].row(t), v);
            sr += dr * dr;
            sv += dv * dv;
        }
        total += (sr + sv) / static_cast<double>(p.size());
    }
    return total / static_cast<double>(layers.size());
}

Direction unit(std::size_t n, std::uint64_t seed) { return Direction::from_vector(random_vector(n, seed), DirectionSource::random); }

}  // namespace

TEST(RepIndLayers, CutoffKeepsLeadingResidualLayers) {
    EXPECT_EQ(repind_layers(4), (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_EQ(repind_layers(2), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(repind_layers(4, 1.0), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    EXPECT_EQ(repind_layers(4, 0.01), (std::vector<std::size_t>{0}));
    EXPECT_THROW(repind_layers(4, 0.0), std::invalid_argument);
    EXPECT_THROW(repind_layers(4, 1.5), std::invalid_argument);
}

TEST(CosineProfileTest, MatchesPerPromptOracle) {
    const auto m = tiny_model();
    const std::vector<Tokens> prompts{fixtures::toy_record(1).p_harm, fixtures::toy_record(2).p_safe};
    const auto d = random_vector(16, 5);
    const auto prof = cosine_profile(m, std::span<const double>(d), prompts);
    ASSERT_EQ(prof.values.size(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
        double expect = 0.0;
        for (const auto& p : prompts) expect += cos_of(forward(m, p).trace.last(l), d) / 2.0;
        EXPECT_NEAR(prof.values[l], expect, 1e-12);
    }
    // Ablating the direction itself drives its cosine to zero everywhere.
    const auto abl = cosine_profile(m, std::span<const double>(d), prompts, InterventionSpec::ablate(Tensor::vector(d)));
    for (double c : abl.values) EXPECT_LT(std::abs(c), 1e-9);
    EXPECT_THROW(cosine_profile(m, std::span<const double>(d), {}), std::invalid_argument);
    const std::vector<double> wrong(8, 1.0);
    EXPECT_THROW(cosine_profile(m, std::span<const double>(wrong), prompts), ShapeError);
}

TEST(RepIndLoss, MatchesOracleAndIsNonNegative) {
    const auto m = tiny_model();
    const auto layers = repind_layers(2);
    for (std::uint64_t s = 0; s < 4; ++s) {
        const auto p = fixtures::toy_record(s).p_harm;
        const auto r = random_vector(16, 100 + s), v = random_vector(16, 200 + s);
        const double got = repind_loss(m, Tensor::vector(r), Tensor::vector(v), p, layers).item();
        EXPECT_NEAR(got, oracle_repind(m, r, v, p, layers), 1e-12);
        EXPECT_GE(got, 0.0);
    }
}

TEST(RepIndLoss, SymmetricInItsArguments) {
    const auto m = tiny_model();
    const auto p = fixtures::toy_record(3).p_harm;
    const auto layers = repind_layers(2);
    const auto r = Tensor::vector(random_vector(16, 1)), v = Tensor::vector(random_vector(16, 2));
    EXPECT_NEAR(repind_loss(m, r, v, p, layers).item(), repind_loss(m, v, r, p, layers).item(), 1e-12);
}

TEST(RepIndLoss, GradientMatchesFiniteDifferences) {
    const auto m = tiny_model();
    const auto p = fixtures::toy_record(4).p_harm;
    const auto layers = repind_layers(2);
    const auto v = Tensor::vector(random_vector(16, 9));
    const auto res = finite_diff_check([&](const Tensor& r) { return repind_loss(m, r, v, p, layers); }, random_vector(16, 8));
    EXPECT_LT(res.max_rel_error, 1e-3) << "index " << res.worst_index;
}

TEST(RepIndLoss, RejectsBadLayers) {
    const auto m = tiny_model();
    const auto p = fixtures::toy_record(4).p_harm;
    const auto r = Tensor::vector(random_vector(16, 1));
    EXPECT_THROW(repind_loss(m, r, r, p, std::vector<std::size_t>{}), std::invalid_argument);
    EXPECT_THROW(repind_loss(m, r, r, p, std::vector<std::size_t>{3}), std::invalid_argument);
}

TEST(RepIndPenalty, ScalesBatchMeanByLambda) {
    const auto m = tiny_model();
    IndependenceConstraintSet cs;
    cs.references = {unit(16, 1), unit(16, 2)};
    cs.lambda_ind = 7.0;
    const auto penalty = make_repind_penalty(m, cs);
    const std::vector<PromptRecord> batch{fixtures::toy_record(1), fixtures::toy_record(2)};
    const auto r = random_vector(16, 3);
    double expect = 0.0;
    for (const auto& v : cs.references)
        for (const auto& rec : batch) expect += oracle_repind(m, r, v.vector, rec.p_harm, repind_layers(2));
    EXPECT_NEAR(penalty(Tensor::vector(r), batch).item(), 7.0 * expect / 2.0, 1e-10);
}

TEST(Independence, SelfPairFailsAndReportIsConsistent) {
    const auto m = tiny_model();
    const std::vector<Tokens> prompts{fixtures::toy_record(1).p_harm, fixtures::toy_record(2).p_harm};
    const auto r = unit(16, 11);
    const auto self = verify_independence(m, r, r, prompts);
    EXPECT_FALSE(self.pass);
    EXPECT_EQ(self.layers.size(), 2u);
    EXPECT_EQ(self.deviation_r.size(), 2u);
    // Layer 0 is the embedding, where ablation removes the whole component.
    const double c0 = cosine_profile(m, r, prompts).values[0];
    EXPECT_NEAR(self.deviation_r[0], std::abs(c0), 1e-12);

    const auto v = unit(16, 12);
    const auto loose = verify_independence(m, r, v, prompts, 10.0);
    EXPECT_TRUE(loose.pass);
    EXPECT_DOUBLE_EQ(loose.max_deviation_r, *std::max_element(loose.deviation_r.begin(), loose.deviation_r.end()));
    const auto strict = verify_independence(m, r, v, prompts, 0.0);
    EXPECT_FALSE(strict.pass);
}

TEST(Independence, DeviationsAgreeWithProfiles) {
    const auto m = tiny_model();
    const std::vector<Tokens> prompts{fixtures::toy_record(5).p_harm};
    const auto r = unit(16, 21), v = unit(16, 22);
    const auto rep = verify_independence(m, r, v, prompts);
    const auto a = cosine_profile(m, v, prompts), b = cosine_profile(m, v, prompts, InterventionSpec::ablate(r));
    for (std::size_t i = 0; i < rep.layers.size(); ++i)
        EXPECT_NEAR(rep.deviation_v[i], std::abs(a.values[rep.layers[i]] - b.values[rep.layers[i]]), 1e-15);
}

namespace {

SelectionSet tiny_validation() {
    SelectionSet s;
    for (std::uint64_t i = 0; i < 2; ++i) {
        const auto rec = fixtures::toy_record(60 + i);
        s.harmful.push_back(rec.p_harm);
        s.safe.push_back({rec.p_safe, rec.t_retain});
    }
    return s;
}

OptimConfig small_config() {
    OptimConfig c;
    c.batch_size = 2;
    c.grad_accum = 1;
    c.max_steps = 4;
    c.alpha = 2.0;
    c.add_layer = 1;
    c.pool_size = 2;
    c.seed = 5;
    return c;
}

}  // namespace

TEST(RepIndTraining, CandidatesUseDistinctSeedsAndSelectionIsArgmin) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7), fixtures::toy_record(8)};
    IndependenceConstraintSet cs;
    cs.references = {unit(16, 30)};
    const auto res = train_repind_direction(m, data, cs, small_config(), tiny_validation(), 3);
    ASSERT_EQ(res.candidates.size(), 3u);
    EXPECT_EQ(res.candidates[0].seed, 5u);
    EXPECT_NE(res.candidates[1].seed, res.candidates[2].seed);
    for (const auto& c : res.candidates) {
        EXPECT_LE(res.candidates[res.selected].score.ablated_propensity, c.score.ablated_propensity);
        EXPECT_EQ(c.direction.source, DirectionSource::repind);
    }
    EXPECT_EQ(res.direction.vector, res.candidates[res.selected].direction.vector);
    const auto again = train_repind_direction(m, data, cs, small_config(), tiny_validation(), 3);
    EXPECT_EQ(again.direction.vector, res.direction.vector);
}

TEST(RepIndTraining, ValidatesConstraints) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7)};
    IndependenceConstraintSet cs;
    Direction bad;
    bad.vector = std::vector<double>(16, 1.0);
    cs.references = {bad};
    EXPECT_THROW(train_repind_direction(m, data, cs, small_config(), tiny_validation(), 1), std::invalid_argument);
    cs.references = {unit(8, 1)};
    EXPECT_THROW(train_repind_direction(m, data, cs, small_config(), tiny_validation(), 1), ShapeError);
    cs.references = {unit(16, 1)};
    EXPECT_THROW(train_repind_direction(m, data, cs, small_config(), tiny_validation(), 0), std::invalid_argument);
    cs.lambda_ind = -1.0;
    EXPECT_THROW(train_repind_direction(m, data, cs, small_config(), tiny_validation(), 1), std::invalid_argument);
}

namespace {

// Attention and MLP writes are zeroed, so the residual stream is the token
// embedding. Even tokens embed in coordinates 0..7, odd tokens in 8..15.
ToyModel block_model() {
    auto m = tiny_model();
    for (auto& [name, t] : m.named_parameters()) {
        if (name == "pos" || name.ends_with("w_o") || name.ends_with("w_out") || name.ends_with("b_out"))
            std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0);
    }
    auto& e = m.embed.mutable_data();
    for (std::size_t tok = 0; tok < 32; ++tok) {
        const auto row = random_vector(8, 500 + tok);
        for (std::size_t k = 0; k < 16; ++k) e[tok * 16 + k] = 0.0;
        for (std::size_t k = 0; k < 8; ++k) e[tok * 16 + (tok % 2) * 8 + k] = row[k];
    }
    return m;
}

std::vector<double> in_block(std::size_t block, std::uint64_t seed) {
    std::vector<double> v(16, 0.0);
    const auto r = random_vector(8, seed);
    for (std::size_t k = 0; k < 8; ++k) v[block * 8 + k] = r[k];
    return v;
}

}  // namespace

TEST(RepIndLoss, DecoupledSubspacesGiveZeroLoss) {
    const auto m = block_model();
    const auto r = in_block(0, 1), v = in_block(1, 2);
    const Tokens p{tok::bos, 12, 13, 20, 25, tok::eop};
    EXPECT_LT(repind_loss(m, Tensor::vector(r), Tensor::vector(v), p, repind_layers(2)).item(), 1e-28);
    const auto rep = verify_independence(m, Direction::from_vector(r, DirectionSource::random),
                                         Direction::from_vector(v, DirectionSource::random), {p}, 1e-12);
    EXPECT_TRUE(rep.pass);
    // Coupling r across both blocks makes the loss strictly positive.
    auto mixed = r;
    for (std::size_t k = 8; k < 16; ++k) mixed[k] = v[k];
    EXPECT_GT(repind_loss(m, Tensor::vector(mixed), Tensor::vector(v), p, repind_layers(2)).item(), 1e-6);
}

TEST(RepIndLoss, UnrepresentedDirectionContributesNothing) {
    const auto m = block_model();
    // Only even tokens: every activation lies in block 0, so v in block 1 is invisible.
    const Tokens p{tok::bos, 12, 14, 20, 22, tok::bos};
    const auto r = in_block(0, 3), v = in_block(1, 4);
    EXPECT_LT(repind_loss(m, Tensor::vector(r), Tensor::vector(v), p, repind_layers(2)).item(), 1e-28);
}

TEST(Independence, VerdictIsSymmetric) {
    const auto m = tiny_model();
    const std::vector<Tokens> prompts{fixtures::toy_record(1).p_harm, fixtures::toy_record(3).p_harm};
    for (std::uint64_t s = 0; s < 4; ++s) {
        const auto r = unit(16, 70 + s), v = unit(16, 80 + s);
        for (double eps : {0.01, 0.05, 0.2}) {
            const auto a = verify_independence(m, r, v, prompts, eps), b = verify_independence(m, v, r, prompts, eps);
            EXPECT_EQ(a.pass, b.pass);
            EXPECT_EQ(a.deviation_r, b.deviation_v);
        }
    }
}

TEST(RepIndTraining, EmptyConstraintSetReducesToRdo) {
    const auto m = tiny_model();
    const std::vector<PromptRecord> data{fixtures::toy_record(7), fixtures::toy_record(8)};
    const auto res = train_repind_direction(m, data, IndependenceConstraintSet{}, small_config(), tiny_validation(), 1);
    const auto rdo = rdo_train(m, data, small_config(), tiny_validation());
    EXPECT_EQ(res.direction.vector, rdo.direction.vector);
}
