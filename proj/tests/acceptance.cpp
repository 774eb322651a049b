// Acceptance run: every criterion prints one PASS/FAIL line; the exit status
// is nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>

#include "refgeo/attack.hpp"
#include "refgeo/cli.hpp"
#include "refgeo/cone.hpp"
#include "refgeo/dataset.hpp"
#include "refgeo/dim.hpp"
#include "refgeo/gradcheck.hpp"
#include "refgeo/repind.hpp"
#include "support/fixtures.hpp"

using namespace refgeo;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

class Stopwatch {
   public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

   private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

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

std::vector<RetainPair> retain_pairs(const ToyModel& m, const std::vector<Tokens>& safe) {
    std::vector<RetainPair> out;
    for (const auto& p : safe) out.push_back({p, completion_of(generate(m, p, TargetConfig{}.retain_len), p.size())});
    return out;
}

template <class T>
std::vector<T> first(const std::vector<T>& xs, std::size_t n) {
    return {xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(std::min(n, xs.size()))};
}

// ---- shared toy-scale state, built by criterion 4 and reused later ----

struct Lab {
    ToyModel model;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::vector<Tokens> harm_train, safe_train, harm_test, safe_test;
    SelectionSet validation;
    Direction dim;
    double random_asr = 0.0;
    std::vector<PromptRecord> records;
    OptimConfig optim;
    std::optional<RdoResult> rdo;
    double rdo_asr = 0.0;
};

std::optional<Lab> lab;

constexpr std::uint64_t kTaskSeed = 1;
constexpr std::uint64_t kOptimSeed = 1;

// ---- criteria ----

Verdict gradient_suite() {
    const auto m = fixtures::tiny_model();
    const std::vector<PromptRecord> batch{fixtures::toy_record(5), fixtures::toy_record(6)};
    const auto r0 = fixtures::random_vector(16, 6);
    double worst = 0.0;
    std::string names;
    auto record = [&](const std::string& name, const GradCheckResult& res) {
        worst = std::max(worst, res.max_rel_error);
        names += " " + name + "=" + fmt(res.max_rel_error, 2);
    };
    OptimConfig cfg;
    cfg.alpha = 2.0;
    cfg.add_layer = 1;
    const char* labels[] = {"ablation", "addition", "retain"};
    for (int term = 0; term < 3; ++term) {
        OptimConfig c = cfg;
        c.lambda_abl = term == 0;
        c.lambda_add = term == 1;
        c.lambda_ret = term == 2;
        record(labels[term], finite_diff_check([&](const Tensor& r) { return compute_loss(r, m, batch, c).total; }, r0));
    }
    const auto v = Tensor::vector(fixtures::random_vector(16, 9));
    const auto layers = repind_layers(2);
    record("repind", finite_diff_check([&](const Tensor& r) { return repind_loss(m, r, v, batch[0].p_harm, layers); }, r0));
    const Tokens target{tok::answer, 12, 13};
    const auto p = batch[1].p_harm;
    const auto res = forward(m, concat_tokens(p, std::span<const int>(target).first(2)));
    const auto late = late_layers(2, 1.0);
    record("attack", finite_diff_check(
                         [&](const Tensor& d) { return detail::attack_objective(res, p.size(), target, d, late, 1.0, 1.0); }, r0));
    return {worst < 1e-3, "max relative error" + names};
}

Verdict projection_suite() {
    double closure = 0.0, idem = 0.0, interference = 0.0, orth = 0.0, span = 0.0;
    ModelConfig mc;
    const auto big = ToyModel::init(mc);
    const auto small = fixtures::tiny_model();
    SyntheticTaskSpec task;
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 8; ++trial) {
        const auto& m = trial % 2 ? big : small;
        const auto d = static_cast<std::size_t>(m.config().d_model);
        const auto r = Direction::from_vector(fixtures::random_vector(d, 100 + trial), DirectionSource::random);
        const auto out = forward(m, sample_prompt(task, trial % 3 == 0, rng), InterventionSpec::ablate(r));
        auto check = [&](const Tensor& x) {
            for (std::size_t t = 0; t < x.rows(); ++t) {
                const auto row = x.row(t);
                const double n = norm2(row);
                if (n > 0.0) closure = std::max(closure, std::abs(dot(row, r.vector)) / n);
            }
        };
        for (const auto& x : out.trace.resid) check(x);
        for (const auto& x : out.trace.attn_out) check(x);
        for (const auto& x : out.trace.mlp_out) check(x);

        const auto x = fixtures::random_vector(d, 200 + trial, 3.0);
        const auto once = ablate_vector(x, r);
        const auto twice = ablate_vector(once, r);
        for (std::size_t i = 0; i < d; ++i) idem = std::max(idem, std::abs(once[i] - twice[i]));
        // Removing an orthogonal direction leaves the component along r untouched.
        const auto basis = gram_schmidt({r.vector, fixtures::random_vector(d, 300 + trial)});
        const auto abl_v = ablate_vector(x, basis[1]);
        interference = std::max(interference, std::abs(dot(abl_v, basis[0]) - dot(x, basis[0])) / norm2(x));
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t n = 1 + seed % 8, d = 64;
        std::vector<std::vector<double>> vs;
        for (std::size_t i = 0; i < n; ++i) vs.push_back(fixtures::random_vector(d, 1000 * seed + i, 1.0 + i));
        ConeBasis b;
        b.vectors = gram_schmidt(vs);
        orth = std::max(orth, b.orthonormality_error());
        for (const auto& v : vs) {
            auto resid = v;
            for (const auto& q : b.vectors) {
                const double c = dot(q, v);
                for (std::size_t k = 0; k < d; ++k) resid[k] -= c * q[k];
            }
            span = std::max(span, norm2(resid) / norm2(v));
        }
    }
    const bool pass = closure < 1e-6 && idem < 1e-12 && interference < 1e-12 && orth < 1e-6 && span < 1e-9;
    return {pass, "closure " + fmt(closure, 2) + ", idempotence " + fmt(idem, 2) + ", interference " + fmt(interference, 2) +
                      ", orthonormality " + fmt(orth, 2) + ", span residual " + fmt(span, 2)};
}

Verdict cone_sampling_suite() {
    constexpr int n = 100000;
    const double critical = 1.628 / std::sqrt(static_cast<double>(n));  // alpha = 0.01
    double norm_err = 0.0, min_coef = 1.0, angle = 0.0;
    std::vector<double> first2, third3;
    for (std::size_t dim : {2u, 3u}) {
        ConeBasis b;
        std::vector<std::vector<double>> vs;
        for (std::size_t i = 0; i < dim; ++i) vs.push_back(fixtures::random_vector(64, 40 + i));
        b.vectors = gram_schmidt(vs);
        std::mt19937_64 rng(dim);
        for (int i = 0; i < n; ++i) {
            const auto s = sample_cone_direction(b, rng);
            norm_err = std::max(norm_err, std::abs(norm2(s.direction) - 1.0));
            for (double c : s.coefficients) min_coef = std::min(min_coef, c);
            if (dim == 2) {
                angle += std::atan2(s.coefficients[1], s.coefficients[0]);
                first2.push_back(s.coefficients[0]);
            } else {
                third3.push_back(s.coefficients[2]);
            }
        }
    }
    const double mean_angle = angle / n * 180.0 / std::numbers::pi;
    const double ks2 = ks_statistic(first2, [](double t) { return 2.0 / std::numbers::pi * std::asin(std::clamp(t, 0.0, 1.0)); });
    const double ks3 = ks_statistic(third3, [](double t) { return std::clamp(t, 0.0, 1.0); });
    const bool pass = norm_err <= 1e-9 && min_coef >= 0.0 && std::abs(mean_angle - 45.0) <= 1.0 && ks2 < critical && ks3 < critical;
    return {pass, "norm error " + fmt(norm_err, 2) + ", min coefficient " + fmt(min_coef, 3) + ", N=2 mean angle " +
                      fmt(mean_angle, 5) + " deg, KS N=2 " + fmt(ks2, 3) + " N=3 " + fmt(ks3, 3) + " (critical " +
                      fmt(critical, 3) + ")"};
}

Verdict toy_dim() {
    Lab L;
    const auto cfg = fixtures::toy_train_config();
    const auto trained = train_toy_model(cfg);
    L.model = trained.model;
    L.train_accuracy = trained.accuracy;

    SyntheticTaskSpec spec;
    spec.train_size = 512;
    spec.val_size = 128;
    spec.test_size = 512;
    spec.seed = kTaskSeed;
    const auto data = generate_dataset(spec);
    L.harm_train = prompts_where(data.train, true);
    L.safe_train = prompts_where(data.train, false);
    L.harm_test = prompts_where(data.test, true);
    L.safe_test = prompts_where(data.test, false);
    std::vector<TaskExample> test_examples;
    for (const auto& x : data.test)
        test_examples.push_back({x.prompt, expected_completion(spec, x.prompt, cfg.completion_len), x.harmful});
    L.test_accuracy = task_accuracy(L.model, test_examples);

    L.dim = extract_dim(L.model, L.harm_train, L.safe_train, L.model.config().n_layers - 1);
    std::mt19937_64 rng(detail::derive_seed(kTaskSeed, 0x7a4d));
    const auto rd = Direction::from_vector(detail::random_unit(L.dim.dim(), rng), DirectionSource::random);
    L.random_asr = asr(L.model, L.harm_test, InterventionSpec::ablate(rd)).asr;
    const double dim_asr = asr(L.model, L.harm_test, InterventionSpec::ablate(L.dim)).asr;

    const auto val_harm = prompts_where(data.val, true), val_safe = prompts_where(data.val, false);
    L.validation.harmful = first(val_harm, 16);
    for (const auto& rp : retain_pairs(L.model, first(val_safe, 16))) L.validation.safe.push_back({rp.prompt, rp.retain});

    const bool pass = L.train_accuracy >= 0.99 && L.test_accuracy >= 0.99 && dim_asr >= 0.8 && L.random_asr <= 0.1;
    std::string detail = "accuracy " + fmt(L.train_accuracy) + " (held-out " + fmt(L.test_accuracy) + "), DIM ASR " +
                         fmt(dim_asr) + ", random ASR " + fmt(L.random_asr) + " on " +
                         std::to_string(L.harm_test.size()) + " prompts";
    lab = std::move(L);
    return {pass, detail};
}

Verdict rdo_vs_dim() {
    auto& L = *lab;
    std::vector<std::pair<Tokens, Tokens>> pairs;
    for (std::size_t i = 0; i < std::min(L.harm_train.size(), L.safe_train.size()); ++i)
        pairs.push_back({L.harm_train[i], L.safe_train[i]});
    L.records = generate_targets(L.model, L.dim, pairs).records;
    L.optim.alpha = L.dim.norm_at_extraction;
    L.optim.add_layer = L.dim.layer;
    L.optim.seed = kOptimSeed;
    L.rdo = rdo_train(L.model, L.records, L.optim, L.validation);
    const auto retain = retain_pairs(L.model, L.safe_test);
    L.rdo_asr = asr(L.model, L.harm_test, InterventionSpec::ablate(L.rdo->direction)).asr;
    const double dim_asr = asr(L.model, L.harm_test, InterventionSpec::ablate(L.dim)).asr;
    const double rdo_kl = side_effect_kl(L.model, L.rdo->direction, retain);
    const double dim_kl = side_effect_kl(L.model, L.dim, retain);
    return {L.rdo_asr >= dim_asr && rdo_kl <= dim_kl,
            "RDO ASR " + fmt(L.rdo_asr) + " vs DIM " + fmt(dim_asr) + ", side-effect KL " + fmt(rdo_kl) + " vs " +
                fmt(dim_kl) + " (" + std::to_string(L.records.size()) + " records, " + std::to_string(L.rdo->steps) +
                " steps)"};
}

Verdict cone_existence() {
    auto& L = *lab;
    ConeConfig c2;
    c2.n = 2;
    const auto cone = rco_train(L.model, L.records, L.optim, c2, L.validation);
    const auto ev = evaluate_cone(L.model, cone.basis, first(L.harm_test, 128), 256, kOptimSeed);
    const auto above = std::count_if(ev.sample_asr.begin(), ev.sample_asr.end(), [&](double a) { return a > L.random_asr; });
    const double frac = static_cast<double>(above) / static_cast<double>(ev.sample_asr.size());
    ConeConfig c1;
    c1.n = 1;
    const auto single = rco_train(L.model, L.records, L.optim, c1, L.validation);
    const double single_asr = asr(L.model, L.harm_test, InterventionSpec::ablate(single.basis.basis_direction(0))).asr;
    const double gap = std::abs(single_asr - L.rdo_asr);
    return {frac >= 0.9 && gap <= 0.02,
            "N=2 samples above random " + fmt(frac) + " (median ASR " + fmt(ev.median) + ", min " + fmt(ev.min) +
                "), N=1 ASR " + fmt(single_asr) + " vs RDO " + fmt(L.rdo_asr)};
}

Verdict refusal_properties() {
    auto& L = *lab;
    const auto& d = L.rdo->direction;
    std::vector<double> grid;
    for (int i = 0; i <= 15; ++i) grid.push_back(0.1 * i * L.optim.alpha);
    const auto curve = refusal_scaling_curve(L.model, L.safe_test, d, grid, L.optim.add_layer);
    const auto mono = check_monotone(curve);
    const auto baseline = asr(L.model, L.safe_test, InterventionSpec::none());
    const auto at_zero = asr(L.model, L.safe_test, InterventionSpec::add(d, 0.0, L.optim.add_layer));
    bool identical = at_zero.outcomes.size() == baseline.outcomes.size();
    for (std::size_t i = 0; identical && i < baseline.outcomes.size(); ++i)
        identical = at_zero.outcomes[i].completion == baseline.outcomes[i].completion;
    const bool zero_ok = curve.front() == 1.0 - baseline.asr && identical;
    const bool pass = zero_ok && (mono.inversions == 0 || (mono.inversions == 1 && mono.max_drop < 0.02));
    return {pass, "curve " + fmt(curve.front()) + " -> " + fmt(curve.back()) + ", inversions " +
                      std::to_string(mono.inversions) + " (max drop " + fmt(mono.max_drop) + "), alpha=0 matches baseline " +
                      (zero_ok ? "exactly" : "NOT exactly")};
}

Verdict repind_contrast() {
    auto& L = *lab;
    const auto prompts = first(L.harm_test, 64);
    OptimConfig orth_cfg = L.optim;
    orth_cfg.orthogonal_to = {L.dim};
    const auto orth = rdo_train(L.model, L.records, orth_cfg, L.validation).direction;
    IndependenceConstraintSet cs;
    cs.references = {L.dim};
    const auto rep = train_repind_direction(L.model, L.records, cs, L.optim, L.validation, 5);
    const auto ind_orth = verify_independence(L.model, orth, L.dim, prompts);
    const auto ind_rep = verify_independence(L.model, rep.direction, L.dim, prompts);
    const double asr_orth = asr(L.model, L.harm_test, InterventionSpec::ablate(orth)).asr;
    const double asr_rep = asr(L.model, L.harm_test, InterventionSpec::ablate(rep.direction)).asr;
    const bool pass = !ind_orth.pass && ind_rep.pass && asr_orth > L.random_asr && asr_rep > L.random_asr;
    auto dev = [](const IndependenceReport& r) { return fmt(std::max(r.max_deviation_r, r.max_deviation_v)); };
    return {pass, "orthogonal pair " + std::string(ind_orth.pass ? "passes" : "fails") + " (max deviation " + dev(ind_orth) +
                      ", ASR " + fmt(asr_orth) + "), RepInd pair " + (ind_rep.pass ? "passes" : "fails") +
                      " (max deviation " + dev(ind_rep) + ", ASR " + fmt(asr_rep) + "), random ASR " + fmt(L.random_asr)};
}

Verdict suffix_attack_suite() {
    auto& L = *lab;
    const auto prompts = first(L.harm_test, 64);
    const int n_layers = L.model.config().n_layers;
    SuffixAttackConfig cfg;
    cfg.suffix_length = 6;
    cfg.w_dir = 5.0;
    cfg.max_iterations = 40;
    cfg.top_k = 8;
    double before = 0.0, after = 0.0;
    std::vector<Tokens> attacked;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto c = cfg;
        c.seed = detail::derive_seed(kOptimSeed, 0x5aff, i);
        const auto res = suffix_attack(L.model, prompts[i], answer_completion(prompts[i]), L.dim, c);
        before += late_mean(res.before, n_layers);
        after += late_mean(res.after, n_layers);
        attacked.push_back(res.attacked_prompt);
    }
    const double reduction = 1.0 - after / before;
    const double base_rate = asr(L.model, prompts, InterventionSpec::none()).asr;
    const double attack_rate = asr(L.model, attacked, InterventionSpec::none()).asr;

    // Short suffixes: the search must land on the exhaustive optimum.
    int exact = 0, checked = 0;
    for (int len = 1; len <= 2; ++len) {
        for (std::size_t i = 0; i < 4; ++i) {
            SuffixAttackConfig c = cfg;
            c.suffix_length = len;
            c.top_k = 24;
            c.seed = i;
            const auto target = answer_completion(prompts[i]);
            const auto res = suffix_attack(L.model, prompts[i], target, L.dim, c);
            const auto pool = c.pool(L.model.config().vocab_size);
            double best = std::numeric_limits<double>::infinity();
            Tokens best_suffix;
            for (int a : pool) {
                for (int b : len == 1 ? std::vector<int>{-1} : pool) {
                    const Tokens s = len == 1 ? Tokens{a} : Tokens{a, b};
                    const double l = attack_loss(L.model, insert_suffix(prompts[i], s), target, L.dim, c.w_ce, c.w_dir);
                    if (l < best) best = l, best_suffix = s;
                }
            }
            ++checked;
            exact += res.final_loss == best && res.suffix == best_suffix;
        }
    }
    const bool pass = reduction >= 0.5 && attack_rate > base_rate && exact == checked;
    return {pass, "late cosine " + fmt(before / 64) + " -> " + fmt(after / 64) + " (" + fmt(100 * reduction, 3) +
                      "% reduction), jailbreak " + fmt(base_rate) + " -> " + fmt(attack_rate) + ", exhaustive matches " +
                      std::to_string(exact) + "/" + std::to_string(checked)};
}

// Every CLI stage, run twice into the same directory, must produce the same bytes.
Verdict determinism() {
    auto& L = *lab;
    const fs::path root = fs::path(fixtures::cache_path("acceptance_determinism"));
    const fs::path work = root / "run", first_run = root / "first";
    fs::remove_all(root);
    fs::create_directories(root);
    const auto model_path = (root / "toy.ckpt").string();
    save_checkpoint(L.model, model_path);
    const auto at = [&](const std::string& f) { return (work / f).string(); };
    const std::string out = work.string();
    const json optim = {{"max_steps", 3}, {"batch_size", 4}, {"grad_accum", 2}, {"pool_size", 2}};
    const std::vector<std::pair<std::string, json>> stages = {
        {"gen-data", {{"task", {{"train_size", 64}, {"val_size", 32}, {"test_size", 32}}}}},
        {"train-toy",
         {{"out_dir", (work / "toy").string()},
          {"model_config", {{"d_model", 16}, {"n_layers", 2}, {"n_heads", 2}, {"d_mlp", 32}}},
          {"train", {{"max_steps", 20}, {"eval_every", 10}, {"eval_size", 16}, {"target_accuracy", 0.0}}}}},
        {"extract-dim", {{"model", model_path}, {"data", at("train.jsonl")}}},
        {"gen-targets", {{"model", model_path}, {"direction", at("direction.json")}, {"data", at("train.jsonl")}, {"max_pairs", 8}}},
        {"train-rdo",
         {{"out_dir", (work / "rdo").string()}, {"model", model_path}, {"direction", at("direction.json")},
          {"targets_file", at("targets.jsonl")}, {"validation", at("val.jsonl")}, {"validation_size", 4}, {"optim", optim}}},
        {"train-cone",
         {{"out_dir", (work / "cone").string()}, {"model", model_path}, {"direction", at("direction.json")},
          {"targets_file", at("targets.jsonl")}, {"validation", at("val.jsonl")}, {"validation_size", 4}, {"optim", optim},
          {"cone", {{"n", 2}, {"samples_per_step", 2}, {"selection_samples", 2}}}}},
        {"train-repind",
         {{"out_dir", (work / "repind").string()}, {"model", model_path}, {"direction", at("direction.json")},
          {"constraints", {at("direction.json")}}, {"targets_file", at("targets.jsonl")}, {"validation", at("val.jsonl")},
          {"validation_size", 4}, {"optim", optim}, {"repind", {{"candidates", 2}}}}},
        {"verify-independence",
         {{"out_dir", (work / "ind").string()}, {"model", model_path}, {"direction", (work / "rdo" / "direction.json").string()},
          {"reference", at("direction.json")}, {"prompts", at("test.jsonl")}, {"max_prompts", 8}}},
        {"attack-suffix",
         {{"out_dir", (work / "attack").string()}, {"model", model_path}, {"direction", at("direction.json")},
          {"prompts", at("test.jsonl")}, {"max_prompts", 2}, {"attack", {{"max_iterations", 2}, {"suffix_length", 3}}}}},
        {"evaluate",
         {{"out_dir", (work / "eval").string()}, {"model", model_path}, {"direction", (work / "rdo" / "direction.json").string()},
          {"prompts", at("test.jsonl")}, {"max_prompts", 8}}},
        {"evaluate",
         {{"out_dir", (work / "eval_cone").string()}, {"model", model_path}, {"cone", (work / "cone" / "cone.json").string()},
          {"prompts", at("test.jsonl")}, {"max_prompts", 8}, {"cone_samples", 8}}},
        {"best-of-n",
         {{"out_dir", (work / "bon_cone").string()}, {"model", model_path}, {"cone", (work / "cone" / "cone.json").string()},
          {"prompts", at("test.jsonl")}, {"max_prompts", 8}, {"n_values", {1, 2}}}},
        {"best-of-n",
         {{"out_dir", (work / "bon_temp").string()}, {"model", model_path}, {"direction", at("direction.json")},
          {"prompts", at("test.jsonl")}, {"max_prompts", 8}, {"n_values", {1, 2}}}},
    };
    std::ostringstream log;
    auto run_all = [&]() -> std::string {
        for (const auto& [cmd, extra] : stages) {
            json cfg = {{"seed", 11}, {"out_dir", out}};
            cfg.update(extra);
            std::ostringstream err;
            if (const int code = cli::dispatch(cmd, cfg, log, err); code != 0) return cmd + " exited " + std::to_string(code) + ": " + err.str();
        }
        return {};
    };
    if (auto e = run_all(); !e.empty()) return {false, "first run: " + e};
    fs::rename(work, first_run);
    if (auto e = run_all(); !e.empty()) return {false, "second run: " + e};
    std::size_t files = 0;
    std::vector<std::string> differing;
    for (const auto& entry : fs::recursive_directory_iterator(first_run)) {
        if (!entry.is_regular_file()) continue;
        ++files;
        const auto rel = fs::relative(entry.path(), first_run);
        if (!fs::exists(work / rel) || read_file(entry.path().string()) != read_file((work / rel).string()))
            differing.push_back(rel.string());
    }
    std::size_t second_files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(work)) second_files += entry.is_regular_file();
    const bool pass = differing.empty() && files == second_files && files > 0;
    std::string detail = std::to_string(files) + " artifact files across " + std::to_string(stages.size()) + " stage runs";
    if (!differing.empty()) detail += ", differing: " + differing.front();
    if (files != second_files) detail += ", file count differs";
    return {pass, detail};
}

Verdict kl_ce_oracles() {
    const std::vector<double> p{0.9, 0.1}, q{0.6, 0.4};
    const double kl = kl_divergence(p, q);
    const double kl_uniform = kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5});
    const double ce_uniform = cross_entropy(Tensor({1, 4}, std::vector<double>(4, 0.7)), std::vector<int>{2}).item();
    const double ce_two = cross_entropy(Tensor({1, 2}, {std::log(0.9), std::log(0.1)}), std::vector<int>{0}).item();
    const bool pass = std::abs(kl - 0.2262) <= 1e-4 && kl_divergence(p, p) == 0.0 && std::abs(kl_uniform - std::log(2.0)) < 1e-15 &&
                      std::abs(ce_uniform - std::log(4.0)) < 1e-12 && std::abs(ce_two + std::log(0.9)) < 1e-12;
    return {pass, "KL([0.9,0.1] || [0.6,0.4]) = " + fmt(kl, 6) + ", KL(p||p) = " + fmt(kl_divergence(p, p)) +
                      ", uniform CE " + fmt(ce_uniform, 6) + " (log 4 = " + fmt(std::log(4.0), 6) + ")"};
}

struct Criterion {
    int id;
    std::string name;
    double limit_seconds;  // 0: no runtime bound
    std::function<Verdict()> run;
    bool needs_lab;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "gradient suite", 120, gradient_suite, false},
        {2, "projection and orthogonality", 30, projection_suite, false},
        {3, "cone sampling", 30, cone_sampling_suite, false},
        {11, "KL and CE oracles", 0, kl_ce_oracles, false},
        {4, "toy end-to-end DIM", 300, toy_dim, false},
        {5, "toy end-to-end RDO vs DIM", 600, rdo_vs_dim, true},
        {6, "cone existence", 900, cone_existence, true},
        {7, "refusal properties", 0, refusal_properties, true},
        {8, "RepInd contrast", 900, repind_contrast, true},
        {9, "suffix attack", 600, suffix_attack_suite, true},
        {10, "determinism", 0, determinism, true},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        Verdict o;
        const Stopwatch sw;
        if (c.needs_lab && !lab) {
            o = {false, "skipped: the toy model from criterion 4 is unavailable"};
        } else {
            try {
                o = c.run();
            } catch (const std::exception& e) {
                o = {false, std::string("exception: ") + e.what()};
            }
        }
        const double secs = sw.seconds();
        if (c.limit_seconds > 0 && secs > c.limit_seconds) {
            o.pass = false;
            o.detail += ", runtime over " + fmt(c.limit_seconds) + " s";
        }
        failures += !o.pass;
        std::cout << "criterion " << std::setw(2) << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": "
                  << o.detail << " [" << fmt(secs, 3) << " s]" << std::endl;
    }
    std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
    return failures ? 1 : 0;
}
