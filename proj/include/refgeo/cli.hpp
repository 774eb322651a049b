#pragma once

// Experiment dispatch. A command reads one JSON config (after command-line
// overrides), checks every field and path up front, runs, and writes its
// artifacts plus a manifest into `out_dir`.

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "refgeo/attack.hpp"
#include "refgeo/bestofn.hpp"
#include "refgeo/checkpoint.hpp"
#include "refgeo/cone.hpp"
#include "refgeo/dataset.hpp"
#include "refgeo/dim.hpp"
#include "refgeo/eval.hpp"
#include "refgeo/io.hpp"
#include "refgeo/rdo.hpp"
#include "refgeo/repind.hpp"
#include "refgeo/train.hpp"

namespace refgeo::cli {

enum ExitCode : int { ok = 0, runtime_failure = 1, config_error = 2, checksum_mismatch = 3 };

class ConfigError : public std::runtime_error {
   public:
    ConfigError(std::string field, const std::string& msg)
        : std::runtime_error("config error: " + field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

   private:
    std::string field_;
};

// `a.b.c=value`; the value is parsed as JSON when possible, else kept as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    std::string ptr;
    for (std::size_t start = 0;;) {
        const auto dot = key.find('.', start);
        ptr += "/" + key.substr(start, dot - start);
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    cfg[json::json_pointer(ptr)] = std::move(value);
}

// Typed, field-named access to a config document.
class Config {
   public:
    explicit Config(json j) : j_(std::move(j)) {
        if (!j_.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    }

    const json& raw() const { return j_; }

    bool has(const std::string& field) const { return find(field) != nullptr; }

    template <class T>
    T get(const std::string& field, T fallback) const {
        const json* v = find(field);
        return v ? convert<T>(field, *v) : fallback;
    }

    template <class T>
    T require(const std::string& field) const {
        const json* v = find(field);
        if (!v) throw ConfigError(field, "required field is missing");
        return convert<T>(field, *v);
    }

    // Input path that must exist now.
    std::string input(const std::string& field) const {
        const auto p = require<std::string>(field);
        if (!std::filesystem::exists(p)) throw ConfigError(field, "file '" + p + "' does not exist");
        return p;
    }

    std::vector<std::string> inputs(const std::string& field) const {
        const auto ps = get<std::vector<std::string>>(field, {});
        for (const auto& p : ps)
            if (!std::filesystem::exists(p)) throw ConfigError(field, "file '" + p + "' does not exist");
        return ps;
    }

   private:
    const json* find(const std::string& field) const {
        const json* cur = &j_;
        std::size_t start = 0;
        for (;;) {
            const auto dot = field.find('.', start);
            const auto key = field.substr(start, dot - start);
            if (!cur->is_object()) return nullptr;
            const auto it = cur->find(key);
            if (it == cur->end() || it->is_null()) return nullptr;
            cur = &*it;
            if (dot == std::string::npos) return cur;
            start = dot + 1;
        }
    }

    template <class T>
    static T convert(const std::string& field, const json& v) {
        try {
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_integer() && v.get<long long>() < 0) throw ConfigError(field, "must be nonnegative");
            }
            return v.get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(field, std::string("wrong type (") + e.what() + ")");
        }
    }

    json j_;
};

struct Context {
    Config cfg;
    std::string command;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
    std::ostream& log;
    std::vector<ManifestEntry> inputs;
    std::vector<ManifestEntry> outputs;

    std::string out(const std::string& name) const { return (out_dir / name).string(); }

    void wrote(const std::string& role, const std::string& path) { outputs.push_back({role, path}); }
    void read(const std::string& role, const std::string& path) { inputs.push_back({role, path}); }
};

// ---- config -> module structs ----

inline SyntheticTaskSpec task_spec(const Config& c, std::uint64_t seed) {
    SyntheticTaskSpec s;
    s.vocab_size = c.get("task.vocab_size", s.vocab_size);
    s.triggers = c.get("task.triggers", s.triggers);
    s.min_content = c.get("task.min_content", s.min_content);
    s.max_content = c.get("task.max_content", s.max_content);
    s.train_size = c.get("task.train_size", s.train_size);
    s.val_size = c.get("task.val_size", s.val_size);
    s.test_size = c.get("task.test_size", s.test_size);
    s.seed = c.get("task.seed", seed);
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("task", e.what());
    }
    if (s.train_size < 0 || s.val_size < 0 || s.test_size < 0) throw ConfigError("task", "negative split size");
    return s;
}

inline OptimConfig optim_config(const Config& c, std::uint64_t seed, const Direction* reference) {
    OptimConfig o;
    if (reference) {
        o.alpha = reference->norm_at_extraction;
        if (reference->layer >= 0) o.add_layer = reference->layer;
    }
    o.lambda_abl = c.get("optim.lambda_abl", o.lambda_abl);
    o.lambda_add = c.get("optim.lambda_add", o.lambda_add);
    o.lambda_ret = c.get("optim.lambda_ret", o.lambda_ret);
    o.alpha = c.get("optim.alpha", o.alpha);
    o.add_layer = c.get("optim.add_layer", o.add_layer);
    o.lr = c.get("optim.lr", o.lr);
    o.batch_size = c.get("optim.batch_size", o.batch_size);
    o.grad_accum = c.get("optim.grad_accum", o.grad_accum);
    o.max_steps = c.get("optim.max_steps", o.max_steps);
    o.min_steps = c.get("optim.min_steps", o.min_steps);
    o.retain_mask_len = c.get("optim.retain_mask_len", o.retain_mask_len);
    o.plateau_patience = c.get("optim.plateau_patience", o.plateau_patience);
    o.lr_factor = c.get("optim.lr_factor", o.lr_factor);
    o.max_lr_reductions = c.get("optim.max_lr_reductions", o.max_lr_reductions);
    o.flat_patience = c.get("optim.flat_patience", o.flat_patience);
    o.improvement_tol = c.get("optim.improvement_tol", o.improvement_tol);
    o.divergence_patience = c.get("optim.divergence_patience", o.divergence_patience);
    o.pool_size = c.get("optim.pool_size", o.pool_size);
    o.seed = c.get("optim.seed", seed);
    try {
        o.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("optim", e.what());
    }
    return o;
}

inline EvalOptions eval_options(const Config& c) {
    EvalOptions e;
    e.max_new_tokens = c.get("eval.max_new_tokens", e.max_new_tokens);
    if (e.max_new_tokens < 1) throw ConfigError("eval.max_new_tokens", "must be at least 1");
    return e;
}

// ---- artifact loading with provenance ----

inline ToyModel load_model(Context& ctx) {
    const auto path = ctx.cfg.input("model");
    ctx.read("model", path);
    return load_checkpoint(path);
}

inline Direction load_direction_for(Context& ctx, const std::string& field, const std::string& path,
                                    const ToyModel& model) {
    auto d = load_direction(path);
    require_checksum(d.model_checksum, model, field + " '" + path + "'");
    if (d.dim() != static_cast<std::size_t>(model.config().d_model))
        throw ConfigError(field, "direction width does not match the model");
    ctx.read(field, path);
    return d;
}

inline Direction load_direction_for(Context& ctx, const std::string& field, const ToyModel& model) {
    return load_direction_for(ctx, field, ctx.cfg.input(field), model);
}

inline ConeBasis load_cone_for(Context& ctx, const std::string& field, const ToyModel& model) {
    const auto path = ctx.cfg.input(field);
    auto b = load_cone(path);
    require_checksum(b.model_checksum, model, field + " '" + path + "'");
    if (b.d_model() != static_cast<std::size_t>(model.config().d_model))
        throw ConfigError(field, "cone width does not match the model");
    ctx.read(field, path);
    return b;
}

inline std::vector<LabeledPrompt> load_prompts_for(Context& ctx, const std::string& field) {
    const auto path = ctx.cfg.input(field);
    ctx.read(field, path);
    auto xs = load_prompts(path);
    if (xs.empty()) throw ConfigError(field, "'" + path + "' contains no prompts");
    return xs;
}

template <class T>
std::vector<T> take(std::vector<T> xs, int limit) {
    if (limit >= 0 && static_cast<std::size_t>(limit) < xs.size()) xs.resize(static_cast<std::size_t>(limit));
    return xs;
}

// Harmful prompts plus safe prompts paired with their clean continuations.
inline SelectionSet validation_set(Context& ctx, const ToyModel& model) {
    const auto xs = load_prompts_for(ctx, "validation");
    const int n = ctx.cfg.get("validation_size", 16);
    const int retain_len = ctx.cfg.get("targets.retain_len", TargetConfig{}.retain_len);
    SelectionSet s;
    s.kl_threshold = ctx.cfg.get("selection.kl_threshold", s.kl_threshold);
    s.harmful = take(prompts_where(xs, true), n);
    for (const auto& p : take(prompts_where(xs, false), n))
        s.safe.push_back({p, completion_of(generate(model, p, retain_len), p.size())});
    if (s.harmful.empty() || s.safe.empty()) throw ConfigError("validation", "needs harmful and safe prompts");
    return s;
}

inline std::vector<PromptRecord> load_targets_for(Context& ctx) {
    const auto path = ctx.cfg.input("targets_file");
    ctx.read("targets", path);
    auto rs = load_records(path);
    if (rs.empty()) throw ConfigError("targets_file", "'" + path + "' contains no records");
    return rs;
}

inline std::vector<std::vector<double>> history_rows(const std::vector<StepLog>& h) {
    std::vector<std::vector<double>> rows;
    for (const auto& s : h) rows.push_back({static_cast<double>(s.step), s.loss, s.lr});
    return rows;
}

// ---- commands ----

inline void cmd_gen_data(Context& ctx) {
    const auto spec = task_spec(ctx.cfg, ctx.seed);
    const auto d = generate_dataset(spec);
    for (auto [name, split] : {std::pair{"train", &d.train}, {"val", &d.val}, {"test", &d.test}}) {
        const auto path = ctx.out(std::string(name) + ".jsonl");
        write_file(path, to_jsonl(*split));
        ctx.wrote(name, path);
    }
    ctx.log << "gen-data: " << d.train.size() << "/" << d.val.size() << "/" << d.test.size() << " prompts\n";
}

inline void cmd_train_toy(Context& ctx) {
    const auto& c = ctx.cfg;
    ToyTrainConfig t;
    t.task = task_spec(c, ctx.seed);
    t.model.vocab_size = t.task.vocab_size;
    t.model.d_model = c.get("model_config.d_model", t.model.d_model);
    t.model.n_layers = c.get("model_config.n_layers", t.model.n_layers);
    t.model.n_heads = c.get("model_config.n_heads", t.model.n_heads);
    t.model.d_mlp = c.get("model_config.d_mlp", t.model.d_mlp);
    t.model.max_seq_len = c.get("model_config.max_seq_len", t.model.max_seq_len);
    t.model.seed = c.get("model_config.seed", t.model.seed);
    try {
        t.model.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("model_config", e.what());
    }
    t.completion_len = c.get("train.completion_len", t.completion_len);
    t.batch_size = c.get("train.batch_size", t.batch_size);
    t.max_steps = c.get("train.max_steps", t.max_steps);
    t.warmup_steps = c.get("train.warmup_steps", t.warmup_steps);
    t.lr = c.get("train.lr", t.lr);
    t.target_accuracy = c.get("train.target_accuracy", t.target_accuracy);
    t.eval_every = c.get("train.eval_every", t.eval_every);
    t.eval_size = c.get("train.eval_size", t.eval_size);
    t.seed = ctx.seed;
    const auto r = train_toy_model(t, [&](const LearningCurvePoint& p) {
        ctx.log << "train-toy: step " << p.step << " loss " << p.loss << " acc " << p.accuracy << "\n";
    });
    const auto ckpt = ctx.out("model.ckpt");
    save_checkpoint(r.model, ckpt);
    ctx.wrote("model", ckpt);
    std::vector<std::vector<double>> rows;
    for (const auto& p : r.curve) rows.push_back({static_cast<double>(p.step), p.loss, p.accuracy});
    write_csv(ctx.out("learning_curve.csv"), {"step", "loss", "accuracy"}, rows);
    ctx.wrote("learning_curve", ctx.out("learning_curve.csv"));
    ctx.log << "train-toy: accuracy " << r.accuracy << " after " << r.steps << " steps, checksum "
            << r.model.checksum() << "\n";
}

inline void cmd_extract_dim(Context& ctx) {
    const auto model = load_model(ctx);
    const auto xs = load_prompts_for(ctx, "data");
    const int layer = ctx.cfg.get("layer", model.config().n_layers - 1);
    if (layer < 0 || layer > model.config().n_layers) throw ConfigError("layer", "outside 0..n_layers");
    const int position = ctx.cfg.get("position", kLastPosition);
    const auto d = extract_dim(model, prompts_where(xs, true), prompts_where(xs, false), layer, position);
    save_direction(ctx.out("direction.json"), d);
    ctx.wrote("direction", ctx.out("direction.json"));
    ctx.log << "extract-dim: layer " << layer << " norm " << d.norm_at_extraction << "\n";
}

inline void cmd_gen_targets(Context& ctx) {
    const auto model = load_model(ctx);
    const auto seed_dir = load_direction_for(ctx, "direction", model);
    const auto xs = load_prompts_for(ctx, "data");
    const auto harm = prompts_where(xs, true);
    const auto safe = prompts_where(xs, false);
    std::vector<std::pair<Tokens, Tokens>> pairs;
    for (std::size_t i = 0; i < std::min(harm.size(), safe.size()); ++i) pairs.push_back({harm[i], safe[i]});
    pairs = take(std::move(pairs), ctx.cfg.get("max_pairs", -1));
    TargetConfig tc;
    tc.answer_len = ctx.cfg.get("targets.answer_len", tc.answer_len);
    tc.refusal_len = ctx.cfg.get("targets.refusal_len", tc.refusal_len);
    tc.retain_len = ctx.cfg.get("targets.retain_len", tc.retain_len);
    tc.alpha = ctx.cfg.get("targets.alpha", tc.alpha);
    tc.add_layer = ctx.cfg.get("targets.add_layer", tc.add_layer);
    tc.min_answer_rate = ctx.cfg.get("targets.min_answer_rate", tc.min_answer_rate);
    tc.drop_refused_answers = ctx.cfg.get("targets.drop_refused_answers", tc.drop_refused_answers);
    const auto rep = generate_targets(model, seed_dir, pairs, tc);
    write_file(ctx.out("targets.jsonl"), to_jsonl(rep.records));
    ctx.wrote("targets", ctx.out("targets.jsonl"));
    save_json(ctx.out("targets_report.json"), {{"records", rep.records.size()},
                                               {"answer_rate", rep.answer_rate},
                                               {"low_quality", rep.low_quality},
                                               {"dropped", rep.dropped}});
    ctx.wrote("targets_report", ctx.out("targets_report.json"));
    ctx.log << "gen-targets: " << rep.records.size() << " records, " << rep.dropped.size() << " dropped, answer rate "
            << rep.answer_rate << (rep.low_quality ? " (low quality)" : "") << "\n";
}

inline void cmd_train_rdo(Context& ctx) {
    const auto model = load_model(ctx);
    const auto records = load_targets_for(ctx);
    std::optional<Direction> ref;
    if (ctx.cfg.has("direction")) ref = load_direction_for(ctx, "direction", model);
    auto oc = optim_config(ctx.cfg, ctx.seed, ref ? &*ref : nullptr);
    for (const auto& p : ctx.cfg.inputs("orthogonal_to")) oc.orthogonal_to.push_back(load_direction_for(ctx, "orthogonal_to", p, model));
    const auto val = validation_set(ctx, model);
    const auto res = rdo_train(model, records, oc, val);
    save_direction(ctx.out("direction.json"), res.direction);
    ctx.wrote("direction", ctx.out("direction.json"));
    const std::filesystem::path pool_dir = ctx.cfg.get<std::string>("pool_dir", ctx.out("pool"));
    for (std::size_t i = 0; i < res.pool.size(); ++i) {
        const auto path = (pool_dir / ("step_" + std::to_string(res.pool_steps[i]) + ".json")).string();
        save_direction(path, res.pool[i]);
        ctx.wrote("pool", path);
    }
    write_csv(ctx.out("history.csv"), {"step", "loss", "lr"}, history_rows(res.history));
    ctx.wrote("history", ctx.out("history.csv"));
    ctx.log << "train-rdo: " << res.steps << " steps, final loss " << res.history.back().loss << "\n";
}

inline void cmd_train_cone(Context& ctx) {
    const auto model = load_model(ctx);
    const auto records = load_targets_for(ctx);
    std::optional<Direction> ref;
    if (ctx.cfg.has("direction")) ref = load_direction_for(ctx, "direction", model);
    const auto oc = optim_config(ctx.cfg, ctx.seed, ref ? &*ref : nullptr);
    ConeConfig cc;
    cc.n = ctx.cfg.get("cone.n", cc.n);
    cc.samples_per_step = ctx.cfg.get("cone.samples_per_step", cc.samples_per_step);
    cc.selection_samples = ctx.cfg.get("cone.selection_samples", cc.selection_samples);
    cc.min_refusal_score = ctx.cfg.get("cone.min_refusal_score", cc.min_refusal_score);
    if (cc.n < 1 || cc.n > static_cast<std::size_t>(model.config().d_model)) throw ConfigError("cone.n", "must lie in [1, d_model]");
    if (cc.samples_per_step < 1) throw ConfigError("cone.samples_per_step", "must be at least 1");
    const auto val = validation_set(ctx, model);
    const auto res = rco_train(model, records, oc, cc, val);
    save_cone(ctx.out("cone.json"), res.basis);
    ctx.wrote("cone", ctx.out("cone.json"));
    write_csv(ctx.out("history.csv"), {"step", "loss", "lr"}, history_rows(res.history));
    ctx.wrote("history", ctx.out("history.csv"));
    for (const auto& line : res.log) ctx.log << "train-cone: " << line << "\n";
    ctx.log << "train-cone: N=" << cc.n << " " << res.history.size() << " steps"
            << (res.fallback ? ", no basis passed the filter (fallback)" : "") << "\n";
}

inline void cmd_train_repind(Context& ctx) {
    const auto model = load_model(ctx);
    const auto records = load_targets_for(ctx);
    std::optional<Direction> ref;
    if (ctx.cfg.has("direction")) ref = load_direction_for(ctx, "direction", model);
    const auto oc = optim_config(ctx.cfg, ctx.seed, ref ? &*ref : nullptr);
    IndependenceConstraintSet cs;
    for (const auto& p : ctx.cfg.inputs("constraints")) cs.references.push_back(load_direction_for(ctx, "constraints", p, model));
    if (cs.references.empty()) throw ConfigError("constraints", "at least one constraint direction is required");
    cs.lambda_ind = ctx.cfg.get("repind.lambda_ind", cs.lambda_ind);
    cs.layer_cutoff = ctx.cfg.get("repind.layer_cutoff", cs.layer_cutoff);
    const int n_cand = ctx.cfg.get("repind.candidates", 5);
    if (n_cand < 1) throw ConfigError("repind.candidates", "must be at least 1");
    try {
        cs.validate(static_cast<std::size_t>(model.config().d_model));
    } catch (const std::invalid_argument& e) {
        throw ConfigError("repind", e.what());
    }
    const auto val = validation_set(ctx, model);
    const auto res = train_repind_direction(model, records, cs, oc, val, n_cand, eval_options(ctx.cfg));
    save_direction(ctx.out("direction.json"), res.direction);
    ctx.wrote("direction", ctx.out("direction.json"));
    json cands = json::array();
    for (const auto& c : res.candidates)
        cands.push_back({{"seed", c.seed},
                         {"validation_asr", c.validation_asr},
                         {"refusal_score", c.score.refusal_score},
                         {"ablated_propensity", c.score.ablated_propensity},
                         {"kl", c.score.kl}});
    save_json(ctx.out("candidates.json"), {{"selected", res.selected},
                                           {"random_baseline_asr", res.random_baseline_asr},
                                           {"failed", res.failed},
                                           {"candidates", cands}});
    ctx.wrote("candidates", ctx.out("candidates.json"));
    ctx.log << "train-repind: selected candidate " << res.selected
            << (res.failed ? " (no candidate beat the random baseline)" : "") << "\n";
}

inline void cmd_verify_independence(Context& ctx) {
    const auto model = load_model(ctx);
    const auto r = load_direction_for(ctx, "direction", model);
    const auto v = load_direction_for(ctx, "reference", model);
    const auto prompts = take(prompts_where(load_prompts_for(ctx, "prompts"), true), ctx.cfg.get("max_prompts", 64));
    if (prompts.empty()) throw ConfigError("prompts", "no harmful prompts");
    const double eps = ctx.cfg.get("epsilon", 0.05);
    const double cutoff = ctx.cfg.get("layer_cutoff", 0.9);
    const auto rep = verify_independence(model, r, v, prompts, eps, cutoff);
    save_json(ctx.out("independence.json"), to_json(rep));
    ctx.wrote("independence", ctx.out("independence.json"));
    const auto cr = cosine_profile(model, r, prompts);
    const auto cr_abl = cosine_profile(model, r, prompts, InterventionSpec::ablate(v));
    const auto cv = cosine_profile(model, v, prompts);
    const auto cv_abl = cosine_profile(model, v, prompts, InterventionSpec::ablate(r));
    std::vector<std::vector<double>> rows;
    for (std::size_t l = 0; l < cr.values.size(); ++l)
        rows.push_back({static_cast<double>(l), cr.values[l], cr_abl.values[l], cv.values[l], cv_abl.values[l]});
    write_csv(ctx.out("layer_cosine.csv"), {"layer", "cos_r", "cos_r_ablate_v", "cos_v", "cos_v_ablate_r"}, rows);
    ctx.wrote("layer_cosine", ctx.out("layer_cosine.csv"));
    ctx.log << "verify-independence: max deviation " << rep.max_deviation_r << " / " << rep.max_deviation_v
            << (rep.pass ? " PASS" : " FAIL") << "\n";
}

inline void cmd_attack_suffix(Context& ctx) {
    const auto model = load_model(ctx);
    const auto dir = load_direction_for(ctx, "direction", model);
    const auto prompts = take(prompts_where(load_prompts_for(ctx, "prompts"), true), ctx.cfg.get("max_prompts", 64));
    SuffixAttackConfig ac;
    ac.suffix_length = ctx.cfg.get("attack.suffix_length", ac.suffix_length);
    ac.top_k = ctx.cfg.get("attack.top_k", ac.top_k);
    ac.max_iterations = ctx.cfg.get("attack.max_iterations", ac.max_iterations);
    ac.w_ce = ctx.cfg.get("attack.w_ce", ac.w_ce);
    ac.w_dir = ctx.cfg.get("attack.w_dir", ac.w_dir);
    ac.late_fraction = ctx.cfg.get("attack.late_fraction", ac.late_fraction);
    ac.joint_budget = ctx.cfg.get("attack.joint_budget", ac.joint_budget);
    ac.allowed_tokens = ctx.cfg.get("attack.allowed_tokens", ac.allowed_tokens);
    try {
        ac.validate(model.config().vocab_size);
    } catch (const std::invalid_argument& e) {
        throw ConfigError("attack", e.what());
    }
    const auto opt = eval_options(ctx.cfg);
    const int L = model.config().n_layers;
    json per = json::array();
    std::vector<Tokens> attacked;
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        SuffixAttackConfig c = ac;
        c.seed = detail::derive_seed(ctx.seed, 0x5aff, i);
        const auto res = suffix_attack(model, prompts[i], answer_completion(prompts[i]), dir, c);
        before += late_mean(res.before, L, ac.late_fraction);
        after += late_mean(res.after, L, ac.late_fraction);
        attacked.push_back(res.attacked_prompt);
        per.push_back(to_json(res));
    }
    const double n = static_cast<double>(prompts.size());
    const double base_rate = asr(model, prompts, InterventionSpec::none(), opt).asr;
    const double attack_rate = asr(model, attacked, InterventionSpec::none(), opt).asr;
    save_json(ctx.out("attack.json"), {{"late_cosine_before", before / n},
                                       {"late_cosine_after", after / n},
                                       {"jailbreak_rate_baseline", base_rate},
                                       {"jailbreak_rate_attacked", attack_rate},
                                       {"prompts", per}});
    ctx.wrote("attack", ctx.out("attack.json"));
    ctx.log << "attack-suffix: late cosine " << before / n << " -> " << after / n << ", jailbreak " << base_rate
            << " -> " << attack_rate << "\n";
}

inline void cmd_evaluate(Context& ctx) {
    const auto model = load_model(ctx);
    const bool have_dir = ctx.cfg.has("direction"), have_cone = ctx.cfg.has("cone");
    if (have_dir == have_cone) throw ConfigError(have_dir ? "cone" : "direction", "exactly one of direction or cone is required");
    const auto xs = load_prompts_for(ctx, "prompts");
    const auto harmful = take(prompts_where(xs, true), ctx.cfg.get("max_prompts", -1));
    const auto safe = take(prompts_where(xs, false), ctx.cfg.get("max_prompts", -1));
    const auto opt = eval_options(ctx.cfg);
    if (have_cone) {
        const auto basis = load_cone_for(ctx, "cone", model);
        const int n = ctx.cfg.get("cone_samples", 256);
        if (n < 1) throw ConfigError("cone_samples", "must be at least 1");
        const auto ev = evaluate_cone(model, basis, harmful, n, ctx.seed, opt);
        save_json(ctx.out("cone_eval.json"), to_json(ev));
        ctx.wrote("cone_eval", ctx.out("cone_eval.json"));
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < ev.sample_asr.size(); ++i) rows.push_back({static_cast<double>(i), ev.sample_asr[i]});
        write_csv(ctx.out("cone_samples.csv"), {"sample", "asr"}, rows);
        ctx.wrote("cone_samples", ctx.out("cone_samples.csv"));
        ctx.log << "evaluate: cone sample ASR min " << ev.min << " median " << ev.median << " max " << ev.max << "\n";
        return;
    }
    const auto dir = load_direction_for(ctx, "direction", model);
    auto rep = asr(model, harmful, InterventionSpec::ablate(dir), opt);
    rep.experiment_id = ctx.cfg.get<std::string>("experiment_id", "evaluate");
    const double scale = dir.norm_at_extraction > 0.0 ? dir.norm_at_extraction : 1.0;
    const auto fractions = ctx.cfg.get<std::vector<double>>("alpha_grid", {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5});
    for (double f : fractions) rep.alpha_grid.push_back(f * scale);
    const int add_layer = ctx.cfg.get("add_layer", resolve_add_layer(-1, dir, model.config()));
    try {
        rep.refusal_curve = refusal_scaling_curve(model, safe, dir, rep.alpha_grid, add_layer, opt);
    } catch (const std::invalid_argument& e) {
        throw ConfigError("alpha_grid", e.what());
    }
    std::vector<RetainPair> retain;
    for (const auto& p : safe) retain.push_back({p, completion_of(generate(model, p, TargetConfig{}.retain_len), p.size())});
    rep.side_effect_kl = side_effect_kl(model, dir, retain);
    save_json(ctx.out("eval_report.json"), to_json(rep));
    ctx.wrote("eval_report", ctx.out("eval_report.json"));
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < rep.alpha_grid.size(); ++i) rows.push_back({rep.alpha_grid[i], rep.refusal_curve[i]});
    write_csv(ctx.out("alpha_refusal.csv"), {"alpha", "refusal_rate"}, rows);
    ctx.wrote("alpha_refusal", ctx.out("alpha_refusal.csv"));
    ctx.log << "evaluate: ASR " << rep.asr << " strict " << rep.strict_asr << " side-effect KL " << rep.side_effect_kl << "\n";
}

inline void cmd_best_of_n(Context& ctx) {
    const auto model = load_model(ctx);
    const bool have_dir = ctx.cfg.has("direction"), have_cone = ctx.cfg.has("cone");
    if (have_dir == have_cone) throw ConfigError(have_dir ? "cone" : "direction", "exactly one of direction or cone is required");
    const auto harmful = take(prompts_where(load_prompts_for(ctx, "prompts"), true), ctx.cfg.get("max_prompts", -1));
    const auto ns = ctx.cfg.get<std::vector<int>>("n_values", {1, 2, 4, 8});
    for (int n : ns)
        if (n < 1) throw ConfigError("n_values", "every N must be at least 1");
    const auto opt = eval_options(ctx.cfg);
    std::optional<ConeBasis> basis;
    std::optional<Direction> dir;
    if (have_cone) basis = load_cone_for(ctx, "cone", model);
    else dir = load_direction_for(ctx, "direction", model);
    const double temperature = ctx.cfg.get("temperature", 1.0);
    if (!(temperature > 0.0)) throw ConfigError("temperature", "must be positive");
    std::vector<std::vector<double>> rows;
    json results = json::array();
    for (int n : ns) {
        BestOfNStrategy s = basis ? BestOfNStrategy{ConeSamplesStrategy{*basis, n}}
                                  : BestOfNStrategy{TemperatureStrategy{*dir, temperature, n}};
        const auto rep = best_of_n(model, harmful, s, ctx.seed, opt);
        rows.push_back({static_cast<double>(n), rep.asr});
        results.push_back({{"n", n}, {"asr", rep.asr}, {"successful_attempt", rep.successful_attempt}});
        ctx.log << "best-of-n: N=" << n << " ASR " << rep.asr << "\n";
    }
    save_json(ctx.out("best_of_n.json"), {{"strategy", basis ? "cone_samples" : "temperature"}, {"results", results}});
    ctx.wrote("best_of_n", ctx.out("best_of_n.json"));
    write_csv(ctx.out("n_vs_asr.csv"), {"n", "asr"}, rows);
    ctx.wrote("n_vs_asr", ctx.out("n_vs_asr.csv"));
}

inline const std::map<std::string, std::function<void(Context&)>>& commands() {
    static const std::map<std::string, std::function<void(Context&)>> table{
        {"gen-data", cmd_gen_data},
        {"train-toy", cmd_train_toy},
        {"extract-dim", cmd_extract_dim},
        {"gen-targets", cmd_gen_targets},
        {"train-rdo", cmd_train_rdo},
        {"train-cone", cmd_train_cone},
        {"train-repind", cmd_train_repind},
        {"verify-independence", cmd_verify_independence},
        {"attack-suffix", cmd_attack_suffix},
        {"evaluate", cmd_evaluate},
        {"best-of-n", cmd_best_of_n},
    };
    return table;
}

// Runs one command and returns its exit status. Diagnostics go to `err`.
inline int dispatch(const std::string& command, const json& config, std::ostream& log = std::clog,
                    std::ostream& err = std::cerr) {
    try {
        const auto it = commands().find(command);
        if (it == commands().end()) throw ConfigError("command", "unknown command '" + command + "'");
        Context ctx{Config(config), command, 0, {}, log, {}, {}};
        ctx.seed = ctx.cfg.require<std::uint64_t>("seed");
        ctx.out_dir = ctx.cfg.require<std::string>("out_dir");
        std::filesystem::create_directories(ctx.out_dir);
        it->second(ctx);
        auto manifest = make_manifest(command, ctx.seed, config, ctx.inputs, ctx.outputs);
        save_json(ctx.out("manifest-" + command + ".json"), manifest);
        return ok;
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return config_error;
    } catch (const ChecksumMismatch& e) {
        err << "checksum mismatch: " << e.what() << "\n";
        return checksum_mismatch;
    } catch (const std::exception& e) {
        err << command << " failed: " << e.what() << "\n";
        return runtime_failure;
    }
}

}  // namespace refgeo::cli
