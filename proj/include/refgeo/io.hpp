#pragma once

// On-disk artifacts: Direction and ConeBasis JSON, JSONL datasets, reports,
// CSV exports and run manifests. Every writer emits deterministic bytes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "refgeo/attack.hpp"
#include "refgeo/cone.hpp"
#include "refgeo/dataset.hpp"
#include "refgeo/direction.hpp"
#include "refgeo/eval.hpp"
#include "refgeo/rdo.hpp"
#include "refgeo/repind.hpp"

namespace refgeo {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ChecksumMismatch : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

// FNV-1a 64 of a file's bytes, hex.
inline std::string file_checksum(const std::string& path) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : read_file(path)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline void save_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline json load_json(const std::string& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError("'" + path + "' is not valid JSON: " + e.what());
    }
}

// ---- directions ----

inline json to_json(const Direction& d) {
    return {{"schema_version", kSchemaVersion}, {"vector", d.vector},   {"norm_at_extraction", d.norm_at_extraction},
            {"source", to_string(d.source)},    {"layer", d.layer},     {"position", d.position},
            {"model_checksum", d.model_checksum}};
}

inline Direction direction_from_json(const json& j) {
    try {
        if (j.at("schema_version").get<int>() != kSchemaVersion) throw FormatError("direction: unsupported schema_version");
        auto v = j.at("vector").get<std::vector<double>>();
        auto d = Direction::from_vector(v, direction_source_from_string(j.at("source").get<std::string>()),
                                        j.at("layer").get<int>(), j.at("position").get<int>());
        // Stored unit vectors are kept bit-exact so load/save cycles are stable.
        if (std::abs(norm2(v) - 1.0) < 1e-12) d.vector = std::move(v);
        d.norm_at_extraction = j.at("norm_at_extraction").get<double>();
        d.model_checksum = j.at("model_checksum").get<std::string>();
        return d;
    } catch (const json::exception& e) {
        throw FormatError(std::string("direction: ") + e.what());
    }
}

inline void save_direction(const std::string& path, const Direction& d) { save_json(path, to_json(d)); }
inline Direction load_direction(const std::string& path) { return direction_from_json(load_json(path)); }

// ---- cone bases ----

inline json to_json(const ConeBasis& b) {
    return {{"schema_version", kSchemaVersion}, {"N", b.dim()},       {"vectors", b.vectors},
            {"layer", b.layer},                 {"alpha", b.alpha},   {"steps", b.steps},
            {"seed", b.seed},                   {"model_checksum", b.model_checksum}};
}

inline ConeBasis cone_from_json(const json& j) {
    try {
        if (j.at("schema_version").get<int>() != kSchemaVersion) throw FormatError("cone: unsupported schema_version");
        ConeBasis b;
        b.vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
        if (b.dim() != j.at("N").get<std::size_t>()) throw FormatError("cone: N does not match the vector count");
        b.layer = j.at("layer").get<int>();
        b.alpha = j.at("alpha").get<double>();
        b.steps = j.at("steps").get<int>();
        b.seed = j.at("seed").get<std::uint64_t>();
        b.model_checksum = j.at("model_checksum").get<std::string>();
        b.validate();
        return b;
    } catch (const json::exception& e) {
        throw FormatError(std::string("cone: ") + e.what());
    }
}

inline void save_cone(const std::string& path, const ConeBasis& b) { save_json(path, to_json(b)); }
inline ConeBasis load_cone(const std::string& path) { return cone_from_json(load_json(path)); }

// ---- datasets (JSONL) ----

inline std::string to_jsonl(const std::vector<LabeledPrompt>& xs) {
    std::string out;
    for (const auto& x : xs) out += json{{"prompt", x.prompt}, {"harmful", x.harmful}}.dump() + "\n";
    return out;
}

inline std::string to_jsonl(const std::vector<PromptRecord>& xs) {
    std::string out;
    for (const auto& r : xs) {
        out += json{{"p_harm", r.p_harm},
                    {"p_safe", r.p_safe},
                    {"t_answer", r.t_answer},
                    {"t_refusal", r.t_refusal},
                    {"t_retain", r.t_retain}}
                   .dump() +
               "\n";
    }
    return out;
}

template <class F>
void for_each_jsonl(const std::string& path, F&& f) {
    std::istringstream is(read_file(path));
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            f(json::parse(line));
        } catch (const json::exception& e) {
            throw FormatError("'" + path + "' line " + std::to_string(n) + ": " + e.what());
        }
    }
}

inline std::vector<LabeledPrompt> load_prompts(const std::string& path) {
    std::vector<LabeledPrompt> out;
    for_each_jsonl(path, [&](const json& j) {
        out.push_back({j.at("prompt").get<Tokens>(), j.at("harmful").get<bool>()});
    });
    return out;
}

inline std::vector<PromptRecord> load_records(const std::string& path) {
    std::vector<PromptRecord> out;
    for_each_jsonl(path, [&](const json& j) {
        out.push_back({j.at("p_harm").get<Tokens>(), j.at("p_safe").get<Tokens>(), j.at("t_answer").get<Tokens>(),
                       j.at("t_refusal").get<Tokens>(), j.at("t_retain").get<Tokens>()});
    });
    return out;
}

// ---- reports ----

inline json to_json(const EvalReport& r) {
    json outcomes = json::array();
    for (const auto& o : r.outcomes)
        outcomes.push_back({{"prompt", o.prompt}, {"completion", o.completion}, {"outcome", to_string(o.outcome)}});
    return {{"schema_version", kSchemaVersion},
            {"experiment_id", r.experiment_id},
            {"model_checksum", r.model_checksum},
            {"intervention", r.intervention},
            {"asr", r.asr},
            {"strict_asr", r.strict_asr},
            {"alpha_grid", r.alpha_grid},
            {"refusal_curve", r.refusal_curve},
            {"side_effect_kl", r.side_effect_kl},
            {"samples", r.samples},
            {"outcomes", outcomes}};
}

inline Outcome outcome_from_string(const std::string& s) {
    if (s == "refused") return Outcome::refused;
    if (s == "complied") return Outcome::complied;
    if (s == "degenerate") return Outcome::degenerate;
    throw FormatError("unknown outcome '" + s + "'");
}

inline EvalReport eval_report_from_json(const json& j) {
    try {
        EvalReport r;
        r.experiment_id = j.at("experiment_id").get<std::string>();
        r.model_checksum = j.at("model_checksum").get<std::string>();
        r.intervention = j.at("intervention").get<std::string>();
        r.asr = j.at("asr").get<double>();
        r.strict_asr = j.at("strict_asr").get<double>();
        r.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
        r.refusal_curve = j.at("refusal_curve").get<std::vector<double>>();
        r.side_effect_kl = j.at("side_effect_kl").get<double>();
        r.samples = j.at("samples").get<std::vector<double>>();
        for (const auto& o : j.at("outcomes"))
            r.outcomes.push_back({o.at("prompt").get<Tokens>(), o.at("completion").get<Tokens>(),
                                  outcome_from_string(o.at("outcome").get<std::string>())});
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("eval report: ") + e.what());
    }
}

// Rejects an artifact produced against a different model.
inline void require_checksum(const std::string& artifact_checksum, const ToyModel& model, const std::string& what) {
    const auto expected = model.checksum();
    if (!artifact_checksum.empty() && artifact_checksum != expected) {
        throw ChecksumMismatch(what + " was produced for model " + artifact_checksum + ", loaded model is " + expected);
    }
}

inline EvalReport load_eval_report(const std::string& path, const ToyModel& model) {
    auto r = eval_report_from_json(load_json(path));
    if (r.model_checksum != model.checksum()) {
        throw ChecksumMismatch("eval report '" + path + "' belongs to model " + r.model_checksum + ", loaded model is " +
                               model.checksum());
    }
    return r;
}

inline json to_json(const CosineProfile& p) { return {{"values", p.values}, {"intervention", p.intervention}}; }

inline json to_json(const IndependenceReport& r) {
    return {{"schema_version", kSchemaVersion}, {"layers", r.layers},
            {"deviation_r", r.deviation_r},     {"deviation_v", r.deviation_v},
            {"max_deviation_r", r.max_deviation_r}, {"max_deviation_v", r.max_deviation_v},
            {"epsilon", r.epsilon},             {"pass", r.pass}};
}

inline json to_json(const SuffixAttackResult& r) {
    return {{"suffix", r.suffix},           {"attacked_prompt", r.attacked_prompt}, {"initial_loss", r.initial_loss},
            {"final_loss", r.final_loss},   {"loss_trace", r.loss_trace},           {"iterations", r.iterations},
            {"early_stopped", r.early_stopped}, {"before", to_json(r.before)},       {"after", to_json(r.after)}};
}

inline json to_json(const ConeEvaluation& e) {
    return {{"sample_asr", e.sample_asr}, {"coefficients", e.coefficients}, {"min", e.min}, {"median", e.median},
            {"max", e.max}};
}

inline json to_json(const std::vector<StepLog>& h) {
    json a = json::array();
    for (const auto& s : h) a.push_back({{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}});
    return a;
}

// ---- CSV ----

inline std::string format_number(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
    std::string out;
    for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += "\n";
    for (const auto& r : rows) {
        if (r.size() != header.size()) throw std::invalid_argument("write_csv: row width differs from header");
        for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + format_number(r[i]);
        out += "\n";
    }
    write_file(path, out);
}

// ---- manifests ----

struct ManifestEntry {
    std::string role;
    std::string path;
};

// Inputs and outputs with content checksums; no timestamps, so reruns with
// the same seeds reproduce the manifest byte for byte.
inline json make_manifest(const std::string& command, std::uint64_t seed, const json& config,
                          const std::vector<ManifestEntry>& inputs, const std::vector<ManifestEntry>& outputs) {
    auto entries = [](const std::vector<ManifestEntry>& xs) {
        json a = json::array();
        for (const auto& e : xs)
            a.push_back({{"role", e.role},
                         {"path", std::filesystem::path(e.path).filename().string()},
                         {"checksum", file_checksum(e.path)}});
        return a;
    };
    return {{"schema_version", kSchemaVersion}, {"tool", "refgeo"},           {"tool_version", "1.0.0"},
            {"command", command},               {"seed", seed},               {"config", config},
            {"inputs", entries(inputs)},        {"outputs", entries(outputs)}};
}

}  // namespace refgeo
