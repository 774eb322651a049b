#pragma once

// Difference-in-means direction extraction.

#include <string>
#include <vector>

#include "refgeo/direction.hpp"
#include "refgeo/model.hpp"

namespace refgeo {

inline constexpr int kLastPosition = -1;
inline constexpr double kDegenerateNorm = 1e-8;

inline std::size_t resolve_position(std::size_t seq_len, int position) {
    if (position == kLastPosition) return seq_len - 1;
    if (position < 0 || static_cast<std::size_t>(position) >= seq_len) {
        throw std::invalid_argument("position " + std::to_string(position) + " invalid for prompt of length " +
                                    std::to_string(seq_len));
    }
    return static_cast<std::size_t>(position);
}

// x_i^(l) for every prompt, unintervened.
inline std::vector<std::vector<double>> collect_activations(const ToyModel& model, const std::vector<Tokens>& prompts,
                                                            int layer, int position) {
    if (layer < 0 || layer > model.config().n_layers) {
        throw std::invalid_argument("layer " + std::to_string(layer) + " outside [0," +
                                    std::to_string(model.config().n_layers) + "]");
    }
    std::vector<std::vector<double>> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) {
        const auto res = forward(model, p);
        out.push_back(res.trace.at(static_cast<std::size_t>(layer), resolve_position(p.size(), position)));
    }
    return out;
}

inline std::vector<double> mean_vector(const std::vector<std::vector<double>>& xs) {
    std::vector<double> m(xs.at(0).size(), 0.0);
    for (const auto& x : xs)
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += x[i];
    for (auto& v : m) v /= static_cast<double>(xs.size());
    return m;
}

// v = mean_harm x_i^(l) - mean_safe x_i^(l), returned normalized with
// norm_at_extraction = |v|. Throws DegenerateDirection when |v| < 1e-8.
inline Direction difference_in_means(const std::vector<std::vector<double>>& harmful,
                                     const std::vector<std::vector<double>>& safe, int layer = -1,
                                     int position = kLastPosition) {
    if (harmful.empty() || safe.empty()) throw std::invalid_argument("extract_dim: empty prompt set");
    auto v = mean_vector(harmful);
    const auto s = mean_vector(safe);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= s[i];
    if (norm2(v) < kDegenerateNorm) {
        throw DegenerateDirection("extract_dim: degenerate difference-in-means (|v| < 1e-8)");
    }
    return Direction::from_vector(std::move(v), DirectionSource::dim, layer, position);
}

inline Direction extract_dim(const ToyModel& model, const std::vector<Tokens>& harmful,
                             const std::vector<Tokens>& safe, int layer, int position = kLastPosition) {
    if (harmful.empty() || safe.empty()) throw std::invalid_argument("extract_dim: empty prompt set");
    auto d = difference_in_means(collect_activations(model, harmful, layer, position),
                                 collect_activations(model, safe, layer, position), layer, position);
    d.model_checksum = model.checksum();
    return d;
}

}  // namespace refgeo
