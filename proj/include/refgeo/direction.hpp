#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "refgeo/tensor.hpp"

namespace refgeo {

enum class DirectionSource { dim, rdo, cone_sample, repind, random };

inline std::string to_string(DirectionSource s) {
    switch (s) {
        case DirectionSource::dim: return "DIM";
        case DirectionSource::rdo: return "RDO";
        case DirectionSource::cone_sample: return "cone-sample";
        case DirectionSource::repind: return "RepInd";
        case DirectionSource::random: return "random";
    }
    return "unknown";
}

inline DirectionSource direction_source_from_string(const std::string& s) {
    if (s == "DIM") return DirectionSource::dim;
    if (s == "RDO") return DirectionSource::rdo;
    if (s == "cone-sample") return DirectionSource::cone_sample;
    if (s == "RepInd") return DirectionSource::repind;
    if (s == "random") return DirectionSource::random;
    throw std::invalid_argument("unknown direction source '" + s + "'");
}

class DegenerateDirection : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

inline double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

// A unit vector in residual-stream space plus where it came from.
struct Direction {
    std::vector<double> vector;  // unit L2 norm
    double norm_at_extraction = 1.0;
    DirectionSource source = DirectionSource::random;
    int layer = -1;
    int position = -1;  // -1: last prompt token
    std::string model_checksum;

    // Normalizes `v`; the pre-normalization length is kept as the default α.
    static Direction from_vector(std::vector<double> v, DirectionSource source, int layer = -1, int position = -1) {
        const double n = norm2(v);
        if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateDirection("direction: zero or non-finite vector");
        for (auto& x : v) x /= n;
        Direction d;
        d.vector = std::move(v);
        d.norm_at_extraction = n;
        d.source = source;
        d.layer = layer;
        d.position = position;
        return d;
    }

    std::size_t dim() const { return vector.size(); }
    Tensor tensor() const { return Tensor::vector(vector); }
};

// x - r̂ r̂ᵀ x
inline std::vector<double> ablate_vector(std::span<const double> x, std::span<const double> r) {
    if (x.size() != r.size()) {
        throw ShapeError("ablate_vector: dimension mismatch " + std::to_string(x.size()) + " vs " +
                         std::to_string(r.size()));
    }
    const double n = norm2(r);
    if (!(n > 0.0)) throw DegenerateDirection("ablate_vector: zero-norm direction");
    double p = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) p += x[i] * r[i];
    p /= n * n;
    std::vector<double> out(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] -= p * r[i];
    return out;
}

inline std::vector<double> ablate_vector(std::span<const double> x, const Direction& r) {
    return ablate_vector(x, r.vector);
}

enum class Sign { plus, minus };

// x ± α r̂
inline std::vector<double> add_scaled(std::span<const double> x, const Direction& r, double alpha, Sign sign) {
    if (x.size() != r.dim()) {
        throw ShapeError("add_scaled: dimension mismatch " + std::to_string(x.size()) + " vs " +
                         std::to_string(r.dim()));
    }
    if (!std::isfinite(alpha)) throw std::invalid_argument("add_scaled: alpha is not finite");
    const double n = norm2(r.vector);
    const double c = (sign == Sign::plus ? alpha : -alpha) / n;
    std::vector<double> out(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += c * r.vector[i];
    return out;
}

}  // namespace refgeo
