#pragma once

// Differentiable primitives. Reductions run left to right in a fixed order so
// repeated runs are bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "refgeo/tensor.hpp"

namespace refgeo {

namespace detail {

inline void require_2d(const Tensor& t, std::string_view op) {
    if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

enum class Broadcast { same, scalar, row };

// Right operand may be a scalar or a row vector matching the trailing extent.
inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (b.numel() == 1) return Broadcast::scalar;
    if (b.dim() == 1 && a.dim() == 2 && b.shape()[0] == a.shape()[1]) return Broadcast::row;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
}

inline std::size_t bindex(Broadcast k, std::size_t i, std::size_t cols) {
    switch (k) {
        case Broadcast::same: return i;
        case Broadcast::scalar: return 0;
        case Broadcast::row: return i % cols;
    }
    return i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k] x [k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> c(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return make_result({m, n}, std::move(c), "matmul", {a, b},
                       [m, k, n](const detail::Node& self, std::span<const double> g,
                                 std::span<std::vector<double>* const> gin) {
                           const double* A = self.inputs[0]->value.data();
                           const double* B = self.inputs[1]->value.data();
                           if (gin[0]) {
                               double* GA = gin[0]->data();
                               for (std::size_t i = 0; i < m; ++i) {
                                   const double* grow = g.data() + i * n;
                                   for (std::size_t p = 0; p < k; ++p) {
                                       const double* brow = B + p * n;
                                       double s = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                       GA[i * k + p] += s;
                                   }
                               }
                           }
                           if (gin[1]) {
                               double* GB = gin[1]->data();
                               for (std::size_t i = 0; i < m; ++i) {
                                   const double* grow = g.data() + i * n;
                                   for (std::size_t p = 0; p < k; ++p) {
                                       const double aip = A[i * k + p];
                                       double* gbrow = GB + p * n;
                                       for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                                   }
                               }
                           }
                       });
}

// [m,k] x [n,k]^T -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k) {
        throw ShapeError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    }
    std::vector<double> c(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
            c[i * n + j] = s;
        }
    }
    return make_result({m, n}, std::move(c), "matmul_nt", {a, b},
                       [m, k, n](const detail::Node& self, std::span<const double> g,
                                 std::span<std::vector<double>* const> gin) {
                           const double* A = self.inputs[0]->value.data();
                           const double* B = self.inputs[1]->value.data();
                           for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gij = g[i * n + j];
                                   if (gij == 0.0) continue;
                                   if (gin[0]) {
                                       double* ga = gin[0]->data() + i * k;
                                       for (std::size_t p = 0; p < k; ++p) ga[p] += gij * B[j * k + p];
                                   }
                                   if (gin[1]) {
                                       double* gb = gin[1]->data() + j * k;
                                       for (std::size_t p = 0; p < k; ++p) gb[p] += gij * A[i * k + p];
                                   }
                               }
                           }
                       });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return make_result({n, m}, std::move(out), "transpose", {a},
                       [m, n](const detail::Node&, std::span<const double> g,
                              std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                       });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    return make_result(std::move(shape), a.to_vector(), "reshape", {a},
                       [](const detail::Node&, std::span<const double> g,
                          std::span<std::vector<double>* const> gin) {
                           auto& ga = *gin[0];
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "add");
    const std::size_t cols = a.cols();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[detail::bindex(kind, i, cols)];
    return make_result(a.shape(), std::move(out), "add", {a, b},
                       [kind, cols](const detail::Node&, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                           if (gin[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           if (gin[1])
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   (*gin[1])[detail::bindex(kind, i, cols)] += g[i];
                       });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "sub");
    const std::size_t cols = a.cols();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[detail::bindex(kind, i, cols)];
    return make_result(a.shape(), std::move(out), "sub", {a, b},
                       [kind, cols](const detail::Node&, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                           if (gin[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           if (gin[1])
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   (*gin[1])[detail::bindex(kind, i, cols)] -= g[i];
                       });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "mul");
    const std::size_t cols = a.cols();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[detail::bindex(kind, i, cols)];
    return make_result(a.shape(), std::move(out), "mul", {a, b},
                       [kind, cols](const detail::Node& self, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                           const auto& A = self.inputs[0]->value;
                           const auto& B = self.inputs[1]->value;
                           if (gin[0])
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   (*gin[0])[i] += g[i] * B[detail::bindex(kind, i, cols)];
                           if (gin[1])
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   (*gin[1])[detail::bindex(kind, i, cols)] += g[i] * A[i];
                       });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "div");
    const std::size_t cols = a.cols();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[detail::bindex(kind, i, cols)];
    return make_result(a.shape(), std::move(out), "div", {a, b},
                       [kind, cols](const detail::Node& self, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                           const auto& B = self.inputs[1]->value;
                           const auto& Y = self.value;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               const std::size_t j = detail::bindex(kind, i, cols);
                               if (gin[0]) (*gin[0])[i] += g[i] / B[j];
                               if (gin[1]) (*gin[1])[j] -= g[i] * Y[i] / B[j];
                           }
                       });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
    return make_result(a.shape(), std::move(out), "scale", {a},
                       [c](const detail::Node&, std::span<const double> g,
                           std::span<std::vector<double>* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * c;
                       });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    return make_result(a.shape(), std::move(out), "relu", {a},
                       [](const detail::Node& self, std::span<const double> g,
                          std::span<std::vector<double>* const> gin) {
                           const auto& X = self.inputs[0]->value;
                           for (std::size_t i = 0; i < g.size(); ++i)
                               if (X[i] > 0.0) (*gin[0])[i] += g[i];
                       });
}

// tanh approximation of GELU
inline Tensor gelu(const Tensor& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    return make_result(a.shape(), std::move(out), "gelu", {a},
                       [](const detail::Node& self, std::span<const double> g,
                          std::span<std::vector<double>* const> gin) {
                           const auto& X = self.inputs[0]->value;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               const double x = X[i];
                               const double u = kC * (x + kA * x * x * x);
                               const double t = std::tanh(u);
                               const double du = kC * (1.0 + 3.0 * kA * x * x);
                               (*gin[0])[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                           }
                       });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({1}, {s}, "sum", {a},
                       [](const detail::Node&, std::span<const double> g,
                          std::span<std::vector<double>* const> gin) {
                           for (auto& v : *gin[0]) v += g[0];
                       });
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw ShapeError("dot: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return make_result({1}, {s}, "dot", {a, b},
                       [](const detail::Node& self, std::span<const double> g,
                          std::span<std::vector<double>* const> gin) {
                           const auto& A = self.inputs[0]->value;
                           const auto& B = self.inputs[1]->value;
                           if (gin[0])
                               for (std::size_t i = 0; i < A.size(); ++i) (*gin[0])[i] += g[0] * B[i];
                           if (gin[1])
                               for (std::size_t i = 0; i < A.size(); ++i) (*gin[1])[i] += g[0] * A[i];
                       });
}

inline Tensor l2norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    const double n = std::sqrt(s);
    return make_result({1}, {n}, "l2norm", {a},
                       [](const detail::Node& self, std::span<const double> g,
                          std::span<std::vector<double>* const> gin) {
                           const double n = self.value[0];
                           if (n == 0.0) return;
                           const auto& A = self.inputs[0]->value;
                           for (std::size_t i = 0; i < A.size(); ++i) (*gin[0])[i] += g[0] * A[i] / n;
                       });
}

// Row-wise L2 norms of a matrix, [m,n] -> [m].
inline Tensor row_norms(const Tensor& a) {
    detail::require_2d(a, "row_norms");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * a[i * n + j];
        out[i] = std::sqrt(s);
    }
    return make_result({m}, std::move(out), "row_norms", {a},
                       [m, n](const detail::Node& self, std::span<const double> g,
                              std::span<std::vector<double>* const> gin) {
                           const auto& A = self.inputs[0]->value;
                           for (std::size_t i = 0; i < m; ++i) {
                               const double r = self.value[i];
                               if (r == 0.0) continue;
                               for (std::size_t j = 0; j < n; ++j)
                                   (*gin[0])[i * n + j] += g[i] * A[i * n + j] / r;
                           }
                       });
}

// ---------------------------------------------------------------------------
// Normalizations

// Row-wise softmax. With causal=true, entry (i,j) for j>i is masked out.
inline Tensor softmax(const Tensor& a, bool causal = false) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.numel(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t lim = causal ? std::min(n, i + 1) : n;
        double mx = a[i * n];
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, a[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
            out[i * n + j] = std::exp(a[i * n + j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < lim; ++j) out[i * n + j] /= z;
    }
    return make_result(a.shape(), std::move(out), "softmax", {a},
                       [m, n](const detail::Node& self, std::span<const double> g,
                              std::span<std::vector<double>* const> gin) {
                           const auto& Y = self.value;
                           for (std::size_t i = 0; i < m; ++i) {
                               double s = 0.0;
                               for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * Y[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                   (*gin[0])[i * n + j] += Y[i * n + j] * (g[i * n + j] - s);
                           }
                       });
}

inline Tensor log_softmax(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(a[i * n + j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] - lz;
    }
    return make_result(a.shape(), std::move(out), "log_softmax", {a},
                       [m, n](const detail::Node& self, std::span<const double> g,
                              std::span<std::vector<double>* const> gin) {
                           const auto& Y = self.value;
                           for (std::size_t i = 0; i < m; ++i) {
                               double s = 0.0;
                               for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                   (*gin[0])[i * n + j] += g[i * n + j] - std::exp(Y[i * n + j]) * s;
                           }
                       });
}

// RMS normalization: x * gain / sqrt(mean(x^2) + eps), row-wise.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
    detail::require_2d(x, "rms_norm");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (gain.numel() != n) {
        throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
    }
    std::vector<double> out(m * n);
    std::vector<double> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
        inv[i] = 1.0 / std::sqrt(s / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * inv[i] * gain[j];
    }
    return make_result({m, n}, std::move(out), "rms_norm", {x, gain},
                       [m, n, inv = std::move(inv)](const detail::Node& self, std::span<const double> g,
                                                    std::span<std::vector<double>* const> gin) {
                           const auto& X = self.inputs[0]->value;
                           const auto& G = self.inputs[1]->value;
                           for (std::size_t i = 0; i < m; ++i) {
                               const double r = inv[i];
                               if (gin[1])
                                   for (std::size_t j = 0; j < n; ++j)
                                       (*gin[1])[j] += g[i * n + j] * X[i * n + j] * r;
                               if (gin[0]) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * G[j] * X[i * n + j];
                                   const double c = r * r * r * s / static_cast<double>(n);
                                   for (std::size_t j = 0; j < n; ++j)
                                       (*gin[0])[i * n + j] += g[i * n + j] * G[j] * r - X[i * n + j] * c;
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Indexing

// Rows of an embedding table, [V,d] x ids -> [len(ids), d].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
    detail::require_2d(table, "embedding");
    const std::size_t V = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= V) {
            throw ShapeError("embedding: id " + std::to_string(ids[t]) + " outside table " + shape_str(table.shape()));
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d, out.begin() + static_cast<std::ptrdiff_t>(t * d));
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_result({ids.size(), d}, std::move(out), "embedding", {table},
                       [d, idv = std::move(idv)](const detail::Node&, std::span<const double> g,
                                                 std::span<std::vector<double>* const> gin) {
                           for (std::size_t t = 0; t < idv.size(); ++t) {
                               double* row = gin[0]->data() + static_cast<std::size_t>(idv[t]) * d;
                               for (std::size_t j = 0; j < d; ++j) row[j] += g[t * d + j];
                           }
                       });
}

// Picks one column per row: out[i] = a[i, idx[i]].
inline Tensor gather(const Tensor& a, std::span<const int> idx) {
    detail::require_2d(a, "gather");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (idx.size() != m) {
        throw ShapeError("gather: " + std::to_string(idx.size()) + " indices for " + shape_str(a.shape()));
    }
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
            throw ShapeError("gather: index " + std::to_string(idx[i]) + " outside " + shape_str(a.shape()));
        }
        out[i] = a[i * n + static_cast<std::size_t>(idx[i])];
    }
    std::vector<int> iv(idx.begin(), idx.end());
    return make_result({m}, std::move(out), "gather", {a},
                       [n, iv = std::move(iv)](const detail::Node&, std::span<const double> g,
                                               std::span<std::vector<double>* const> gin) {
                           for (std::size_t i = 0; i < iv.size(); ++i)
                               (*gin[0])[i * n + static_cast<std::size_t>(iv[i])] += g[i];
                       });
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_2d(a, "slice_rows");
    const std::size_t n = a.shape()[1];
    if (begin > end || end > a.shape()[0]) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
    return make_result({end - begin, n}, std::move(out), "slice_rows", {a},
                       [begin, n](const detail::Node&, std::span<const double> g,
                                  std::span<std::vector<double>* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[begin * n + i] += g[i];
                       });
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_2d(a, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (begin > end || end > n) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(a.shape()));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * n + begin + j];
    return make_result({m, w}, std::move(out), "slice_cols", {a},
                       [m, n, w, begin](const detail::Node&, std::span<const double> g,
                                        std::span<std::vector<double>* const> gin) {
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < w; ++j) (*gin[0])[i * n + begin + j] += g[i * w + j];
                       });
}

// Row `r` of a matrix as a vector.
inline Tensor row(const Tensor& a, std::size_t r) { return reshape(slice_rows(a, r, r + 1), {a.cols()}); }

// Column-wise concatenation of equally tall matrices.
inline Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t m = parts[0].rows();
    std::vector<std::size_t> widths;
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat");
        if (p.rows() != m) {
            throw ShapeError("concat: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        widths.push_back(p.cols());
        n += p.cols();
    }
    std::vector<double> out(m * n);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out[i * n + off + j] = parts[k][i * widths[k] + j];
        off += widths[k];
    }
    return make_result({m, n}, std::move(out), "concat", parts,
                       [m, n, widths](const detail::Node&, std::span<const double> g,
                                      std::span<std::vector<double>* const> gin) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                               if (gin[k])
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < widths[k]; ++j)
                                           (*gin[k])[i * widths[k] + j] += g[i * n + off + j];
                               off += widths[k];
                           }
                       });
}

// Stacks equally long vectors as the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no inputs");
    const std::size_t n = rows[0].numel();
    std::vector<double> out;
    out.reserve(rows.size() * n);
    for (const auto& r : rows) {
        if (r.numel() != n) throw ShapeError("stack_rows: length mismatch " + shape_str(r.shape()));
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    return make_result({rows.size(), n}, std::move(out), "stack_rows", rows,
                       [n](const detail::Node&, std::span<const double> g,
                           std::span<std::vector<double>* const> gin) {
                           for (std::size_t k = 0; k < gin.size(); ++k)
                               if (gin[k])
                                   for (std::size_t j = 0; j < n; ++j) (*gin[k])[j] += g[k * n + j];
                       });
}

// ---------------------------------------------------------------------------
// Composite helpers

inline Tensor normalize(const Tensor& v) { return div(v, l2norm(v)); }

inline Tensor cosine(const Tensor& a, const Tensor& b) { return div(dot(a, b), mul(l2norm(a), l2norm(b))); }

// Row-wise cosine between every row of x [m,d] and vector v [d] -> [m].
inline Tensor row_cosines(const Tensor& x, const Tensor& v) {
    const auto proj = reshape(matmul(x, reshape(v, {v.numel(), 1})), {x.rows()});
    return div(div(proj, row_norms(x)), l2norm(v));
}

// Mean token cross-entropy of logits [m,V] against targets.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    return scale(sum(gather(log_softmax(logits), targets)), -1.0 / static_cast<double>(targets.size()));
}

}  // namespace refgeo
