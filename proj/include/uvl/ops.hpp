#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "uvl/rng.hpp"
#include "uvl/tensor.hpp"

namespace uvl {

// 1 = real position, 0 = padding.
using BoolVec = std::vector<std::uint8_t>;

enum class GeluKind { Exact, Tanh };

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

inline void check_matrix(const Tensor& a, const char* op) {
    if (a.ndim() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape));
}

inline void add_to(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    attach_node(out, {a, b}, [a, b](const Tensor& o) {
        if (a.requires_grad) detail::add_to(*a.grad, *o.grad);
        if (b.requires_grad) detail::add_to(*b.grad, *o.grad);
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    attach_node(out, {a, b}, [a, b](const Tensor& o) {
        const auto& g = *o.grad;
        if (a.requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) (*a.grad)[i] += g[i];
        if (b.requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) (*b.grad)[i] -= g[i];
    });
    return out;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    attach_node(out, {a, b}, [a, b](const Tensor& o) {
        const auto& g = *o.grad;
        if (a.requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) (*a.grad)[i] += g[i] * b.at(i);
        if (b.requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) (*b.grad)[i] += g[i] * a.at(i);
    });
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = s * a.at(i);
    attach_node(out, {a}, [a, s](const Tensor& o) {
        if (!a.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t i = 0; i < g.size(); ++i) (*a.grad)[i] += s * g[i];
    });
    return out;
}

// x [n x d] plus bias row b [d]. The one broadcast in the library.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    detail::check_matrix(x, "add_bias");
    if (b.ndim() != 1 || b.shape[0] != x.shape[1])
        throw ShapeError("add_bias: bias " + shape_str(b.shape) + " does not match columns of " +
                         shape_str(x.shape));
    const std::size_t n = x.shape[0], d = x.shape[1];
    Tensor out = Tensor::zeros(x.shape);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) + b.at(c);
    attach_node(out, {x, b}, [x, b, n, d](const Tensor& o) {
        const auto& g = *o.grad;
        if (x.requires_grad) detail::add_to(*x.grad, g);
        if (b.requires_grad)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) (*b.grad)[c] += g[r * d + c];
    });
    return out;
}

inline Tensor tanh_op(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = std::tanh(x.at(i));
    attach_node(out, {x}, [x](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        const auto& y = *o.data;
        for (std::size_t i = 0; i < g.size(); ++i) (*x.grad)[i] += g[i] * (1.0 - y[i] * y[i]);
    });
    return out;
}

/// x * Phi(x). Exact variant uses the normal CDF via erf; Tanh uses the
/// cubic tanh approximation. The variant in use is recorded in checkpoints.
inline Tensor gelu(const Tensor& x, GeluKind kind = GeluKind::Exact) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    static constexpr double kSqrt2OverPi = 0.7978845608028653559;
    static constexpr double kCubic = 0.044715;
    Tensor out = Tensor::zeros(x.shape);
    const std::size_t n = x.numel();
    if (kind == GeluKind::Exact) {
        for (std::size_t i = 0; i < n; ++i) {
            const double v = x.at(i);
            out.at(i) = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const double v = x.at(i);
            const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
            out.at(i) = 0.5 * v * (1.0 + std::tanh(u));
        }
    }
    attach_node(out, {x}, [x, kind](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x.at(i);
            double d;
            if (kind == GeluKind::Exact) {
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                d = cdf + v * pdf;
            } else {
                const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
                const double t = std::tanh(u);
                const double sech2 = 1.0 - t * t;
                d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
            }
            (*x.grad)[i] += g[i] * d;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul");
    detail::check_matrix(b, "matmul");
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    const std::size_t p = a.shape[0], q = a.shape[1], r = b.shape[1];
    Tensor out = Tensor::zeros({p, r});
    {
        detail::ECMap A(a.data->data(), static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q));
        detail::ECMap B(b.data->data(), static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(r));
        detail::EMap C(out.data->data(), static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r));
        C.noalias() = A * B;
    }
    attach_node(out, {a, b}, [a, b, p, q, r](const Tensor& o) {
        detail::ECMap G(o.grad->data(), static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r));
        if (a.requires_grad) {
            detail::ECMap B(b.data->data(), static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(r));
            detail::EMap dA(a.grad->data(), static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q));
            dA.noalias() += G * B.transpose();
        }
        if (b.requires_grad) {
            detail::ECMap A(a.data->data(), static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q));
            detail::EMap dB(b.grad->data(), static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(r));
            dB.noalias() += A.transpose() * G;
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::check_matrix(a, "transpose");
    const std::size_t n = a.shape[0], m = a.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.at(j, i) = a.at(i, j);
    attach_node(out, {a}, [a, n, m](const Tensor& o) {
        if (!a.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*a.grad)[i * m + j] += (*o.grad)[j * n + i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions and normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis`, max-subtracted for stability. Works on any rank.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.ndim())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape[i];
    for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.shape[i];
    const std::size_t k = x.shape[axis];
    Tensor out = Tensor::zeros(x.shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * k * inner + in;
            double mx = x.at(base);
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x.at(base + j * inner));
            double z = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const double e = std::exp(x.at(base + j * inner) - mx);
                out.at(base + j * inner) = e;
                z += e;
            }
            for (std::size_t j = 0; j < k; ++j) out.at(base + j * inner) /= z;
        }
    }
    attach_node(out, {x}, [x, outer, inner, k](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& y = *o.data;
        const auto& g = *o.grad;
        for (std::size_t ou = 0; ou < outer; ++ou) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = ou * k * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t idx = base + j * inner;
                    (*x.grad)[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
    return out;
}

/// Per-row standardization to zero mean / unit variance (population variance,
/// eps-regularized), then affine: gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
    detail::check_matrix(x, "layer_norm");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (gamma.ndim() != 1 || gamma.shape[0] != d || beta.ndim() != 1 || beta.shape[0] != d)
        throw ShapeError("layer_norm: gamma/beta must be [d], d=" + std::to_string(d));
    Tensor out = Tensor::zeros(x.shape);
    std::vector<double> inv_std(n), means(n);
    for (std::size_t r = 0; r < n; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += x.at(r, c);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double dv = x.at(r, c) - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        means[r] = mu;
        inv_std[r] = is;
        for (std::size_t c = 0; c < d; ++c)
            out.at(r, c) = gamma.at(c) * ((x.at(r, c) - mu) * is) + beta.at(c);
    }
    attach_node(out, {x, gamma, beta},
                [x, gamma, beta, n, d, means, inv_std](const Tensor& o) {
        const auto& g = *o.grad;
        for (std::size_t r = 0; r < n; ++r) {
            const double mu = means[r], is = inv_std[r];
            double mean_gg = 0.0, mean_ggx = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double xhat = (x.at(r, c) - mu) * is;
                const double gg = g[r * d + c] * gamma.at(c);
                mean_gg += gg;
                mean_ggx += gg * xhat;
                if (gamma.requires_grad) (*gamma.grad)[c] += g[r * d + c] * xhat;
                if (beta.requires_grad) (*beta.grad)[c] += g[r * d + c];
            }
            if (!x.requires_grad) continue;
            mean_gg /= static_cast<double>(d);
            mean_ggx /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
                const double xhat = (x.at(r, c) - mu) * is;
                const double gg = g[r * d + c] * gamma.at(c);
                (*x.grad)[r * d + c] += is * (gg - mean_gg - xhat * mean_ggx);
            }
        }
    });
    return out;
}

/// Mean negative log-softmax probability over positions whose target is not
/// ignore_index. logits [n x V], one target id per row.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            int ignore_index = -1) {
    detail::check_matrix(logits, "cross_entropy");
    const std::size_t n = logits.shape[0], V = logits.shape[1];
    if (targets.size() != n)
        throw ShapeError("cross_entropy: " + std::to_string(n) + " rows but " +
                         std::to_string(targets.size()) + " targets");
    std::size_t kept = 0;
    for (int t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= V)
            throw DataError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                            std::to_string(V) + ")");
        ++kept;
    }
    if (kept == 0) throw DataError("cross_entropy: every position is ignored, loss is undefined");
    double total = 0.0;
    std::vector<double> lses(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] == ignore_index) continue;
        double mx = logits.at(r, 0);
        for (std::size_t c = 1; c < V; ++c) mx = std::max(mx, logits.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < V; ++c) z += std::exp(logits.at(r, c) - mx);
        const double lse = mx + std::log(z);
        lses[r] = lse;
        total += lse - logits.at(r, static_cast<std::size_t>(targets[r]));
    }
    Tensor out = Tensor::scalar_of(total / static_cast<double>(kept));
    attach_node(out, {logits}, [logits, targets, ignore_index, n, V, kept, lses](const Tensor& o) {
        if (!logits.requires_grad) return;
        const double gscale = (*o.grad)[0] / static_cast<double>(kept);
        for (std::size_t r = 0; r < n; ++r) {
            if (targets[r] == ignore_index) continue;
            for (std::size_t c = 0; c < V; ++c) {
                const double p = std::exp(logits.at(r, c) - lses[r]);
                double dv = p;
                if (c == static_cast<std::size_t>(targets[r])) dv -= 1.0;
                (*logits.grad)[r * V + c] += gscale * dv;
            }
        }
    });
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) s += x.at(i);
    Tensor out = Tensor::scalar_of(s);
    attach_node(out, {x}, [x](const Tensor& o) {
        if (!x.requires_grad) return;
        const double g = (*o.grad)[0];
        for (std::size_t i = 0; i < x.numel(); ++i) (*x.grad)[i] += g;
    });
    return out;
}

// log(sum(exp(x))) over every element, max-subtracted.
inline Tensor logsumexp_all(const Tensor& x) {
    const std::size_t n = x.numel();
    if (n == 0) throw ShapeError("logsumexp_all: empty tensor");
    double mx = x.at(0);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x.at(i));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(x.at(i) - mx);
    const double lse = mx + std::log(z);
    Tensor out = Tensor::scalar_of(lse);
    attach_node(out, {x}, [x, lse](const Tensor& o) {
        if (!x.requires_grad) return;
        const double g = (*o.grad)[0];
        for (std::size_t i = 0; i < x.numel(); ++i) (*x.grad)[i] += g * std::exp(x.at(i) - lse);
    });
    return out;
}

/// Mean of rows with keep[i] != 0. x [n x d] -> [d].
inline Tensor mean_pool_rows(const Tensor& x, const BoolVec& keep) {
    detail::check_matrix(x, "mean_pool_rows");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (keep.size() != n)
        throw ShapeError("mean_pool_rows: mask length " + std::to_string(keep.size()) +
                         " vs rows " + std::to_string(n));
    std::size_t k = 0;
    for (auto b : keep) k += (b != 0);
    if (k == 0) throw DataError("mean_pool_rows: no rows selected, mean is undefined");
    Tensor out = Tensor::zeros({d});
    for (std::size_t r = 0; r < n; ++r) {
        if (!keep[r]) continue;
        for (std::size_t c = 0; c < d; ++c) out.at(c) += x.at(r, c);
    }
    const double inv = 1.0 / static_cast<double>(k);
    for (std::size_t c = 0; c < d; ++c) out.at(c) *= inv;
    attach_node(out, {x}, [x, keep, n, d, inv](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t r = 0; r < n; ++r) {
            if (!keep[r]) continue;
            for (std::size_t c = 0; c < d; ++c) (*x.grad)[r * d + c] += g[c] * inv;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// indexing, slicing, concatenation
// ---------------------------------------------------------------------------

/// Rows of an embedding table by token id. Gradient scatters into the table.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    detail::check_matrix(table, "embedding_lookup");
    const std::size_t V = table.shape[0], d = table.shape[1];
    Tensor out = Tensor::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
            throw DataError("embedding_lookup: id " + std::to_string(ids[i]) +
                            " outside vocabulary of size " + std::to_string(V));
        for (std::size_t c = 0; c < d; ++c) out.at(i, c) = table.at(static_cast<std::size_t>(ids[i]), c);
    }
    attach_node(out, {table}, [table, ids, d](const Tensor& o) {
        if (!table.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t c = 0; c < d; ++c)
                (*table.grad)[static_cast<std::size_t>(ids[i]) * d + c] += g[i * d + c];
    });
    return out;
}

// Select rows by index (axis 0); gradient scatter-adds.
inline Tensor index_select(const Tensor& x, const std::vector<std::size_t>& idx) {
    detail::check_matrix(x, "index_select");
    const std::size_t n = x.shape[0], d = x.shape[1];
    Tensor out = Tensor::zeros({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n)
            throw ShapeError("index_select: index " + std::to_string(idx[i]) + " >= rows " +
                             std::to_string(n));
        for (std::size_t c = 0; c < d; ++c) out.at(i, c) = x.at(idx[i], c);
    }
    attach_node(out, {x}, [x, idx, d](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) (*x.grad)[idx[i] * d + c] += g[i * d + c];
    });
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len) {
    detail::check_matrix(x, "slice_rows");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (start + len > n)
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of " + std::to_string(n) + " rows");
    Tensor out = Tensor::zeros({len, d});
    for (std::size_t r = 0; r < len; ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = x.at(start + r, c);
    attach_node(out, {x}, [x, start, len, d](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t r = 0; r < len; ++r)
            for (std::size_t c = 0; c < d; ++c) (*x.grad)[(start + r) * d + c] += g[r * d + c];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    detail::check_matrix(x, "slice_cols");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (start + len > d)
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of " + std::to_string(d) + " columns");
    Tensor out = Tensor::zeros({n, len});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < len; ++c) out.at(r, c) = x.at(r, start + c);
    attach_node(out, {x}, [x, start, len, n, d](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < len; ++c) (*x.grad)[r * d + start + c] += g[r * len + c];
    });
    return out;
}

/// Concatenate matrices along the sequence (row) axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
    const std::size_t d = parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        detail::check_matrix(p, "concat_rows");
        if (p.shape[1] != d)
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape) + " vs d=" +
                             std::to_string(d));
        total += p.shape[0];
    }
    Tensor out = Tensor::zeros({total, d});
    std::size_t row = 0;
    for (const Tensor& p : parts) {
        for (std::size_t r = 0; r < p.shape[0]; ++r)
            for (std::size_t c = 0; c < d; ++c) out.at(row + r, c) = p.at(r, c);
        row += p.shape[0];
    }
    attach_node(out, parts, [parts, d](const Tensor& o) {
        const auto& g = *o.grad;
        std::size_t row = 0;
        for (const Tensor& p : parts) {
            if (p.requires_grad)
                for (std::size_t r = 0; r < p.shape[0]; ++r)
                    for (std::size_t c = 0; c < d; ++c)
                        (*p.grad)[r * d + c] += g[(row + r) * d + c];
            row += p.shape[0];
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
    const std::size_t n = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        detail::check_matrix(p, "concat_cols");
        if (p.shape[0] != n)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape) + " vs n=" +
                             std::to_string(n));
        total += p.shape[1];
    }
    Tensor out = Tensor::zeros({n, total});
    std::size_t col = 0;
    for (const Tensor& p : parts) {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < p.shape[1]; ++c) out.at(r, col + c) = p.at(r, c);
        col += p.shape[1];
    }
    attach_node(out, parts, [parts, n, total](const Tensor& o) {
        const auto& g = *o.grad;
        std::size_t col = 0;
        for (const Tensor& p : parts) {
            const std::size_t w = p.shape[1];
            if (p.requires_grad)
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < w; ++c)
                        (*p.grad)[r * w + c] += g[r * total + col + c];
            col += w;
        }
    });
    return out;
}

// Stack 1-D vectors [d] into a matrix [k x d].
inline Tensor stack_rows(const std::vector<Tensor>& vecs) {
    if (vecs.empty()) throw ShapeError("stack_rows: nothing to stack");
    const std::size_t d = vecs[0].numel();
    for (const Tensor& v : vecs)
        if (v.ndim() != 1 || v.shape[0] != d)
            throw ShapeError("stack_rows: expected vectors of length " + std::to_string(d) +
                             ", got " + shape_str(v.shape));
    Tensor out = Tensor::zeros({vecs.size(), d});
    for (std::size_t r = 0; r < vecs.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = vecs[r].at(c);
    attach_node(out, vecs, [vecs, d](const Tensor& o) {
        const auto& g = *o.grad;
        for (std::size_t r = 0; r < vecs.size(); ++r)
            if (vecs[r].requires_grad)
                for (std::size_t c = 0; c < d; ++c) (*vecs[r].grad)[c] += g[r * d + c];
    });
    return out;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Inverted dropout with a deterministic seeded mask. Identity when train is
/// false or rate is zero; evaluation paths always pass train = false.
inline Tensor dropout(const Tensor& x, double rate, bool train, RngStream& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!train || rate == 0.0) return x;
    const std::size_t n = x.numel();
    auto mask = std::make_shared<std::vector<double>>(n);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
    Tensor out = Tensor::zeros(x.shape);
    for (std::size_t i = 0; i < n; ++i) out.at(i) = x.at(i) * (*mask)[i];
    attach_node(out, {x}, [x, mask](const Tensor& o) {
        if (!x.requires_grad) return;
        const auto& g = *o.grad;
        for (std::size_t i = 0; i < g.size(); ++i) (*x.grad)[i] += g[i] * (*mask)[i];
    });
    return out;
}

} // namespace uvl
