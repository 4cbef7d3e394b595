#pragma once

// Differentiable tensor operations. Every op validates shapes eagerly and
// throws DimensionError naming the offending shapes.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mkd/tensor.hpp"

namespace mkd {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap cmap(const Buffer& v, std::size_t r, std::size_t c) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MatMap mmap(Buffer& v, std::size_t r, std::size_t c) {
  return MatMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw DimensionError(std::string(op) + ": expected rank >= 1");
  return t.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

/// Matrix product of a[m x k] and b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  detail::mmap(out, m, n).noalias() = detail::cmap(a.raw()->data, m, k) * detail::cmap(b.raw()->data, k, n);
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result({m, n}, std::move(out), {a, b}, "matmul",
                             [pa, pb, m, k, n](detail::TensorImpl& self) {
                               auto g = detail::cmap(self.grad, m, n);
                               if (pa->requires_grad)
                                 detail::mmap(pa->ensure_grad(), m, k).noalias() +=
                                     g * detail::cmap(pb->data, k, n).transpose();
                               if (pb->requires_grad)
                                 detail::mmap(pb->ensure_grad(), k, n).noalias() +=
                                     detail::cmap(pa->data, m, k).transpose() * g;
                             });
}

/// x[..., in] * w[in x out] (+ bias[out]); leading dimensions are flattened.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  const std::size_t in = detail::last_dim(x, "linear");
  if (w.rank() != 2 || w.dim(0) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t out_dim = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Buffer out(rows * out_dim);
  auto o = detail::mmap(out, rows, out_dim);
  o.noalias() = detail::cmap(x.raw()->data, rows, in) * detail::cmap(w.raw()->data, in, out_dim);
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.raw()->data.data(), static_cast<Eigen::Index>(out_dim));
    o.rowwise() += bv;
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto px = x.impl(), pw = w.impl();
  auto pb = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(std::move(shape), std::move(out), std::move(inputs), "linear",
                             [px, pw, pb, rows, in, out_dim](detail::TensorImpl& self) {
                               auto g = detail::cmap(self.grad, rows, out_dim);
                               if (px->requires_grad)
                                 detail::mmap(px->ensure_grad(), rows, in).noalias() +=
                                     g * detail::cmap(pw->data, in, out_dim).transpose();
                               if (pw->requires_grad)
                                 detail::mmap(pw->ensure_grad(), in, out_dim).noalias() +=
                                     detail::cmap(px->data, rows, in).transpose() * g;
                               if (pb && pb->requires_grad) {
                                 Eigen::Map<Eigen::RowVectorXd> gb(pb->ensure_grad().data(),
                                                                   static_cast<Eigen::Index>(out_dim));
                                 gb += g.colwise().sum();
                               }
                             });
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.numel());
  const auto& x = a.raw()->data;
  const auto& y = b.raw()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result(a.shape(), std::move(out), {a, b}, "add", [pa, pb](detail::TensorImpl& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  const auto& x = a.raw()->data;
  const auto& y = b.raw()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result(a.shape(), std::move(out), {a, b}, "sub", [pa, pb](detail::TensorImpl& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  const auto& x = a.raw()->data;
  const auto& y = b.raw()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result(a.shape(), std::move(out), {a, b}, "mul", [pa, pb](detail::TensorImpl& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Buffer out(a.raw()->data);
  for (auto& v : out) v *= c;
  auto pa = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "scale", [pa, c](detail::TensorImpl& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

inline Tensor tanh(const Tensor& a) {
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.raw()->data[i]);
  auto pa = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "tanh", [pa](detail::TensorImpl& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  Buffer out(a.numel());
  const auto& x = a.raw()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  auto pa = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "gelu", [pa](detail::TensorImpl& self) {
    auto& g = pa->ensure_grad();
    const auto& xv = pa->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv[i] * xv[i]);
      g[i] += self.grad[i] * (cdf + xv[i] * pdf);
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto pa = a.impl();
  return detail::make_result(std::move(shape), a.raw()->data, {a}, "reshape", [pa](detail::TensorImpl& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Inverted dropout. Identity when !training or p == 0.
template <class Rng>
Tensor dropout(const Tensor& a, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  Buffer mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()->data[i] * mask[i];
  auto pa = a.impl();
  return detail::make_result(a.shape(), std::move(out), {a}, "dropout",
                             [pa, mask = std::move(mask)](detail::TensorImpl& self) {
                               auto& g = pa->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                             });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto pa = a.impl();
  return detail::make_result({}, {s}, {a}, "sum", [pa](detail::TensorImpl& self) {
    auto& g = pa->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Σ_i w_i v_i / n over a vector of per-sample values; weights are constants.
inline Tensor weighted_mean(const Tensor& values, std::span<const double> weights) {
  if (values.rank() != 1 || values.dim(0) != weights.size()) {
    throw DimensionError("weighted_mean: values " + shape_str(values.shape()) + " vs " +
                         std::to_string(weights.size()) + " weights");
  }
  const double n = static_cast<double>(weights.size());
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * values[i];
  auto pa = values.impl();
  Buffer w(weights.begin(), weights.end());
  return detail::make_result({}, {s / n}, {values}, "weighted_mean",
                             [pa, w = std::move(w), n](detail::TensorImpl& self) {
                               auto& g = pa->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i] / n;
                             });
}

// ---------------------------------------------------------------- indexing

/// Row gather: table[V x H], ids -> [ids.size() x H].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t v = table.dim(0), h = table.dim(1);
  Buffer out(ids.size() * h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(v) + " rows");
    }
    std::copy_n(table.raw()->data.begin() + static_cast<std::ptrdiff_t>(ids[r] * h), h,
                out.begin() + static_cast<std::ptrdiff_t>(r * h));
  }
  auto pt = table.impl();
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_result({ids.size(), h}, std::move(out), {table}, "embedding",
                             [pt, idx = std::move(idx), h](detail::TensorImpl& self) {
                               auto& g = pt->ensure_grad();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < h; ++j)
                                   g[static_cast<std::size_t>(idx[r]) * h + j] += self.grad[r * h + j];
                             });
}

/// x[B, N, H] -> x[:, 0, :]
inline Tensor first_token(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("first_token: expected [B,N,H], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), n = x.dim(1), h = x.dim(2);
  Buffer out(b * h);
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(x.raw()->data.begin() + static_cast<std::ptrdiff_t>(i * n * h), h,
                out.begin() + static_cast<std::ptrdiff_t>(i * h));
  auto px = x.impl();
  return detail::make_result({b, h}, std::move(out), {x}, "first_token", [px, b, n, h](detail::TensorImpl& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < h; ++j) g[i * n * h + j] += self.grad[i * h + j];
  });
}

// ---------------------------------------------------------------- normalization

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Buffer out(x.numel());
  const auto& in = x.raw()->data;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * len * inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) z += (out[base + j * inner] = std::exp(in[base + j * inner] - mx));
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  auto px = x.impl();
  return detail::make_result(s, std::move(out), {x}, "softmax",
                             [px, outer, inner, len](detail::TensorImpl& self) {
                               auto& g = px->ensure_grad();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t q = 0; q < inner; ++q) {
                                   const std::size_t base = o * len * inner + q;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < len; ++j)
                                     dot += self.grad[base + j * inner] * self.data[base + j * inner];
                                   for (std::size_t j = 0; j < len; ++j) {
                                     const std::size_t k = base + j * inner;
                                     g[k] += self.data[k] * (self.grad[k] - dot);
                                   }
                                 }
                               }
                             });
}

/// Log-softmax over the last axis.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t len = detail::last_dim(x, "log_softmax");
  const std::size_t rows = x.numel() / len;
  Buffer out(x.numel());
  const auto& in = x.raw()->data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = row[j] - lse;
  }
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), {x}, "log_softmax", [px, rows, len](detail::TensorImpl& self) {
    auto& g = px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < len; ++j) gs += self.grad[r * len + j];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t k = r * len + j;
        g[k] += self.grad[k] - std::exp(self.data[k]) * gs;
      }
    }
  });
}

/// Layer normalization over the last axis with affine gain/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t h = detail::last_dim(x, "layer_norm");
  if (gamma.shape() != Shape{h} || beta.shape() != Shape{h}) {
    throw DimensionError("layer_norm: gain/shift " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / h;
  Buffer out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto& in = x.raw()->data;
  const auto& gm = gamma.raw()->data;
  const auto& bt = beta.raw()->data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(h);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t k = r * h + j;
      xhat[k] = (row[j] - mu) * inv_std[r];
      out[k] = xhat[k] * gm[j] + bt[j];
    }
  }
  auto px = x.impl(), pg = gamma.impl(), pb = beta.impl();
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [px, pg, pb, rows, h, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::TensorImpl& self) {
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->ensure_grad();
          auto& gb = pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j) {
              gg[j] += self.grad[r * h + j] * xhat[r * h + j];
              gb[j] += self.grad[r * h + j];
            }
        }
        if (!px->requires_grad) return;
        auto& gx = px->ensure_grad();
        const auto& gm = pg->data;
        const double inv_h = 1.0 / static_cast<double>(h);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < h; ++j) {
            const double dxh = self.grad[r * h + j] * gm[j];
            s1 += dxh;
            s2 += dxh * xhat[r * h + j];
          }
          for (std::size_t j = 0; j < h; ++j) {
            const double dxh = self.grad[r * h + j] * gm[j];
            gx[r * h + j] += inv_std[r] * (dxh - inv_h * s1 - xhat[r * h + j] * inv_h * s2);
          }
        }
      });
}

// ---------------------------------------------------------------- attention

/// Scaled dot-product scores per head: q, k [B, N, H] (any shape holding
/// B*N rows of H) -> [B, A, N, N].
inline Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t seq,
                               std::size_t heads) {
  if (q.shape() != k.shape() || q.rank() < 2 || q.numel() != batch * seq * q.shape().back() ||
      q.shape().back() % heads != 0) {
    throw DimensionError("attention_scores: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         " inconsistent with batch=" + std::to_string(batch) + " seq=" + std::to_string(seq) +
                         " heads=" + std::to_string(heads));
  }
  const std::size_t h = q.shape().back(), dh = h / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Buffer out(batch * heads * seq * seq);
  const auto& qd = q.raw()->data;
  const auto& kd = k.raw()->data;
  using Stride = Eigen::OuterStride<>;
  using Blk = Eigen::Map<const detail::RowMat, 0, Stride>;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < heads; ++a) {
      Blk qb(qd.data() + b * seq * h + a * dh, seq, dh, Stride(h));
      Blk kb(kd.data() + b * seq * h + a * dh, seq, dh, Stride(h));
      Eigen::Map<detail::RowMat> ob(out.data() + (b * heads + a) * seq * seq, seq, seq);
      ob.noalias() = sc * (qb * kb.transpose());
    }
  auto pq = q.impl(), pk = k.impl();
  return detail::make_result(
      {batch, heads, seq, seq}, std::move(out), {q, k}, "attention_scores",
      [pq, pk, batch, seq, heads, h, dh, sc](detail::TensorImpl& self) {
        using MStride = Eigen::OuterStride<>;
        using MBlk = Eigen::Map<detail::RowMat, 0, MStride>;
        using CBlk = Eigen::Map<const detail::RowMat, 0, MStride>;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t a = 0; a < heads; ++a) {
            Eigen::Map<const detail::RowMat> g(self.grad.data() + (b * heads + a) * seq * seq, seq, seq);
            const std::size_t off = b * seq * h + a * dh;
            if (pq->requires_grad) {
              MBlk gq(pq->ensure_grad().data() + off, seq, dh, MStride(h));
              gq.noalias() += sc * (g * CBlk(pk->data.data() + off, seq, dh, MStride(h)));
            }
            if (pk->requires_grad) {
              MBlk gk(pk->ensure_grad().data() + off, seq, dh, MStride(h));
              gk.noalias() += sc * (g.transpose() * CBlk(pq->data.data() + off, seq, dh, MStride(h)));
            }
          }
      });
}

/// Softmax over the key axis of [B, A, N, N] scores; padded keys get exactly
/// zero probability. mask is [B*N] with 1 for real tokens.
inline Tensor masked_attention_softmax(const Tensor& scores, std::span<const int> mask) {
  if (scores.rank() != 4 || scores.dim(2) != scores.dim(3) || mask.size() != scores.dim(0) * scores.dim(2)) {
    throw DimensionError("masked_attention_softmax: scores " + shape_str(scores.shape()) + " vs mask of " +
                         std::to_string(mask.size()));
  }
  const std::size_t batch = scores.dim(0), heads = scores.dim(1), seq = scores.dim(2);
  Buffer out(scores.numel(), 0.0);
  const auto& in = scores.raw()->data;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < heads; ++a)
      for (std::size_t i = 0; i < seq; ++i) {
        const std::size_t base = ((b * heads + a) * seq + i) * seq;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j)
          if (mask[b * seq + j]) mx = std::max(mx, in[base + j]);
        if (!std::isfinite(mx)) continue;  // all keys padded
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j)
          if (mask[b * seq + j]) z += (out[base + j] = std::exp(in[base + j] - mx));
        for (std::size_t j = 0; j < seq; ++j) out[base + j] /= z;
      }
  auto ps = scores.impl();
  const std::size_t rows = batch * heads * seq;
  return detail::make_result(scores.shape(), std::move(out), {scores}, "masked_attention_softmax",
                             [ps, rows, seq](detail::TensorImpl& self) {
                               auto& g = ps->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const std::size_t base = r * seq;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < seq; ++j) dot += self.grad[base + j] * self.data[base + j];
                                 for (std::size_t j = 0; j < seq; ++j)
                                   g[base + j] += self.data[base + j] * (self.grad[base + j] - dot);
                               }
                             });
}

/// Weighted sum of values: probs [B, A, N, N], v [B, N, H] -> [B, N, H].
inline Tensor attention_context(const Tensor& probs, const Tensor& v) {
  if (probs.rank() != 4 || v.rank() < 2 || v.numel() != probs.dim(0) * probs.dim(2) * v.shape().back() ||
      v.shape().back() % probs.dim(1) != 0) {
    throw DimensionError("attention_context: probs " + shape_str(probs.shape()) + " vs values " + shape_str(v.shape()));
  }
  const std::size_t batch = probs.dim(0), heads = probs.dim(1), seq = probs.dim(2), h = v.shape().back(),
                    dh = h / heads;
  Buffer out(v.numel());
  using Stride = Eigen::OuterStride<>;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < heads; ++a) {
      Eigen::Map<const detail::RowMat> p(probs.raw()->data.data() + (b * heads + a) * seq * seq, seq, seq);
      const std::size_t off = b * seq * h + a * dh;
      Eigen::Map<const detail::RowMat, 0, Stride> vb(v.raw()->data.data() + off, seq, dh, Stride(h));
      Eigen::Map<detail::RowMat, 0, Stride> ob(out.data() + off, seq, dh, Stride(h));
      ob.noalias() = p * vb;
    }
  auto pp = probs.impl(), pv = v.impl();
  return detail::make_result(
      v.shape(), std::move(out), {probs, v}, "attention_context",
      [pp, pv, batch, heads, seq, h, dh](detail::TensorImpl& self) {
        using S = Eigen::OuterStride<>;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t a = 0; a < heads; ++a) {
            const std::size_t off = b * seq * h + a * dh;
            const std::size_t poff = (b * heads + a) * seq * seq;
            Eigen::Map<const detail::RowMat, 0, S> g(self.grad.data() + off, seq, dh, S(h));
            if (pp->requires_grad) {
              Eigen::Map<detail::RowMat> gp(pp->ensure_grad().data() + poff, seq, seq);
              gp.noalias() += g * Eigen::Map<const detail::RowMat, 0, S>(pv->data.data() + off, seq, dh, S(h)).transpose();
            }
            if (pv->requires_grad) {
              Eigen::Map<detail::RowMat, 0, S> gv(pv->ensure_grad().data() + off, seq, dh, S(h));
              gv.noalias() += Eigen::Map<const detail::RowMat>(pp->data.data() + poff, seq, seq).transpose() * g;
            }
          }
      });
}

// ---------------------------------------------------------------- pooling

/// Masked mean (or sum) over the token axis: x [B, N, H] -> [B, H].
inline Tensor masked_pool(const Tensor& x, std::span<const int> mask, bool mean_pool = true) {
  if (x.rank() != 3 || mask.size() != x.dim(0) * x.dim(1)) {
    throw DimensionError("pool: input " + shape_str(x.shape()) + " vs mask of " + std::to_string(mask.size()));
  }
  const std::size_t b = x.dim(0), n = x.dim(1), h = x.dim(2);
  Buffer coef(b * n, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t active = 0;
    for (std::size_t t = 0; t < n; ++t) active += mask[i * n + t] ? 1 : 0;
    if (active == 0) throw std::invalid_argument("pool: row " + std::to_string(i) + " is entirely padding");
    for (std::size_t t = 0; t < n; ++t)
      coef[i * n + t] = mask[i * n + t] ? (mean_pool ? 1.0 / static_cast<double>(active) : 1.0) : 0.0;
  }
  Buffer out(b * h, 0.0);
  const auto& in = x.raw()->data;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < n; ++t) {
      const double c = coef[i * n + t];
      if (c == 0.0) continue;
      for (std::size_t j = 0; j < h; ++j) out[i * h + j] += c * in[(i * n + t) * h + j];
    }
  auto px = x.impl();
  return detail::make_result({b, h}, std::move(out), {x}, "masked_pool",
                             [px, coef = std::move(coef), b, n, h](detail::TensorImpl& self) {
                               auto& g = px->ensure_grad();
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t t = 0; t < n; ++t) {
                                   const double c = coef[i * n + t];
                                   if (c == 0.0) continue;
                                   for (std::size_t j = 0; j < h; ++j) g[(i * n + t) * h + j] += c * self.grad[i * h + j];
                                 }
                             });
}

}  // namespace mkd
