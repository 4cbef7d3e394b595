#pragma once

// Loss primitives. The *_rows variants return one value per sample so callers
// can apply instance weights before reducing.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkd/ops.hpp"

namespace mkd {

/// Per-row −log softmax(logits)[target]; logits [B x C].
inline Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " outside " +
                              std::to_string(c) + " classes");
    }
  }
  Tensor lsm = log_softmax(logits);
  Buffer out(b);
  for (std::size_t i = 0; i < b; ++i) out[i] = -lsm[i * c + static_cast<std::size_t>(targets[i])];
  auto pl = lsm.impl();
  std::vector<int> t(targets.begin(), targets.end());
  return detail::make_result({b}, std::move(out), {lsm}, "cross_entropy_rows",
                             [pl, t = std::move(t), c](detail::TensorImpl& self) {
                               auto& g = pl->ensure_grad();
                               for (std::size_t i = 0; i < t.size(); ++i)
                                 g[i * c + static_cast<std::size_t>(t[i])] -= self.grad[i];
                             });
}

inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  return mean(cross_entropy_rows(logits, targets));
}

/// Per-row −Σ_c p_c log softmax(logits)_c against constant target rows p [B x C].
inline Tensor soft_cross_entropy_rows(const Tensor& logits, std::span<const double> target_probs) {
  if (logits.rank() != 2 || logits.numel() != target_probs.size()) {
    throw DimensionError("soft_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(target_probs.size()) + " target entries");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += target_probs[i * c + j];
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::invalid_argument("soft_cross_entropy: target row " + std::to_string(i) + " sums to " +
                                  std::to_string(s));
    }
  }
  Tensor lsm = log_softmax(logits);
  Buffer out(b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] -= target_probs[i * c + j] * lsm[i * c + j];
  auto pl = lsm.impl();
  Buffer p(target_probs.begin(), target_probs.end());
  return detail::make_result({b}, std::move(out), {lsm}, "soft_cross_entropy_rows",
                             [pl, p = std::move(p), b, c](detail::TensorImpl& self) {
                               auto& g = pl->ensure_grad();
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j) g[i * c + j] -= self.grad[i] * p[i * c + j];
                             });
}

inline Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> target_probs) {
  return mean(soft_cross_entropy_rows(logits, target_probs));
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

/// Per-sample mean squared error over rows of a [B x D] pair -> [B].
inline Tensor row_mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "row_mse");
  if (a.rank() != 2) throw DimensionError("row_mse: expected [B x D], got " + shape_str(a.shape()));
  const std::size_t n = a.dim(0), d = a.dim(1);
  Buffer out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double e = a[i * d + j] - b[i * d + j];
      out[i] += e * e;
    }
    out[i] /= static_cast<double>(d);
  }
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result({n}, std::move(out), {a, b}, "row_mse", [pa, pb, n, d](detail::TensorImpl& self) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t k = i * d + j;
        const double gk = 2.0 * (pa->data[k] - pb->data[k]) / static_cast<double>(d) * self.grad[i];
        if (pa->requires_grad) pa->ensure_grad()[k] += gk;
        if (pb->requires_grad) pb->ensure_grad()[k] -= gk;
      }
  });
}

/// Per-sample MSE over non-padding token rows: a, b [B, N, D], mask [B*N] -> [B].
inline Tensor masked_token_mse(const Tensor& a, const Tensor& b, std::span<const int> mask) {
  detail::require_same_shape(a, b, "masked_token_mse");
  if (a.rank() != 3 || mask.size() != a.dim(0) * a.dim(1)) {
    throw DimensionError("masked_token_mse: input " + shape_str(a.shape()) + " vs mask of " +
                         std::to_string(mask.size()));
  }
  const std::size_t bsz = a.dim(0), n = a.dim(1), d = a.dim(2);
  Buffer denom(bsz, 0.0), out(bsz, 0.0);
  for (std::size_t i = 0; i < bsz; ++i) {
    std::size_t active = 0;
    for (std::size_t t = 0; t < n; ++t) active += mask[i * n + t] ? 1 : 0;
    denom[i] = static_cast<double>(std::max<std::size_t>(active, 1) * d);
    for (std::size_t t = 0; t < n; ++t) {
      if (!mask[i * n + t]) continue;
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t k = (i * n + t) * d + j;
        const double e = a[k] - b[k];
        out[i] += e * e;
      }
    }
    out[i] /= denom[i];
  }
  auto pa = a.impl(), pb = b.impl();
  std::vector<int> m(mask.begin(), mask.end());
  return detail::make_result({bsz}, std::move(out), {a, b}, "masked_token_mse",
                             [pa, pb, m = std::move(m), denom = std::move(denom), n, d](detail::TensorImpl& self) {
                               for (std::size_t i = 0; i < denom.size(); ++i)
                                 for (std::size_t t = 0; t < n; ++t) {
                                   if (!m[i * n + t]) continue;
                                   for (std::size_t j = 0; j < d; ++j) {
                                     const std::size_t k = (i * n + t) * d + j;
                                     const double gk = 2.0 * (pa->data[k] - pb->data[k]) / denom[i] * self.grad[i];
                                     if (pa->requires_grad) pa->ensure_grad()[k] += gk;
                                     if (pb->requires_grad) pb->ensure_grad()[k] -= gk;
                                   }
                                 }
                             });
}

/// Per-sample MSE between attention score maps [B, A, N, N] over (query, key)
/// pairs where both tokens are real, averaged over heads -> [B].
inline Tensor masked_attention_mse(const Tensor& a, const Tensor& b, std::span<const int> mask) {
  detail::require_same_shape(a, b, "masked_attention_mse");
  if (a.rank() != 4 || mask.size() != a.dim(0) * a.dim(2)) {
    throw DimensionError("masked_attention_mse: input " + shape_str(a.shape()) + " vs mask of " +
                         std::to_string(mask.size()));
  }
  const std::size_t bsz = a.dim(0), heads = a.dim(1), n = a.dim(2);
  Buffer denom(bsz), out(bsz, 0.0);
  for (std::size_t i = 0; i < bsz; ++i) {
    std::size_t active = 0;
    for (std::size_t t = 0; t < n; ++t) active += mask[i * n + t] ? 1 : 0;
    denom[i] = static_cast<double>(std::max<std::size_t>(active * active * heads, 1));
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < n; ++q) {
        if (!mask[i * n + q]) continue;
        for (std::size_t k = 0; k < n; ++k) {
          if (!mask[i * n + k]) continue;
          const std::size_t idx = ((i * heads + h) * n + q) * n + k;
          const double e = a[idx] - b[idx];
          out[i] += e * e;
        }
      }
    out[i] /= denom[i];
  }
  auto pa = a.impl(), pb = b.impl();
  std::vector<int> m(mask.begin(), mask.end());
  return detail::make_result(
      {bsz}, std::move(out), {a, b}, "masked_attention_mse",
      [pa, pb, m = std::move(m), denom = std::move(denom), heads, n](detail::TensorImpl& self) {
        for (std::size_t i = 0; i < denom.size(); ++i)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < n; ++q) {
              if (!m[i * n + q]) continue;
              for (std::size_t k = 0; k < n; ++k) {
                if (!m[i * n + k]) continue;
                const std::size_t idx = ((i * heads + h) * n + q) * n + k;
                const double gk = 2.0 * (pa->data[idx] - pb->data[idx]) / denom[i] * self.grad[i];
                if (pa->requires_grad) pa->ensure_grad()[idx] += gk;
                if (pb->requires_grad) pb->ensure_grad()[idx] -= gk;
              }
            }
      });
}

/// a·b / (‖a‖‖b‖), clamped to [−1, 1]; zero if either vector is zero.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Differentiable cosine similarity between two vectors -> scalar.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("cosine_similarity: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const double c = cosine_similarity(a.data(), b.data());
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result({}, {c}, {a, b}, "cosine_similarity", [pa, pb](detail::TensorImpl& self) {
    const auto& x = pa->data;
    const auto& y = pb->data;
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      dot += x[i] * y[i];
      nx += x[i] * x[i];
      ny += y[i] * y[i];
    }
    if (nx == 0.0 || ny == 0.0) return;
    const double ax = std::sqrt(nx), ay = std::sqrt(ny);
    const double c = dot / (ax * ay);
    if (c >= 1.0 || c <= -1.0) return;  // clamped region
    const double g = self.grad[0];
    if (pa->requires_grad) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * (y[i] / (ax * ay) - c * x[i] / nx);
    }
    if (pb->requires_grad) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) gb[i] += g * (x[i] / (ax * ay) - c * y[i] / ny);
    }
  });
}

}  // namespace mkd
