#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "mkd/data.hpp"
#include "mkd/encoder.hpp"

namespace mkd {

inline constexpr std::size_t kEvalBatch = 64;

/// Eval-mode pass over rows in fixed order; `fn(batch, trace, offset)` sees
/// each chunk with `offset` the index of its first row.
template <class Fn>
void for_each_trace(const Encoder& model, std::span<const TokenizedExample> rows, Fn&& fn) {
  NoGradGuard ng;
  std::size_t off = 0;
  for (const auto& b : eval_batches(rows, kEvalBatch)) {
    const auto tr = model.encode(b);
    fn(b, tr, off);
    off += b.size;
  }
}

/// Pooled h(X) per row.
inline std::vector<std::vector<double>> pooled_vectors(const Encoder& model, std::span<const TokenizedExample> rows) {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  const std::size_t h = model.config().hidden_dim;
  for_each_trace(model, rows, [&](const Batch& b, const ForwardTrace& tr, std::size_t) {
    const auto p = tr.pooled.data();
    for (std::size_t i = 0; i < b.size; ++i) out.emplace_back(p.begin() + i * h, p.begin() + (i + 1) * h);
  });
  return out;
}

inline std::vector<std::vector<double>> softmax_rows(std::span<const double> logits, std::size_t cols, double temperature = 1.0) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r * cols < logits.size(); ++r) {
    std::vector<double> p(cols);
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, logits[r * cols + c] / temperature);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += p[c] = std::exp(logits[r * cols + c] / temperature - mx);
    for (auto& v : p) v /= z;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<std::vector<double>> predict_probs(const Encoder& model, std::span<const TokenizedExample> rows,
                                                      double temperature = 1.0) {
  std::vector<std::vector<double>> out;
  const std::size_t m = model.config().num_classes;
  for_each_trace(model, rows, [&](const Batch&, const ForwardTrace& tr, std::size_t) {
    for (auto& p : softmax_rows(tr.class_logits.data(), m, temperature)) out.push_back(std::move(p));
  });
  return out;
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double accuracy_of(const std::vector<std::vector<double>>& probs, std::span<const TokenizedExample> rows) {
  if (rows.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) hit += argmax(probs[i]) == rows[i].label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(rows.size());
}

inline double accuracy(const Encoder& model, std::span<const TokenizedExample> rows) {
  return accuracy_of(predict_probs(model, rows), rows);
}

}  // namespace mkd
