#pragma once

// Central-difference gradient checks shared by the unit suite and the
// acceptance binary. Each case builds fresh random inputs per trial; the
// output is reduced with a fixed random projection so every output entry
// contributes to the checked gradient.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mkd/mkd.hpp"

namespace gradcheck {

using mkd::Shape;
using mkd::Tensor;

struct Trial {
  std::vector<Tensor> inputs;  // leaves whose gradients are checked
  std::function<Tensor()> f;   // recomputes the op from the current input values
  std::size_t probes = 0;      // 0: every element; else a random subset of this size per input
};

struct Case {
  std::string name;
  std::function<Trial(std::mt19937_64&)> make;
};

struct Result {
  std::string name;
  std::size_t trials = 0;
  double worst = 0.0;
};

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;

inline Tensor uniform(Shape s, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(mkd::shape_numel(s));
  for (auto& v : d) v = u(rng);
  return Tensor(std::move(s), std::move(d), true);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<int> random_mask(std::mt19937_64& rng, std::size_t b, std::size_t n) {
  std::vector<int> m(b * n);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t len = pick(rng, 1, n);
    for (std::size_t t = 0; t < n; ++t) m[i * n + t] = t < len ? 1 : 0;
  }
  return m;
}

inline std::vector<double> random_probs(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> p(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += p[r * cols + c] = u(rng);
    for (std::size_t c = 0; c < cols; ++c) p[r * cols + c] /= z;
  }
  return p;
}

/// ‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-8) over the probed entries.
inline double check_trial(Trial& t, std::mt19937_64& rng) {
  const Tensor probe = t.f();
  std::vector<double> proj(probe.numel());
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : proj) v = u(rng);
  const Tensor r(probe.shape(), proj);
  auto loss = [&] { return mkd::sum(mkd::mul(t.f(), r)); };

  for (auto& x : t.inputs) x.drop_grad();
  loss().backward();

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  mkd::NoGradGuard ng;
  for (auto& x : t.inputs) {
    std::vector<std::size_t> idx(x.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (t.probes > 0 && t.probes < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(t.probes);
    }
    const bool has = x.has_grad();
    for (std::size_t i : idx) {
      auto d = x.mutable_data();
      const double orig = d[i];
      d[i] = orig + kStep;
      const double up = loss().item();
      d[i] = orig - kStep;
      const double down = loss().item();
      d[i] = orig;
      const double num = (up - down) / (2.0 * kStep);
      const double ana = has ? x.grad()[i] : 0.0;
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
    }
  }
  return std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-8);
}

inline Result run_case(const Case& c, std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ mkd::fnv1a(c.name));
  Result r{c.name, trials, 0.0};
  for (std::size_t i = 0; i < trials; ++i) {
    Trial t = c.make(rng);
    r.worst = std::max(r.worst, check_trial(t, rng));
  }
  return r;
}

inline mkd::Batch random_batch(std::mt19937_64& rng, std::size_t b, std::size_t n, std::size_t vocab, std::size_t classes,
                               std::size_t domains) {
  mkd::Batch batch;
  batch.size = b;
  batch.seq_len = n;
  batch.mask = random_mask(rng, b, n);
  for (std::size_t i = 0; i < b * n; ++i)
    batch.token_ids.push_back(batch.mask[i] ? static_cast<int>(pick(rng, mkd::kNumReserved, vocab - 1)) : mkd::kPadId);
  for (std::size_t i = 0; i < b; ++i) {
    batch.class_labels.push_back(static_cast<int>(pick(rng, 0, classes - 1)));
    batch.domain_labels.push_back(static_cast<int>(pick(rng, 0, domains - 1)));
    batch.corrupted_domain_labels.push_back(static_cast<int>(pick(rng, 0, domains - 1)));
    batch.ids.push_back("r" + std::to_string(i));
  }
  return batch;
}

inline mkd::EncoderConfig tiny_encoder(std::size_t layers = 1) {
  mkd::EncoderConfig c;
  c.vocab_size = 10;
  c.max_seq_len = 4;
  c.num_layers = layers;
  c.hidden_dim = 4;
  c.num_heads = 2;
  c.ffn_dim = 6;
  c.num_classes = 3;
  c.num_domains = 2;
  c.dropout = 0.0;
  return c;
}

/// Re-initialises every encoder parameter uniformly in [-2, 2] (scaled for
/// matrices so activations stay in the smooth range) and returns them as leaves.
inline std::vector<Tensor> randomize(mkd::Encoder& e, std::mt19937_64& rng) {
  std::vector<Tensor> out;
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (auto& p : e.params().all()) {
    const double s = p.tensor.rank() == 2 ? 0.5 : 1.0;
    for (auto& v : p.tensor.mutable_data()) v = s * u(rng);
    out.push_back(p.tensor);
  }
  return out;
}

inline std::vector<Case> all_cases() {
  std::vector<Case> cs;
  auto add = [&](std::string n, std::function<Trial(std::mt19937_64&)> f) { cs.push_back({std::move(n), std::move(f)}); };

  add("matmul", [](auto& g) {
    auto a = uniform({pick(g, 1, 4), pick(g, 1, 4)}, g);
    auto b = uniform({a.dim(1), pick(g, 1, 4)}, g);
    return Trial{{a, b}, [=] { return mkd::matmul(a, b); }};
  });
  add("linear", [](auto& g) {
    const std::size_t in = pick(g, 1, 4), out = pick(g, 1, 4);
    auto x = uniform({pick(g, 1, 3), pick(g, 1, 3), in}, g);
    auto w = uniform({in, out}, g);
    auto b = uniform({out}, g);
    return Trial{{x, w, b}, [=] { return mkd::linear(x, w, b); }};
  });
  add("add", [](auto& g) {
    Shape s{pick(g, 1, 4), pick(g, 1, 4)};
    auto a = uniform(s, g), b = uniform(s, g);
    return Trial{{a, b}, [=] { return mkd::add(a, b); }};
  });
  add("sub", [](auto& g) {
    Shape s{pick(g, 1, 4), pick(g, 1, 4)};
    auto a = uniform(s, g), b = uniform(s, g);
    return Trial{{a, b}, [=] { return mkd::sub(a, b); }};
  });
  add("mul", [](auto& g) {
    Shape s{pick(g, 1, 4), pick(g, 1, 4)};
    auto a = uniform(s, g), b = uniform(s, g);
    return Trial{{a, b}, [=] { return mkd::mul(a, b); }};
  });
  add("scale", [](auto& g) {
    auto a = uniform({pick(g, 1, 6)}, g);
    const double c = std::uniform_real_distribution<double>(-2, 2)(g);
    return Trial{{a}, [=] { return mkd::scale(a, c); }};
  });
  add("tanh", [](auto& g) {
    auto a = uniform({pick(g, 1, 8)}, g);
    return Trial{{a}, [=] { return mkd::tanh(a); }};
  });
  add("gelu", [](auto& g) {
    auto a = uniform({pick(g, 1, 8)}, g);
    return Trial{{a}, [=] { return mkd::gelu(a); }};
  });
  add("reshape", [](auto& g) {
    auto a = uniform({pick(g, 1, 3), 4}, g);
    return Trial{{a}, [=] { return mkd::reshape(a, {2, a.numel() / 2}); }};
  });
  add("dropout", [](auto& g) {
    auto a = uniform({pick(g, 2, 8)}, g);
    const std::uint64_t s = g();
    return Trial{{a}, [=] {
                   std::mt19937_64 r(s);
                   return mkd::dropout(a, 0.3, true, r);
                 }};
  });
  add("sum", [](auto& g) {
    auto a = uniform({pick(g, 1, 4), pick(g, 1, 4)}, g);
    return Trial{{a}, [=] { return mkd::sum(a); }};
  });
  add("mean", [](auto& g) {
    auto a = uniform({pick(g, 1, 4), pick(g, 1, 4)}, g);
    return Trial{{a}, [=] { return mkd::mean(a); }};
  });
  add("weighted_mean", [](auto& g) {
    auto a = uniform({pick(g, 1, 6)}, g);
    std::vector<double> w(a.numel());
    for (auto& v : w) v = std::uniform_real_distribution<double>(0, 2)(g);
    return Trial{{a}, [=] { return mkd::weighted_mean(a, w); }};
  });
  add("embedding", [](auto& g) {
    auto t = uniform({pick(g, 2, 5), pick(g, 1, 4)}, g);
    std::vector<int> ids(pick(g, 1, 6));
    for (auto& i : ids) i = static_cast<int>(pick(g, 0, t.dim(0) - 1));
    return Trial{{t}, [=] { return mkd::embedding(t, ids); }};
  });
  add("first_token", [](auto& g) {
    auto x = uniform({pick(g, 1, 3), pick(g, 1, 3), pick(g, 1, 3)}, g);
    return Trial{{x}, [=] { return mkd::first_token(x); }};
  });
  add("softmax", [](auto& g) {
    auto x = uniform({pick(g, 1, 3), pick(g, 1, 3), pick(g, 2, 4)}, g);
    const std::size_t axis = pick(g, 0, 2);
    return Trial{{x}, [=] { return mkd::softmax(x, axis); }};
  });
  add("log_softmax", [](auto& g) {
    auto x = uniform({pick(g, 1, 4), pick(g, 2, 5)}, g);
    return Trial{{x}, [=] { return mkd::log_softmax(x); }};
  });
  add("layer_norm", [](auto& g) {
    const std::size_t h = pick(g, 2, 5);
    auto x = uniform({pick(g, 1, 3), pick(g, 1, 3), h}, g);
    auto ga = uniform({h}, g), be = uniform({h}, g);
    return Trial{{x, ga, be}, [=] { return mkd::layer_norm(x, ga, be); }};
  });
  add("attention_scores", [](auto& g) {
    const std::size_t b = pick(g, 1, 2), n = pick(g, 1, 3), a = pick(g, 1, 2), h = a * pick(g, 1, 2);
    auto q = uniform({b, n, h}, g), k = uniform({b, n, h}, g);
    return Trial{{q, k}, [=] { return mkd::attention_scores(q, k, b, n, a); }};
  });
  add("masked_attention_softmax", [](auto& g) {
    const std::size_t b = pick(g, 1, 2), a = pick(g, 1, 2), n = pick(g, 1, 4);
    auto s = uniform({b, a, n, n}, g);
    const auto m = random_mask(g, b, n);
    return Trial{{s}, [=] { return mkd::masked_attention_softmax(s, m); }};
  });
  add("attention_context", [](auto& g) {
    const std::size_t b = pick(g, 1, 2), a = pick(g, 1, 2), n = pick(g, 1, 3), h = a * pick(g, 1, 2);
    auto p = uniform({b, a, n, n}, g), v = uniform({b, n, h}, g);
    return Trial{{p, v}, [=] { return mkd::attention_context(p, v); }};
  });
  add("masked_pool", [](auto& g) {
    const std::size_t b = pick(g, 1, 3), n = pick(g, 1, 4);
    auto x = uniform({b, n, pick(g, 1, 3)}, g);
    const auto m = random_mask(g, b, n);
    const bool mean_pool = pick(g, 0, 1) == 1;
    return Trial{{x}, [=] { return mkd::masked_pool(x, m, mean_pool); }};
  });
  add("cross_entropy_rows", [](auto& g) {
    auto x = uniform({pick(g, 1, 4), pick(g, 2, 4)}, g);
    std::vector<int> t(x.dim(0));
    for (auto& v : t) v = static_cast<int>(pick(g, 0, x.dim(1) - 1));
    return Trial{{x}, [=] { return mkd::cross_entropy_rows(x, t); }};
  });
  add("soft_cross_entropy_rows", [](auto& g) {
    auto x = uniform({pick(g, 1, 4), pick(g, 2, 4)}, g);
    const auto p = random_probs(g, x.dim(0), x.dim(1));
    return Trial{{x}, [=] { return mkd::soft_cross_entropy_rows(x, p); }};
  });
  add("mse", [](auto& g) {
    Shape s{pick(g, 1, 4), pick(g, 1, 4)};
    auto a = uniform(s, g), b = uniform(s, g);
    return Trial{{a, b}, [=] { return mkd::mse(a, b); }};
  });
  add("row_mse", [](auto& g) {
    Shape s{pick(g, 1, 4), pick(g, 1, 4)};
    auto a = uniform(s, g), b = uniform(s, g);
    return Trial{{a, b}, [=] { return mkd::row_mse(a, b); }};
  });
  add("masked_token_mse", [](auto& g) {
    const std::size_t b = pick(g, 1, 3), n = pick(g, 1, 3);
    Shape s{b, n, pick(g, 1, 3)};
    auto x = uniform(s, g), y = uniform(s, g);
    const auto m = random_mask(g, b, n);
    return Trial{{x, y}, [=] { return mkd::masked_token_mse(x, y, m); }};
  });
  add("masked_attention_mse", [](auto& g) {
    const std::size_t b = pick(g, 1, 2), n = pick(g, 1, 3);
    Shape s{b, pick(g, 1, 2), n, n};
    auto x = uniform(s, g), y = uniform(s, g);
    const auto m = random_mask(g, b, n);
    return Trial{{x, y}, [=] { return mkd::masked_attention_mse(x, y, m); }};
  });
  add("cosine_similarity", [](auto& g) {
    Shape s{pick(g, 2, 6)};
    auto a = uniform(s, g), b = uniform(s, g);
    return Trial{{a, b}, [=] { return mkd::cosine_similarity(a, b); }};
  });
  add("prediction_loss_rows", [](auto& g) {
    auto x = uniform({pick(g, 1, 4), pick(g, 2, 4)}, g);
    const auto p = random_probs(g, x.dim(0), x.dim(1));
    const double temp = std::uniform_real_distribution<double>(0.5, 4.0)(g);
    return Trial{{x}, [=] { return mkd::prediction_loss_rows(p, x, temp); }};
  });
  add("tk_loss", [](auto& g) {
    const std::size_t b = pick(g, 1, 3), ht = pick(g, 1, 4), hs = pick(g, 1, 4);
    auto t = uniform({b, ht}, g), s = uniform({b, hs}, g), w = uniform({ht, hs}, g);
    return Trial{{t, s, w}, [=] { return mkd::tk_loss(t, s, w); }};
  });
  add("domain_corruption_loss", [](auto& g) {
    const std::size_t b = pick(g, 2, 5), k = pick(g, 2, 4);
    auto x = uniform({b, k}, g);
    std::vector<int> d(b), z(b);
    for (std::size_t i = 0; i < b; ++i) {
      d[i] = static_cast<int>(pick(g, 0, k - 1));
      z[i] = static_cast<int>((static_cast<std::size_t>(d[i]) + pick(g, i == 0 ? 1 : 0, k - 1)) % k);
    }
    return Trial{{x}, [=] { return mkd::domain_corruption_loss(x, z, d).value; }};
  });
  add("encoder", [](auto& g) {
    auto e = std::make_shared<mkd::Encoder>(tiny_encoder(pick(g, 1, 2)), g());
    auto leaves = randomize(*e, g);
    const auto batch = random_batch(g, pick(g, 1, 3), pick(g, 1, 4), 10, 3, 2);
    const std::size_t out = pick(g, 0, 2);
    return Trial{leaves,
                 [e, batch, out] {
                   const auto tr = e->encode(batch);
                   if (out == 0) return tr.class_logits;
                   if (out == 1) return tr.domain_logits;
                   return tr.attention_scores.back();
                 },
                 6};
  });
  add("teacher_loss", [](auto& g) {
    auto e = std::make_shared<mkd::Encoder>(tiny_encoder(), g());
    auto leaves = randomize(*e, g);
    const auto batch = random_batch(g, pick(g, 2, 4), pick(g, 1, 4), 10, 3, 2);
    std::vector<double> t(batch.size);
    for (auto& v : t) v = std::uniform_real_distribution<double>(0.05, 1.0)(g);
    return Trial{leaves, [e, batch, t] { return mkd::teacher_loss(batch, e->encode(batch), t, 0.3); }, 6};
  });
  return cs;
}

}  // namespace gradcheck
