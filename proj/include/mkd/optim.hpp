#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkd/tensor.hpp"

namespace mkd {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// Ordered, name-unique collection of parameters. Order is registration
/// order, which fixes checkpoint layout and optimizer iteration.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor t, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(t), trainable});
    return params_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }
  Parameter& at(const std::string& name) {
    return const_cast<Parameter&>(static_cast<const ParameterStore&>(*this).at(name));
  }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& p : params_) {
      p.trainable = on;
      p.tensor.set_requires_grad(on);
    }
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  /// Flat copy of every parameter value, in registration order.
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> s;
    s.reserve(params_.size());
    for (const auto& p : params_) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return s;
  }

  void restore(const std::vector<std::vector<double>>& s) {
    if (s.size() != params_.size()) throw std::invalid_argument("snapshot does not match parameter store");
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto dst = params_[i].tensor.mutable_data();
      if (dst.size() != s[i].size()) throw DimensionError("snapshot size mismatch for " + params_[i].name);
      std::copy(s[i].begin(), s[i].end(), dst.begin());
    }
  }

  bool all_finite() const {
    for (const auto& p : params_)
      for (double v : p.tensor.data())
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = nd(rng);
  return Tensor(std::move(shape), std::move(d));
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global grad-norm clip; 0 disables
};

/// Adam with bias correction. Moments are keyed by position in the parameter
/// list handed to step(); the list must be the same on every call.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::uint64_t steps() const { return step_; }

  void step(std::vector<Parameter*> params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->tensor.numel(), 0.0);
        v_.emplace_back(p->tensor.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed between steps");
    double scale_g = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto* p : params) {
        if (!p->trainable) continue;
        if (!p->tensor.has_grad()) throw std::runtime_error("Adam: parameter '" + p->name + "' has no gradient");
        for (double g : p->tensor.grad()) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale_g = cfg_.clip_norm / norm;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      if (!p.trainable) continue;
      if (!p.tensor.has_grad()) throw std::runtime_error("Adam: parameter '" + p.name + "' has no gradient");
      if (m_[i].size() != p.tensor.numel()) throw DimensionError("Adam: moment shape drift for " + p.name);
      auto w = p.tensor.mutable_data();
      auto g = p.tensor.mutable_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * scale_g;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        w[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        g[j] = 0.0;
      }
    }
  }

  void step(std::vector<Parameter>& params) {
    std::vector<Parameter*> ptrs;
    ptrs.reserve(params.size());
    for (auto& p : params) ptrs.push_back(&p);
    step(std::move(ptrs));
  }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace mkd
