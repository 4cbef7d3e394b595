#pragma once

// Teacher -> student distillation: layer-mapped MSE on embeddings, hidden
// states and attention scores, softened prediction loss, the transferable
// knowledge term through a learned projection, per-example expertise
// weights, and the two-phase training loop (plus the multi-teacher variant
// whose prediction target is the mean of all teachers' distributions).

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mkd/data.hpp"
#include "mkd/encoder.hpp"
#include "mkd/eval.hpp"
#include "mkd/loss.hpp"
#include "mkd/meta_teacher.hpp"
#include "mkd/optim.hpp"

namespace mkd {

// ---------------------------------------------------------------- plan

using LayerMap = std::vector<std::pair<std::size_t, std::size_t>>;  // 1-based (teacher, student)

/// Uniform stride: student layer j takes teacher layer j * (L_T / L_S).
inline LayerMap map_layers(std::size_t teacher_layers, std::size_t student_layers) {
  if (student_layers < 1 || teacher_layers < student_layers) {
    throw std::invalid_argument("map_layers: need teacher layers >= student layers >= 1, got " + std::to_string(teacher_layers) +
                                " and " + std::to_string(student_layers));
  }
  if (teacher_layers % student_layers != 0) {
    std::string valid;
    for (std::size_t d = 1; d <= teacher_layers; ++d)
      if (teacher_layers % d == 0) valid += (valid.empty() ? "" : ", ") + std::to_string(d);
    throw std::invalid_argument("map_layers: " + std::to_string(teacher_layers) + " teacher layers do not divide into " +
                                std::to_string(student_layers) + "; valid student depths: " + valid);
  }
  const std::size_t stride = teacher_layers / student_layers;
  LayerMap m;
  for (std::size_t j = 1; j <= student_layers; ++j) m.emplace_back(j * stride, j);
  return m;
}

inline void validate_layer_map(const LayerMap& m, std::size_t teacher_layers, std::size_t student_layers) {
  if (m.size() != student_layers) throw std::invalid_argument("layer map must cover every student layer exactly once");
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto [t, s] = m[i];
    if (t < 1 || t > teacher_layers || s < 1 || s > student_layers) throw std::invalid_argument("layer map entry out of range");
    if (i > 0 && (t <= m[i - 1].first || s <= m[i - 1].second)) throw std::invalid_argument("layer map must be strictly increasing");
  }
}

enum class Weighting { none, expertise, seen_mean, seen_mean_gold };
enum class ErrorTerm { indicator, literal };

struct DistillPlan {
  LayerMap layer_map;
  double temperature = 1.0;
  double gamma2 = 0.2;
  bool use_embd = true;
  bool use_hidn = true;
  bool use_attn = true;
  bool use_tkd = true;
  Weighting weighting = Weighting::expertise;
  ErrorTerm error_term = ErrorTerm::indicator;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("DistillPlan: temperature must be > 0");
    if (gamma2 < 0.0) throw std::invalid_argument("DistillPlan: gamma2 must be >= 0");
  }

  /// Plain layer-wise KD with no weighting and no transferable-knowledge term.
  static DistillPlan tinybert(LayerMap m) {
    DistillPlan p;
    p.layer_map = std::move(m);
    p.use_tkd = false;
    p.gamma2 = 0.0;
    p.weighting = Weighting::none;
    return p;
  }
  static DistillPlan meta_distill(LayerMap m, double gamma2) {
    DistillPlan p;
    p.layer_map = std::move(m);
    p.gamma2 = gamma2;
    return p;
  }
};

struct DistillConfig {
  std::size_t int_epochs = 10;
  std::size_t pred_epochs = 3;
  double int_lr = 1e-3;
  double pred_lr = 1e-3;
  std::size_t int_batch = 32;
  std::size_t pred_batch = 32;
  std::size_t min_steps_per_phase = 0;  // epochs are raised until each phase reaches this many updates
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  bool select_on_dev = true;
};

inline const char* weighting_name(Weighting w) {
  switch (w) {
    case Weighting::none: return "none";
    case Weighting::expertise: return "expertise";
    case Weighting::seen_mean: return "seen_mean";
    case Weighting::seen_mean_gold: return "seen_mean_gold";
  }
  return "?";
}

inline void to_json(nlohmann::json& j, const DistillPlan& p) {
  nlohmann::json lm = nlohmann::json::array();
  for (const auto& [t, s] : p.layer_map) lm.push_back({t, s});
  j = {{"layer_map", lm},
       {"temperature", p.temperature},
       {"gamma2", p.gamma2},
       {"use_embd", p.use_embd},
       {"use_hidn", p.use_hidn},
       {"use_attn", p.use_attn},
       {"use_tkd", p.use_tkd},
       {"weighting", weighting_name(p.weighting)},
       {"error_term", p.error_term == ErrorTerm::indicator ? "indicator" : "literal"}};
}

inline void from_json(const nlohmann::json& j, DistillPlan& p) {
  const DistillPlan d = p;
  p.layer_map.clear();
  if (j.contains("layer_map"))
    for (const auto& e : j.at("layer_map")) p.layer_map.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
  else
    p.layer_map = d.layer_map;
  p.temperature = j.value("temperature", d.temperature);
  p.gamma2 = j.value("gamma2", d.gamma2);
  p.use_embd = j.value("use_embd", d.use_embd);
  p.use_hidn = j.value("use_hidn", d.use_hidn);
  p.use_attn = j.value("use_attn", d.use_attn);
  p.use_tkd = j.value("use_tkd", d.use_tkd);
  const auto w = j.value("weighting", std::string(weighting_name(d.weighting)));
  if (w == "none") p.weighting = Weighting::none;
  else if (w == "expertise") p.weighting = Weighting::expertise;
  else if (w == "seen_mean") p.weighting = Weighting::seen_mean;
  else if (w == "seen_mean_gold") p.weighting = Weighting::seen_mean_gold;
  else throw std::invalid_argument("weighting must be none|expertise|seen_mean|seen_mean_gold, got " + w);
  const auto e = j.value("error_term", std::string(d.error_term == ErrorTerm::indicator ? "indicator" : "literal"));
  if (e != "indicator" && e != "literal") throw std::invalid_argument("error_term must be indicator|literal, got " + e);
  p.error_term = e == "indicator" ? ErrorTerm::indicator : ErrorTerm::literal;
}

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"int_epochs", c.int_epochs}, {"pred_epochs", c.pred_epochs}, {"int_lr", c.int_lr},
       {"pred_lr", c.pred_lr},       {"int_batch", c.int_batch},     {"pred_batch", c.pred_batch},
       {"min_steps_per_phase", c.min_steps_per_phase},
       {"clip_norm", c.clip_norm},   {"seed", c.seed},               {"select_on_dev", c.select_on_dev}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  const DistillConfig d = c;
  c.int_epochs = j.value("int_epochs", d.int_epochs);
  c.pred_epochs = j.value("pred_epochs", d.pred_epochs);
  c.int_lr = j.value("int_lr", d.int_lr);
  c.pred_lr = j.value("pred_lr", d.pred_lr);
  c.int_batch = j.value("int_batch", d.int_batch);
  c.pred_batch = j.value("pred_batch", d.pred_batch);
  c.min_steps_per_phase = j.value("min_steps_per_phase", d.min_steps_per_phase);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
  c.select_on_dev = j.value("select_on_dev", d.select_on_dev);
}

// ---------------------------------------------------------------- projections

/// Learned maps from student width into teacher width (embeddings, hidden
/// states) and from teacher width into student width (transfer vector).
class Projections {
 public:
  Projections(std::size_t student_dim, std::size_t teacher_dim, std::size_t mapped_layers, std::uint64_t seed)
      : hs_(student_dim), ht_(teacher_dim) {
    std::mt19937_64 rng(seed);
    embed_ = store_.add("distill.proj.embed", normal_init({hs_, ht_}, 0.02, rng));
    for (std::size_t j = 0; j < mapped_layers; ++j)
      hidden_.push_back(store_.add("distill.proj.hidden" + std::to_string(j), normal_init({hs_, ht_}, 0.02, rng)));
    tk_ = store_.add("distill.proj.tk", normal_init({ht_, hs_}, 0.02, rng));
  }

  /// Identity maps; only meaningful when student and teacher widths agree.
  void set_identity() {
    if (hs_ != ht_) throw DimensionError("Projections::set_identity: widths " + std::to_string(hs_) + " and " + std::to_string(ht_));
    for (auto& p : store_.all()) {
      auto d = p.tensor.mutable_data();
      std::fill(d.begin(), d.end(), 0.0);
      for (std::size_t i = 0; i < hs_; ++i) d[i * hs_ + i] = 1.0;
    }
  }

  const Tensor& embed() const { return embed_; }
  const Tensor& hidden(std::size_t j) const { return hidden_.at(j); }
  const Tensor& tk() const { return tk_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

 private:
  std::size_t hs_, ht_;
  ParameterStore store_;
  Tensor embed_, tk_;
  std::vector<Tensor> hidden_;
};

// ---------------------------------------------------------------- teacher targets

/// Teacher-side quantities for one batch, detached from any graph.
/// hidden/attention are indexed by teacher layer (0-based); only mapped
/// layers need to be defined.
struct TeacherTargets {
  Tensor embedding_out;
  std::vector<Tensor> hidden;
  std::vector<Tensor> attention;
  Tensor class_logits;
  Tensor transfer_vec;
};

inline TeacherTargets targets_from_trace(const ForwardTrace& tr) {
  TeacherTargets t;
  t.embedding_out = tr.embedding_out.detach();
  for (const auto& h : tr.hidden_states) t.hidden.push_back(h.detach());
  for (const auto& a : tr.attention_scores) t.attention.push_back(a.detach());
  t.class_logits = tr.class_logits.detach();
  t.transfer_vec = tr.transfer_vec.detach();
  return t;
}

// ---------------------------------------------------------------- losses

struct IntermediateLosses {
  Tensor embd, hidn, attn;  // each [B], per-sample
};

inline IntermediateLosses intermediate_losses(const TeacherTargets& teacher, const ForwardTrace& student, std::span<const int> mask,
                                              const DistillPlan& plan, const Projections& proj) {
  const std::size_t b = student.batch;
  if (teacher.embedding_out.dim(0) != b || teacher.embedding_out.dim(1) != student.seq_len) {
    throw DimensionError("intermediate_losses: teacher targets " + shape_str(teacher.embedding_out.shape()) + " vs student batch " +
                         std::to_string(b) + "x" + std::to_string(student.seq_len));
  }
  IntermediateLosses out{Tensor::zeros({b}), Tensor::zeros({b}), Tensor::zeros({b})};
  if (plan.use_embd) out.embd = masked_token_mse(linear(student.embedding_out, proj.embed()), teacher.embedding_out, mask);
  for (std::size_t j = 0; j < plan.layer_map.size(); ++j) {
    const auto [tl, sl] = plan.layer_map[j];
    if (plan.use_hidn) {
      Tensor l = masked_token_mse(linear(student.hidden_states.at(sl - 1), proj.hidden(j)), teacher.hidden.at(tl - 1), mask);
      out.hidn = add(out.hidn, l);
    }
    if (plan.use_attn) {
      const Tensor& sa = student.attention_scores.at(sl - 1);
      const Tensor& ta = teacher.attention.at(tl - 1);
      if (sa.dim(1) != ta.dim(1)) {
        throw std::invalid_argument("intermediate_losses: student has " + std::to_string(sa.dim(1)) + " attention heads, teacher " +
                                    std::to_string(ta.dim(1)) + "; head counts must match");
      }
      out.attn = add(out.attn, masked_attention_mse(sa, ta, mask));
    }
  }
  return out;
}

/// Per-sample soft cross-entropy between softmax(teacher/T) and softmax(student/T).
inline Tensor prediction_loss_rows(std::span<const double> teacher_probs, const Tensor& student_logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("prediction_loss: temperature must be > 0");
  return soft_cross_entropy_rows(scale(student_logits, 1.0 / temperature), teacher_probs);
}

inline std::vector<double> softened(const Tensor& logits, double temperature) {
  std::vector<double> flat;
  for (auto& row : softmax_rows(logits.data(), logits.dim(1), temperature)) flat.insert(flat.end(), row.begin(), row.end());
  return flat;
}

inline Tensor prediction_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("prediction_loss: class counts differ " + shape_str(teacher_logits.shape()) + " vs " +
                         shape_str(student_logits.shape()));
  }
  return mean(prediction_loss_rows(softened(teacher_logits, temperature), student_logits, temperature));
}

/// Batch mean of ‖h_d^T W − h_d^S‖² / H_S.
inline Tensor tk_loss(const Tensor& teacher_vec, const Tensor& student_vec, const Tensor& w) {
  if (w.rank() != 2 || teacher_vec.dim(1) != w.dim(0)) {
    throw DimensionError("tk_loss: teacher vector " + shape_str(teacher_vec.shape()) + " vs projection " + shape_str(w.shape()));
  }
  if (student_vec.dim(1) != w.dim(1)) {
    throw DimensionError("tk_loss: projected width " + std::to_string(w.dim(1)) + " vs student width " + std::to_string(student_vec.dim(1)));
  }
  return mean(row_mse(linear(teacher_vec, w), student_vec));
}

/// λ = (1 + t) / (exp(err²) + 1).
inline double expertise_weight(double t, double err_sq) { return (1.0 + t) / (std::exp(err_sq) + 1.0); }

inline double error_term(int predicted, int label, ErrorTerm mode) {
  if (mode == ErrorTerm::indicator) return predicted == label ? 0.0 : 1.0;
  const double d = static_cast<double>(predicted - label);
  return d * d;
}

inline std::vector<double> expertise_weights(std::span<const double> teacher_logits, std::size_t num_classes, const Batch& batch,
                                             const PrototypeTable& table, ErrorTerm mode = ErrorTerm::indicator) {
  std::vector<double> w;
  for (std::size_t i = 0; i < batch.size; ++i) {
    if (batch.class_labels[i] == kHiddenLabel) throw std::invalid_argument("expertise_weights: example '" + batch.ids[i] + "' has no label");
    const int pred = argmax(teacher_logits.subspan(i * num_classes, num_classes));
    w.push_back(expertise_weight(table.score(batch.ids[i]), error_term(pred, batch.class_labels[i], mode)));
  }
  return w;
}

enum class Phase { intermediate, prediction };

/// Phase 1: mean_i λ_i (embd + hidn + attn)_i + γ₂ L_tkd.
/// Phase 2: mean_i λ_i pred_i.
inline Tensor meta_distill_loss(const Batch& batch, const TeacherTargets& teacher, const ForwardTrace& student, const DistillPlan& plan,
                                const Projections& proj, std::span<const double> weights, Phase phase,
                                std::span<const double> prediction_target = {}) {
  if (weights.size() != batch.size) throw std::invalid_argument("meta_distill_loss: one weight per example required");
  if (phase == Phase::prediction) {
    const auto target = prediction_target.empty() ? softened(teacher.class_logits, plan.temperature)
                                                   : std::vector<double>(prediction_target.begin(), prediction_target.end());
    return weighted_mean(prediction_loss_rows(target, student.class_logits, plan.temperature), weights);
  }
  auto il = intermediate_losses(teacher, student, batch.mask, plan, proj);
  Tensor loss = weighted_mean(add(add(il.embd, il.hidn), il.attn), weights);
  if (plan.use_tkd && plan.gamma2 > 0.0) loss = add(loss, scale(tk_loss(teacher.transfer_vec, student.transfer_vec, proj.tk()), plan.gamma2));
  return loss;
}

// ---------------------------------------------------------------- teacher cache

/// A frozen teacher plus how to feed it rows of the distillation domain.
struct TeacherRef {
  const Encoder* model = nullptr;
  const PrototypeTable* table = nullptr;
  /// Teacher-local index of the distillation domain; empty when the teacher
  /// never saw it (its domain embedding is then the mean of known rows).
  std::optional<std::size_t> local_domain;
};

/// Per-example teacher outputs computed once in eval mode. Rows of a batch are
/// later padded back together; padding cells are never read by the masked
/// losses so the cache is exact.
class TeacherCache {
 public:
  TeacherCache(const TeacherRef& ref, std::span<const TokenizedExample> rows, const LayerMap& map, bool keep_intermediate)
      : cfg_(ref.model->config()) {
    for (const auto& [t, s] : map) mapped_.push_back(t - 1);
    const std::size_t h = cfg_.hidden_dim, a = cfg_.num_heads;
    const DomainSubnet& net = ref.model->subnet();
    std::vector<double> e(h, 0.0);
    const std::size_t kk = net.domain_embedding.dim(0);
    const auto emb = net.domain_embedding.data();
    if (ref.local_domain) {
      if (*ref.local_domain >= kk) throw std::out_of_range("TeacherCache: teacher knows " + std::to_string(kk) + " domains");
      std::copy_n(emb.begin() + static_cast<std::ptrdiff_t>(*ref.local_domain * h), h, e.begin());
    } else {
      for (std::size_t k = 0; k < kk; ++k)
        for (std::size_t j = 0; j < h; ++j) e[j] += emb[k * h + j] / static_cast<double>(kk);
    }
    std::vector<TokenizedExample> local(rows.begin(), rows.end());
    for (auto& r : local) r.domain = 0;
    for_each_trace(*ref.model, local, [&](const Batch& b, const ForwardTrace& tr, std::size_t off) {
      const std::size_t n = b.seq_len, m = cfg_.num_classes;
      for (std::size_t i = 0; i < b.size; ++i) {
        Entry en;
        std::size_t len = 0;
        for (std::size_t t = 0; t < n; ++t) len += b.mask[i * n + t] ? 1 : 0;
        en.len = len;
        auto tok_slice = [&](const Tensor& x) {
          return std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(i * n * h),
                                     x.data().begin() + static_cast<std::ptrdiff_t>((i * n + len) * h));
        };
        if (keep_intermediate) {
          en.emb = tok_slice(tr.embedding_out);
          for (std::size_t l : mapped_) {
            en.hidden.push_back(tok_slice(tr.hidden_states.at(l)));
            std::vector<double> at(a * len * len);
            const auto src = tr.attention_scores.at(l).data();
            for (std::size_t hh = 0; hh < a; ++hh)
              for (std::size_t q = 0; q < len; ++q)
                for (std::size_t k = 0; k < len; ++k) at[(hh * len + q) * len + k] = src[((i * a + hh) * n + q) * n + k];
            en.attn.push_back(std::move(at));
          }
        }
        en.logits.assign(tr.class_logits.data().begin() + static_cast<std::ptrdiff_t>(i * m),
                         tr.class_logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
        // transfer vector recomputed with the chosen domain embedding row
        const auto pooled = tr.pooled.data().subspan(i * h, h);
        const auto w = net.weight.data();
        const auto bias = net.bias.data();
        en.transfer.assign(h, 0.0);
        for (std::size_t c = 0; c < h; ++c) {
          double s = bias[c];
          for (std::size_t r = 0; r < h; ++r) s += (pooled[r] + e[r]) * w[r * h + c];
          en.transfer[c] = std::tanh(s);
        }
        index_.emplace(local[off + i].id, entries_.size());
        entries_.push_back(std::move(en));
      }
    });
  }

  std::size_t num_classes() const { return cfg_.num_classes; }

  std::span<const double> logits(const std::string& id) const { return at(id).logits; }

  TeacherTargets targets(const Batch& b) const {
    const std::size_t n = b.seq_len, h = cfg_.hidden_dim, a = cfg_.num_heads, m = cfg_.num_classes;
    TeacherTargets t;
    std::vector<double> emb(b.size * n * h, 0.0), logits(b.size * m), transfer(b.size * h);
    std::vector<std::vector<double>> hid(mapped_.size(), std::vector<double>(b.size * n * h, 0.0));
    std::vector<std::vector<double>> att(mapped_.size(), std::vector<double>(b.size * a * n * n, 0.0));
    for (std::size_t i = 0; i < b.size; ++i) {
      const Entry& en = at(b.ids[i]);
      if (en.len > n) throw DimensionError("TeacherCache: cached row longer than batch");
      std::copy(en.logits.begin(), en.logits.end(), logits.begin() + static_cast<std::ptrdiff_t>(i * m));
      std::copy(en.transfer.begin(), en.transfer.end(), transfer.begin() + static_cast<std::ptrdiff_t>(i * h));
      if (en.emb.empty()) continue;
      std::copy(en.emb.begin(), en.emb.end(), emb.begin() + static_cast<std::ptrdiff_t>(i * n * h));
      for (std::size_t j = 0; j < mapped_.size(); ++j) {
        std::copy(en.hidden[j].begin(), en.hidden[j].end(), hid[j].begin() + static_cast<std::ptrdiff_t>(i * n * h));
        for (std::size_t hh = 0; hh < a; ++hh)
          for (std::size_t q = 0; q < en.len; ++q)
            for (std::size_t k = 0; k < en.len; ++k) att[j][((i * a + hh) * n + q) * n + k] = en.attn[j][(hh * en.len + q) * en.len + k];
      }
    }
    t.embedding_out = Tensor({b.size, n, h}, std::move(emb));
    t.hidden.resize(cfg_.num_layers);
    t.attention.resize(cfg_.num_layers);
    for (std::size_t j = 0; j < mapped_.size(); ++j) {
      t.hidden[mapped_[j]] = Tensor({b.size, n, h}, std::move(hid[j]));
      t.attention[mapped_[j]] = Tensor({b.size, a, n, n}, std::move(att[j]));
    }
    t.class_logits = Tensor({b.size, m}, std::move(logits));
    t.transfer_vec = Tensor({b.size, h}, std::move(transfer));
    return t;
  }

 private:
  struct Entry {
    std::size_t len = 0;
    std::vector<double> emb;
    std::vector<std::vector<double>> hidden, attn;
    std::vector<double> logits, transfer;
  };

  const Entry& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("teacher cache has no example '" + id + "'");
    return entries_[it->second];
  }

  EncoderConfig cfg_;
  std::vector<std::size_t> mapped_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------- training

struct DistillEpoch {
  std::string phase;
  std::size_t epoch = 0;
  double loss = 0.0;
  double dev_accuracy = -1.0;  // -1 when not measured
};

inline void to_json(nlohmann::json& j, const DistillEpoch& e) {
  j = {{"phase", e.phase}, {"epoch", e.epoch}, {"loss", e.loss}, {"dev_accuracy", e.dev_accuracy}};
}

struct DistillResult {
  Encoder student;
  std::vector<DistillEpoch> history;
  std::size_t best_epoch = 0;
  std::vector<double> teacher_agreement;  // MTN-KD: per teacher, argmax agreement with the mean target
};

namespace detail {

inline std::size_t phase_epochs(std::size_t base, std::size_t rows, std::size_t batch, std::size_t min_steps) {
  if (min_steps == 0) return base;
  const std::size_t per_epoch = (rows + batch - 1) / batch;
  return std::max(base, (min_steps + per_epoch - 1) / per_epoch);
}

}  // namespace detail

/// Two-phase distillation of `student` on single-domain `train` rows.
/// `prediction_teachers`, when non-empty, replace the phase-2 target by the
/// mean of their softened distributions (multi-teacher mode). `dev` rows,
/// when given, pick the best phase-2 epoch by accuracy.
inline DistillResult distill(const TeacherRef& teacher, Encoder student, std::span<const TokenizedExample> train,
                             std::span<const TokenizedExample> dev, const DistillPlan& plan, const DistillConfig& cfg,
                             std::span<const TeacherRef> prediction_teachers = {}) {
  plan.validate();
  if (!teacher.model) throw std::invalid_argument("distill: no teacher");
  if (train.empty()) throw std::invalid_argument("distill: empty distillation set");
  const auto& tc = teacher.model->config();
  const auto& sc = student.config();
  validate_layer_map(plan.layer_map, tc.num_layers, sc.num_layers);
  if (tc.num_classes != sc.num_classes) throw std::invalid_argument("distill: teacher and student class counts differ");
  if (tc.num_heads != sc.num_heads && plan.use_attn) throw std::invalid_argument("distill: attention distillation needs equal head counts");
  for (const auto& r : train)
    if (r.domain != train.front().domain) throw std::invalid_argument("distill: distillation set spans several domains");
  if (plan.weighting == Weighting::expertise && !teacher.table) throw std::invalid_argument("distill: expertise weighting needs a prototype table");

  const TeacherCache cache(teacher, train, plan.layer_map, true);
  std::vector<double> mean_target;  // multi-teacher phase-2 target, keyed by row order in `train`
  std::unordered_map<std::string, std::size_t> row_of;
  std::vector<double> agreement;
  if (!prediction_teachers.empty()) {
    const std::size_t m = tc.num_classes;
    mean_target.assign(train.size() * m, 0.0);
    std::vector<std::vector<int>> argmaxes;
    for (const auto& pt : prediction_teachers) {
      if (pt.model->config().num_classes != m) throw std::invalid_argument("distill: teachers disagree on class count");
      const TeacherCache pc(pt, train, plan.layer_map, false);
      std::vector<int> am;
      for (std::size_t i = 0; i < train.size(); ++i) {
        const auto lg = pc.logits(train[i].id);
        auto p = softmax_rows(lg, m, plan.temperature).front();
        am.push_back(argmax(p));
        for (std::size_t c = 0; c < m; ++c) mean_target[i * m + c] += p[c] / static_cast<double>(prediction_teachers.size());
      }
      argmaxes.push_back(std::move(am));
    }
    for (const auto& am : argmaxes) {
      std::size_t agree = 0;
      for (std::size_t i = 0; i < train.size(); ++i)
        agree += am[i] == argmax(std::span<const double>(mean_target).subspan(i * m, m)) ? 1 : 0;
      agreement.push_back(static_cast<double>(agree) / static_cast<double>(train.size()));
    }
    for (std::size_t i = 0; i < train.size(); ++i) row_of.emplace(train[i].id, i);
  }

  const bool seen = plan.weighting == Weighting::seen_mean || plan.weighting == Weighting::seen_mean_gold;
  if (seen && !teacher.table) throw std::invalid_argument("distill: seen-domain weighting needs a prototype table");
  const double t_bar = seen ? teacher.table->mean_score() : 0.0;
  auto weights_for = [&](const Batch& b) {
    switch (plan.weighting) {
      case Weighting::none: return std::vector<double>(b.size, 1.0);
      // unseen domain: t is replaced by the mean seen-domain score and, with no
      // gold labels, the teacher is taken as correct
      case Weighting::seen_mean: return std::vector<double>(b.size, expertise_weight(t_bar, 0.0));
      case Weighting::seen_mean_gold: {
        std::vector<double> w;
        for (std::size_t i = 0; i < b.size; ++i) {
          if (b.class_labels[i] == kHiddenLabel) throw std::invalid_argument("distill: seen_mean_gold weighting needs labels");
          const int pred = argmax(cache.logits(b.ids[i]));
          w.push_back(expertise_weight(t_bar, error_term(pred, b.class_labels[i], plan.error_term)));
        }
        return w;
      }
      case Weighting::expertise: {
        std::vector<double> lg;
        for (const auto& id : b.ids) {
          const auto l = cache.logits(id);
          lg.insert(lg.end(), l.begin(), l.end());
        }
        return expertise_weights(lg, tc.num_classes, b, *teacher.table, plan.error_term);
      }
    }
    return std::vector<double>(b.size, 1.0);
  };

  Projections proj(sc.hidden_dim, tc.hidden_dim, plan.layer_map.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
  DistillResult res{std::move(student), {}, 0, agreement};

  std::vector<Parameter*> p1;
  for (auto& p : res.student.params().all()) p1.push_back(&p);
  for (auto& p : proj.params().all()) p1.push_back(&p);
  std::vector<Parameter*> p2;
  for (auto& p : res.student.params().all()) p2.push_back(&p);

  auto run_phase = [&](Phase phase, std::size_t epochs, double lr, std::size_t batch, std::vector<Parameter*>& params) {
    AdamConfig ac;
    ac.lr = lr;
    ac.clip_norm = cfg.clip_norm;
    Adam opt(ac);
    std::vector<std::vector<double>> best;
    double best_dev = -1.0;
    const bool select = phase == Phase::prediction && cfg.select_on_dev && !dev.empty();
    const char* name = phase == Phase::intermediate ? "intermediate" : "prediction";
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
      double loss_sum = 0.0;
      std::size_t step = 0;
      for (const auto& b : make_batches(train, batch, rng, BatchMode::mixed, false)) {
        detail::zero_param_grads(params);
        const auto tt = cache.targets(b);
        const auto st = res.student.encode(b, true, &rng);
        std::vector<double> tgt;
        if (!mean_target.empty() && phase == Phase::prediction) {
          const std::size_t m = tc.num_classes;
          for (const auto& id : b.ids) {
            const std::size_t i = row_of.at(id);
            tgt.insert(tgt.end(), mean_target.begin() + static_cast<std::ptrdiff_t>(i * m),
                       mean_target.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
          }
        }
        Tensor loss = meta_distill_loss(b, tt, st, plan, proj, weights_for(b), phase, tgt);
        detail::check_finite(loss.item(), std::string("distill/") + name, epoch, step);
        loss.backward();
        opt.step(params);
        loss_sum += loss.item() * static_cast<double>(b.size);
        ++step;
      }
      if (!res.student.params().all_finite()) throw TrainingDiverged("student parameters became non-finite");
      DistillEpoch de{name, epoch, loss_sum / static_cast<double>(train.size()), -1.0};
      if (select) {
        de.dev_accuracy = accuracy(res.student, dev);
        if (de.dev_accuracy > best_dev) {
          best_dev = de.dev_accuracy;
          best = res.student.params().snapshot();
          res.best_epoch = epoch;
        }
      }
      res.history.push_back(de);
    }
    if (select) res.student.params().restore(best);
    else if (phase == Phase::prediction) res.best_epoch = epochs;
  };

  const bool any_intermediate = plan.use_embd || plan.use_hidn || plan.use_attn || (plan.use_tkd && plan.gamma2 > 0.0);
  if (any_intermediate && cfg.int_epochs > 0)
    run_phase(Phase::intermediate, detail::phase_epochs(cfg.int_epochs, train.size(), cfg.int_batch, cfg.min_steps_per_phase), cfg.int_lr,
              cfg.int_batch, p1);
  if (cfg.pred_epochs > 0)
    run_phase(Phase::prediction, detail::phase_epochs(cfg.pred_epochs, train.size(), cfg.pred_batch, cfg.min_steps_per_phase), cfg.pred_lr,
              cfg.pred_batch, p2);
  return res;
}

/// Multi-teacher KD: phase 1 from the in-domain teacher, phase 2 toward the
/// mean softened distribution of all teachers; no weighting, no tk term.
inline DistillResult mtn_kd_distill(const TeacherRef& in_domain, std::span<const TeacherRef> teachers, Encoder student,
                                    std::span<const TokenizedExample> train, std::span<const TokenizedExample> dev, LayerMap map,
                                    const DistillConfig& cfg, double temperature = 1.0) {
  if (teachers.size() < 2) throw std::invalid_argument("mtn_kd_distill: needs at least two teachers");
  DistillPlan plan = DistillPlan::tinybert(std::move(map));
  plan.temperature = temperature;
  return distill(in_domain, std::move(student), train, dev, plan, cfg, teachers);
}

}  // namespace mkd
