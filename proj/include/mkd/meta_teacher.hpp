#pragma once

// Cross-domain teacher: class prototypes per domain, prototype scores that
// weight each example's classification loss, the corruption loss toward a
// shuffled (false) domain label, and the training loops for the meta-teacher
// and the plain single/mix baselines.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mkd/data.hpp"
#include "mkd/encoder.hpp"
#include "mkd/eval.hpp"
#include "mkd/loss.hpp"
#include "mkd/optim.hpp"

namespace mkd {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- prototypes

struct PrototypeTable {
  double alpha = 0.5;
  double clamp_floor = 0.05;
  std::string source;
  std::vector<std::vector<std::vector<double>>> prototypes;  // [k][m] -> H
  std::map<std::string, double> scores;

  std::size_t num_domains() const { return prototypes.size(); }
  std::size_t num_classes() const { return prototypes.empty() ? 0 : prototypes.front().size(); }

  double score(const std::string& id) const {
    auto it = scores.find(id);
    if (it == scores.end()) throw std::out_of_range("prototype table has no score for example '" + id + "'");
    return it->second;
  }

  double mean_score() const {
    if (scores.empty()) throw std::logic_error("prototype table has no scores");
    double s = 0.0;
    for (const auto& [id, t] : scores) s += t;
    return s / static_cast<double>(scores.size());
  }
};

inline void to_json(nlohmann::json& j, const PrototypeTable& t) {
  nlohmann::json protos = nlohmann::json::object();
  for (std::size_t k = 0; k < t.prototypes.size(); ++k) {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t m = 0; m < t.prototypes[k].size(); ++m) per[std::to_string(m)] = t.prototypes[k][m];
    protos[std::to_string(k)] = per;
  }
  j = {{"alpha", t.alpha}, {"clamp_floor", t.clamp_floor}, {"source", t.source}, {"prototypes", protos}, {"scores", t.scores}};
}

inline void from_json(const nlohmann::json& j, PrototypeTable& t) {
  t.alpha = j.at("alpha").get<double>();
  t.clamp_floor = j.value("clamp_floor", 0.05);
  t.source = j.value("source", std::string{});
  const auto& protos = j.at("prototypes");
  t.prototypes.assign(protos.size(), {});
  for (std::size_t k = 0; k < protos.size(); ++k) {
    const auto& per = protos.at(std::to_string(k));
    t.prototypes[k].assign(per.size(), {});
    for (std::size_t m = 0; m < per.size(); ++m) t.prototypes[k][m] = per.at(std::to_string(m)).get<std::vector<double>>();
  }
  t.scores = j.at("scores").get<std::map<std::string, double>>();
}

inline void write_prototype_table(const std::string& path, const PrototypeTable& t) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << nlohmann::json(t).dump() << '\n';
}

inline PrototypeTable read_prototype_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open prototype table " + path);
  return nlohmann::json::parse(f).get<PrototypeTable>();
}

/// Per-domain, per-class mean of the given pooled vectors. `domains[i]` is
/// the row's local domain index.
inline std::vector<std::vector<std::vector<double>>> class_means(const std::vector<std::vector<double>>& pooled,
                                                                 std::span<const int> labels, std::span<const int> domains,
                                                                 std::size_t num_domains, std::size_t num_classes) {
  if (pooled.empty()) throw std::invalid_argument("class_means: no vectors");
  const std::size_t h = pooled.front().size();
  std::vector<std::vector<std::vector<double>>> sum(num_domains, std::vector<std::vector<double>>(num_classes, std::vector<double>(h, 0.0)));
  std::vector<std::vector<std::size_t>> count(num_domains, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    const auto k = static_cast<std::size_t>(domains[i]);
    const auto m = static_cast<std::size_t>(labels[i]);
    if (k >= num_domains || m >= num_classes) throw std::out_of_range("class_means: label outside table");
    for (std::size_t j = 0; j < h; ++j) sum[k][m][j] += pooled[i][j];
    ++count[k][m];
  }
  for (std::size_t k = 0; k < num_domains; ++k)
    for (std::size_t m = 0; m < num_classes; ++m) {
      if (count[k][m] == 0) {
        throw std::invalid_argument("no training examples for domain " + std::to_string(k) + ", class " + std::to_string(m) +
                                    "; cannot form its prototype");
      }
      for (auto& v : sum[k][m]) v /= static_cast<double>(count[k][m]);
    }
  return sum;
}

/// Unclamped score: α·cos(p_k^m, h) + (1−α)/(K−1)·Σ_{k'≠k} cos(p_k'^m, h).
/// With a single domain the cross-domain term is vacuous and t = cos(p_k^m, h).
inline double raw_prototype_score(std::span<const double> h, std::size_t k, std::size_t m,
                                  const std::vector<std::vector<std::vector<double>>>& protos, double alpha) {
  const std::size_t kk = protos.size();
  if (k >= kk || m >= protos[k].size()) throw std::out_of_range("prototype_score: (domain, class) outside table");
  const double own = cosine_similarity(protos[k][m], h);
  if (kk == 1) return own;
  double others = 0.0;
  for (std::size_t j = 0; j < kk; ++j) {
    if (j == k) continue;
    if (m >= protos[j].size()) throw std::out_of_range("prototype_score: class " + std::to_string(m) + " missing in domain " + std::to_string(j));
    others += cosine_similarity(protos[j][m], h);
  }
  return alpha * own + (1.0 - alpha) / static_cast<double>(kk - 1) * others;
}

inline double prototype_score(std::span<const double> h, std::size_t k, std::size_t m, const PrototypeTable& table) {
  return std::clamp(raw_prototype_score(h, k, m, table.prototypes, table.alpha), table.clamp_floor, 1.0);
}

/// Prototypes and scores for `rows`, whose `domain` fields must be local
/// indices 0..K-1 of the teacher being trained.
inline PrototypeTable build_prototypes(const Encoder& model, std::span<const TokenizedExample> rows, double alpha,
                                       double clamp_floor = 0.05, std::string source = "init") {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("build_prototypes: alpha outside [0, 1]");
  const auto pooled = pooled_vectors(model, rows);
  std::vector<int> labels, domains;
  for (const auto& r : rows) {
    labels.push_back(r.label);
    domains.push_back(r.domain);
  }
  PrototypeTable t;
  t.alpha = alpha;
  t.clamp_floor = clamp_floor;
  t.source = std::move(source);
  t.prototypes = class_means(pooled, labels, domains, model.config().num_domains, model.config().num_classes);
  for (std::size_t i = 0; i < rows.size(); ++i)
    t.scores[rows[i].id] = prototype_score(pooled[i], static_cast<std::size_t>(rows[i].domain), static_cast<std::size_t>(rows[i].label), t);
  return t;
}

// ---------------------------------------------------------------- losses

struct CorruptionLoss {
  Tensor per_row;  // [B]; zero where z == d
  Tensor value;    // mean over rows with z != d
  std::size_t included = 0;
  bool all_excluded() const { return included == 0; }
};

/// Cross-entropy of the domain classifier toward the corrupted label z.
/// Rows where z equals the true label carry no corruption signal and are left
/// out of the mean; if every row is left out the value is 0.
inline CorruptionLoss domain_corruption_loss(const Tensor& domain_logits, std::span<const int> corrupted,
                                             std::span<const int> true_domains) {
  if (corrupted.size() != true_domains.size() || domain_logits.rank() != 2 || domain_logits.dim(0) != corrupted.size()) {
    throw DimensionError("domain_corruption_loss: logits " + shape_str(domain_logits.shape()) + " vs " +
                         std::to_string(corrupted.size()) + " labels");
  }
  const std::size_t b = corrupted.size();
  CorruptionLoss out;
  std::vector<double> keep(b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    if (corrupted[i] != true_domains[i]) {
      keep[i] = 1.0;
      ++out.included;
    }
  Tensor ce = cross_entropy_rows(domain_logits, corrupted);
  out.per_row = mul(ce, Tensor({b}, keep));
  if (out.included == 0) {
    out.value = Tensor::scalar(0.0);
    return out;
  }
  std::vector<double> w(b);
  for (std::size_t i = 0; i < b; ++i) w[i] = keep[i] * static_cast<double>(b) / static_cast<double>(out.included);
  out.value = weighted_mean(ce, w);
  return out;
}

/// Batch mean of t_i·CE_i + γ₁·DC_i.
inline Tensor teacher_loss(const Batch& batch, const ForwardTrace& trace, std::span<const double> scores, double gamma1) {
  if (scores.size() != batch.size) throw std::invalid_argument("teacher_loss: one score per example required");
  Tensor ce = cross_entropy_rows(trace.class_logits, batch.class_labels);
  Tensor weighted = weighted_mean(ce, scores);
  if (gamma1 == 0.0) return weighted;
  const auto dc = domain_corruption_loss(trace.domain_logits, batch.corrupted_domain_labels, batch.domain_labels);
  if (dc.all_excluded()) return weighted;
  return add(weighted, scale(mean(dc.per_row), gamma1));
}

inline std::vector<double> batch_scores(const Batch& batch, const PrototypeTable& table) {
  std::vector<double> s;
  s.reserve(batch.size);
  for (const auto& id : batch.ids) s.push_back(table.score(id));
  return s;
}

// ---------------------------------------------------------------- training

enum class TeacherMode { meta, single, mix };

inline const char* teacher_mode_name(TeacherMode m) {
  switch (m) {
    case TeacherMode::meta: return "meta";
    case TeacherMode::single: return "single";
    case TeacherMode::mix: return "mix";
  }
  return "?";
}

inline TeacherMode parse_teacher_mode(const std::string& s) {
  if (s == "meta") return TeacherMode::meta;
  if (s == "single") return TeacherMode::single;
  if (s == "mix") return TeacherMode::mix;
  throw std::invalid_argument("teacher mode must be meta|single|mix, got '" + s + "'");
}

struct TeacherConfig {
  double alpha = 0.5;
  double gamma1 = 0.2;
  std::size_t epochs = 4;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double clamp_floor = 0.05;
  double clip_norm = 1.0;
  bool refresh_prototypes_every_epoch = false;
  bool select_on_dev = true;

  void validate() const {
    if (gamma1 < 0.0) throw std::invalid_argument("TeacherConfig: gamma1 must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("TeacherConfig: alpha outside [0, 1]");
    if (epochs == 0 || batch_size == 0) throw std::invalid_argument("TeacherConfig: epochs and batch_size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TeacherConfig: learning_rate must be positive");
    if (clamp_floor < 0.0 || clamp_floor > 1.0) throw std::invalid_argument("TeacherConfig: clamp_floor outside [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const TeacherConfig& c) {
  j = {{"alpha", c.alpha},
       {"gamma1", c.gamma1},
       {"epochs", c.epochs},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"clamp_floor", c.clamp_floor},
       {"clip_norm", c.clip_norm},
       {"refresh_prototypes_every_epoch", c.refresh_prototypes_every_epoch},
       {"select_on_dev", c.select_on_dev}};
}

inline void from_json(const nlohmann::json& j, TeacherConfig& c) {
  const TeacherConfig d = c;
  c.alpha = j.value("alpha", d.alpha);
  c.gamma1 = j.value("gamma1", d.gamma1);
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.clamp_floor = j.value("clamp_floor", d.clamp_floor);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.refresh_prototypes_every_epoch = j.value("refresh_prototypes_every_epoch", d.refresh_prototypes_every_epoch);
  c.select_on_dev = j.value("select_on_dev", d.select_on_dev);
}

/// Training data for one teacher: per-domain train/dev sets with `domain`
/// fields already remapped to the teacher's local indices.
struct TeacherData {
  std::vector<std::string> domain_names;
  std::vector<std::vector<TokenizedExample>> train, dev;

  std::vector<TokenizedExample> pooled_train() const {
    std::vector<TokenizedExample> all;
    for (const auto& t : train) all.insert(all.end(), t.begin(), t.end());
    return all;
  }
};

/// Reads labeled train/dev rows for the roster through the audit and
/// relabels domains to 0..roster.size()-1.
inline TeacherData teacher_data(const AuditedData& data, const std::vector<std::size_t>& roster) {
  TeacherData td;
  for (std::size_t local = 0; local < roster.size(); ++local) {
    td.domain_names.push_back(data.name(roster[local]));
    for (Split s : {Split::train, Split::dev}) {
      auto rows = data.labeled(roster[local], s);
      std::vector<TokenizedExample> copy(rows.begin(), rows.end());
      for (auto& r : copy) r.domain = static_cast<int>(local);
      (s == Split::train ? td.train : td.dev).push_back(std::move(copy));
    }
  }
  return td;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::vector<double> dev_accuracy;  // per local domain
  double mean_dev_accuracy = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = {{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"dev_accuracy", m.dev_accuracy}, {"mean_dev_accuracy", m.mean_dev_accuracy}};
}

struct TeacherResult {
  Encoder model;
  std::optional<PrototypeTable> table;
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  TeacherMode mode = TeacherMode::mix;
  std::vector<std::string> domain_names;

  nlohmann::json checkpoint_meta() const {
    return {{"teacher_mode", teacher_mode_name(mode)}, {"domains", domain_names}, {"best_epoch", best_epoch}, {"history", history}};
  }
};

namespace detail {

inline std::vector<Parameter*> select_params(ParameterStore& store, bool include_domain_head) {
  std::vector<Parameter*> out;
  for (auto& p : store.all())
    if (include_domain_head || p.name.rfind("domain.", 0) != 0) out.push_back(&p);
  return out;
}

inline void zero_param_grads(const std::vector<Parameter*>& ps) {
  for (auto* p : ps) p->tensor.zero_grad();
}

inline void check_finite(double loss, const std::string& where, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingDiverged(where + ": non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step));
  }
}

}  // namespace detail

/// Shared loop. `meta` switches on prototype weights and the corruption
/// term; otherwise plain cross-entropy over the pooled train sets.
inline TeacherResult train_teacher(const TeacherData& data, const EncoderConfig& enc_cfg, const TeacherConfig& cfg, TeacherMode mode) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train_teacher: no domains");
  if (mode == TeacherMode::meta && data.train.size() < 2) throw std::invalid_argument("train_teacher: meta mode needs >= 2 domains");
  if (mode == TeacherMode::single && data.train.size() != 1) throw std::invalid_argument("train_teacher: single mode takes exactly one domain");
  EncoderConfig ec = enc_cfg;
  ec.num_domains = std::max<std::size_t>(data.train.size(), 1);
  Encoder model(ec, cfg.seed);
  const bool meta = mode == TeacherMode::meta;
  const auto all_train = data.pooled_train();

  std::optional<PrototypeTable> table;
  if (meta) table = build_prototypes(model, all_train, cfg.alpha, cfg.clamp_floor, "init");

  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  ac.clip_norm = cfg.clip_norm;
  Adam opt(ac);
  auto params = detail::select_params(model.params(), meta);
  std::mt19937_64 rng(cfg.seed ^ 0x7e4c11ULL);

  TeacherResult res{std::move(model), std::nullopt, {}, 0, mode, data.domain_names};
  std::vector<std::vector<double>> best;
  double best_dev = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (meta && cfg.refresh_prototypes_every_epoch && epoch > 1)
      table = build_prototypes(res.model, all_train, cfg.alpha, cfg.clamp_floor, "epoch" + std::to_string(epoch - 1));
    const auto batches = make_batches(all_train, cfg.batch_size, rng, BatchMode::mixed, meta && cfg.batch_size >= 2);
    double loss_sum = 0.0;
    std::size_t step = 0;
    for (const auto& b : batches) {
      detail::zero_param_grads(params);
      const auto tr = res.model.encode(b, true, &rng);
      Tensor loss = meta ? teacher_loss(b, tr, batch_scores(b, *table), cfg.gamma1) : cross_entropy(tr.class_logits, b.class_labels);
      detail::check_finite(loss.item(), std::string("teacher/") + teacher_mode_name(mode), epoch, step);
      loss.backward();
      opt.step(params);
      loss_sum += loss.item() * static_cast<double>(b.size);
      ++step;
    }
    if (!res.model.params().all_finite()) throw TrainingDiverged("teacher parameters became non-finite at epoch " + std::to_string(epoch));
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(all_train.size());
    for (const auto& dev : data.dev) em.dev_accuracy.push_back(accuracy(res.model, dev));
    for (double a : em.dev_accuracy) em.mean_dev_accuracy += a / static_cast<double>(em.dev_accuracy.size());
    res.history.push_back(em);
    if (!cfg.select_on_dev || em.mean_dev_accuracy > best_dev) {
      best_dev = em.mean_dev_accuracy;
      best = res.model.params().snapshot();
      res.best_epoch = epoch;
    }
  }
  res.model.params().restore(best);
  res.table = std::move(table);
  return res;
}

inline TeacherResult train_meta_teacher(const TeacherData& data, const EncoderConfig& enc, const TeacherConfig& cfg) {
  return train_teacher(data, enc, cfg, TeacherMode::meta);
}

inline TeacherResult train_baseline_teacher(const TeacherData& data, const EncoderConfig& enc, const TeacherConfig& cfg,
                                            TeacherMode mode) {
  if (mode == TeacherMode::meta) throw std::invalid_argument("train_baseline_teacher: mode must be single or mix");
  return train_teacher(data, enc, cfg, mode);
}

}  // namespace mkd
