#pragma once

// Experiment protocols at desk scale. Each seed is an independent task
// (own data, own audit, own models) so seeds can run on parallel workers and
// adding a seed never changes another seed's records.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mkd/data.hpp"
#include "mkd/distill.hpp"
#include "mkd/encoder.hpp"
#include "mkd/eval.hpp"
#include "mkd/meta_teacher.hpp"
#include "mkd/records.hpp"

namespace mkd {

// ---------------------------------------------------------------- config

struct DataParams {
  std::optional<SynthSpec> synth = SynthSpec{};
  std::string dir;  // corpus directory with manifest.json; used when synth is empty
  bool resample_per_seed = true;
  std::size_t vocab_budget = 4096;
  std::size_t max_seq_len = 16;
};

struct FewshotParams {
  std::vector<double> rates{0.05, 0.1, 0.2, 0.5};
  bool retrain_in_domain_teacher = false;
  std::size_t min_steps_per_phase = 60;
};

struct ZeroshotParams {
  std::vector<std::string> held_out{"dom0"};
  bool gold_labels = false;
};

struct AblationParams {
  std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
};

inline const std::vector<std::string>& protocol_names() {
  static const std::vector<std::string> names{"main", "fewshot", "zeroshot", "ablation-g2"};
  return names;
}

struct ExperimentConfig {
  std::string protocol = "main";
  DataParams data;
  EncoderConfig teacher_encoder = EncoderConfig::teacher_default();
  EncoderConfig student_encoder = EncoderConfig::student_default();
  TeacherConfig teacher;
  std::vector<double> gamma1_grid;  // empty: use teacher.gamma1
  DistillConfig distill;
  DistillPlan plan;                 // temperature, gamma2, error_term; layer_map derived when empty
  std::vector<double> gamma2_grid;  // empty: use plan.gamma2
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  FewshotParams fewshot;
  ZeroshotParams zeroshot;
  AblationParams ablation;
  std::string output_dir;

  void validate() const {
    if (std::find(protocol_names().begin(), protocol_names().end(), protocol) == protocol_names().end())
      throw std::invalid_argument("unknown protocol '" + protocol + "' (main|fewshot|zeroshot|ablation-g2)");
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    if (!data.synth && data.dir.empty()) throw std::invalid_argument("config: data needs either synth or dir");
    if (data.synth) data.synth->validate();
    teacher.validate();
    plan.validate();
    for (double g : gamma1_grid)
      if (g < 0.0) throw std::invalid_argument("config: gamma1_grid entries must be >= 0");
    for (double g : gamma2_grid)
      if (g < 0.0) throw std::invalid_argument("config: gamma2_grid entries must be >= 0");
    if (protocol == "fewshot") {
      if (fewshot.rates.empty()) throw std::invalid_argument("config: fewshot.rates must be non-empty");
      for (double r : fewshot.rates)
        if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("config: fewshot rates must lie in (0, 1]");
    }
    if (protocol == "zeroshot" && zeroshot.held_out.empty()) throw std::invalid_argument("config: zeroshot.held_out must be non-empty");
    if (protocol == "ablation-g2") {
      if (ablation.grid.empty()) throw std::invalid_argument("config: ablation.grid must be non-empty");
      for (double g : ablation.grid)
        if (g < 0.0) throw std::invalid_argument("config: ablation grid entries must be >= 0");
    }
  }

  LayerMap layer_map() const {
    return plan.layer_map.empty() ? map_layers(teacher_encoder.num_layers, student_encoder.num_layers) : plan.layer_map;
  }
};

inline nlohmann::json to_json_config(const ExperimentConfig& c) {
  nlohmann::json data{{"resample_per_seed", c.data.resample_per_seed}, {"vocab_budget", c.data.vocab_budget},
                      {"max_seq_len", c.data.max_seq_len}};
  if (c.data.synth) data["synth"] = *c.data.synth;
  if (!c.data.dir.empty()) data["dir"] = c.data.dir;
  return {{"protocol", c.protocol},
          {"data", data},
          {"teacher_encoder", c.teacher_encoder},
          {"student_encoder", c.student_encoder},
          {"teacher", c.teacher},
          {"gamma1_grid", c.gamma1_grid},
          {"distill", c.distill},
          {"plan", c.plan},
          {"gamma2_grid", c.gamma2_grid},
          {"seeds", c.seeds},
          {"fewshot", {{"rates", c.fewshot.rates},
                       {"retrain_in_domain_teacher", c.fewshot.retrain_in_domain_teacher},
                       {"min_steps_per_phase", c.fewshot.min_steps_per_phase}}},
          {"zeroshot", {{"held_out", c.zeroshot.held_out}, {"gold_labels", c.zeroshot.gold_labels}}},
          {"ablation", {{"grid", c.ablation.grid}}},
          {"output_dir", c.output_dir}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  detail::reject_unknown(j, {"protocol", "data", "teacher_encoder", "student_encoder", "teacher", "gamma1_grid", "distill", "plan",
                             "gamma2_grid", "seeds", "fewshot", "zeroshot", "ablation", "output_dir"},
                         "top level");
  ExperimentConfig c;
  c.protocol = j.value("protocol", c.protocol);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"synth", "dir", "resample_per_seed", "vocab_budget", "max_seq_len"}, "data");
    if (d.contains("dir")) {
      c.data.dir = d.at("dir").get<std::string>();
      c.data.synth.reset();
    }
    if (d.contains("synth")) c.data.synth = d.at("synth").get<SynthSpec>();
    c.data.resample_per_seed = d.value("resample_per_seed", c.data.resample_per_seed);
    c.data.vocab_budget = d.value("vocab_budget", c.data.vocab_budget);
    c.data.max_seq_len = d.value("max_seq_len", c.data.max_seq_len);
  }
  if (j.contains("teacher_encoder")) c.teacher_encoder = j.at("teacher_encoder").get<EncoderConfig>();
  if (j.contains("student_encoder")) c.student_encoder = j.at("student_encoder").get<EncoderConfig>();
  if (j.contains("teacher")) c.teacher = j.at("teacher").get<TeacherConfig>();
  c.gamma1_grid = j.value("gamma1_grid", c.gamma1_grid);
  if (j.contains("distill")) c.distill = j.at("distill").get<DistillConfig>();
  if (j.contains("plan")) c.plan = j.at("plan").get<DistillPlan>();
  c.gamma2_grid = j.value("gamma2_grid", c.gamma2_grid);
  c.seeds = j.value("seeds", c.seeds);
  if (j.contains("fewshot")) {
    const auto& f = j.at("fewshot");
    detail::reject_unknown(f, {"rates", "retrain_in_domain_teacher", "min_steps_per_phase"}, "fewshot");
    c.fewshot.rates = f.value("rates", c.fewshot.rates);
    c.fewshot.retrain_in_domain_teacher = f.value("retrain_in_domain_teacher", c.fewshot.retrain_in_domain_teacher);
    c.fewshot.min_steps_per_phase = f.value("min_steps_per_phase", c.fewshot.min_steps_per_phase);
  }
  if (j.contains("zeroshot")) {
    const auto& z = j.at("zeroshot");
    detail::reject_unknown(z, {"held_out", "gold_labels"}, "zeroshot");
    c.zeroshot.held_out = z.value("held_out", c.zeroshot.held_out);
    c.zeroshot.gold_labels = z.value("gold_labels", c.zeroshot.gold_labels);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    detail::reject_unknown(a, {"grid"}, "ablation");
    c.ablation.grid = a.value("grid", c.ablation.grid);
  }
  c.output_dir = j.value("output_dir", c.output_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  return parse_config(nlohmann::json::parse(f, nullptr, true, true));
}

/// Hash of everything that determines results; output_dir and the protocol
/// roster of seeds are excluded so records from different seed sets of the
/// same experiment share a hash.
inline std::string experiment_hash(const ExperimentConfig& c) {
  auto j = to_json_config(c);
  j.erase("output_dir");
  j.erase("seeds");
  return config_hash(j);
}

// ---------------------------------------------------------------- per-seed data

struct SeedData {
  Vocab vocab;
  std::vector<TokenizedCorpus> corpora;
  std::size_t num_classes = 0;
};

inline std::vector<DomainCorpus> load_corpora(const DataParams& p, std::uint64_t seed) {
  if (p.synth) {
    SynthSpec s = *p.synth;
    if (p.resample_per_seed) s.seed = derive_seed(s.seed, "data/" + std::to_string(seed));
    return synth_multidomain(s);
  }
  return read_corpus_dir(p.dir);
}

inline SeedData prepare_data(const DataParams& p, std::uint64_t seed) {
  auto corpora = load_corpora(p, seed);
  std::size_t m = p.synth ? p.synth->num_classes : 0;
  if (!p.synth)
    for (const auto& c : corpora)
      for (Split s : {Split::train, Split::dev, Split::test})
        for (const auto& e : c.split(s)) m = std::max(m, static_cast<std::size_t>(e.label) + 1);
  for (const auto& c : corpora) c.validate(m);
  auto [vocab, tok] = tokenize(corpora, p.vocab_budget, p.max_seq_len);
  return {std::move(vocab), std::move(tok), m};
}

// ---------------------------------------------------------------- seed context

/// Everything one seed's protocol run touches.
class SeedContext {
 public:
  SeedContext(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream& log, std::mutex& log_mu)
      : cfg_(cfg), seed_(seed), hash_(experiment_hash(cfg)), log_(log), log_mu_(log_mu) {
    auto sd = prepare_data(cfg.data, seed);
    vocab_ = std::move(sd.vocab);
    num_classes_ = sd.num_classes;
    data_ = std::make_unique<AuditedData>(std::move(sd.corpora), audit_);
    tenc_ = cfg.teacher_encoder;
    senc_ = cfg.student_encoder;
    for (auto* e : {&tenc_, &senc_}) {
      e->vocab_size = vocab_.size();
      e->max_seq_len = cfg.data.max_seq_len;
      e->num_classes = num_classes_;
      e->num_domains = data_->num_domains();
    }
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const AuditedData& data() const { return *data_; }
  const Vocab& vocab() const { return vocab_; }
  DataAudit& audit() { return audit_; }
  const EncoderConfig& teacher_encoder() const { return tenc_; }
  const EncoderConfig& student_encoder() const { return senc_; }
  std::vector<ResultRecord>& records() { return records_; }

  std::size_t domain_index(const std::string& name) const {
    for (std::size_t k = 0; k < data_->num_domains(); ++k)
      if (data_->name(k) == name) return k;
    throw std::invalid_argument("unknown domain '" + name + "'");
  }

  void log(const std::string& msg) {
    std::lock_guard<std::mutex> lock(log_mu_);
    log_ << "[seed " << seed_ << "] " << msg << '\n';
  }

  void record(const std::string& condition, const std::string& setting, std::size_t domain, double acc, double secs) {
    records_.push_back({cfg_.protocol, condition, setting, data_->name(domain), seed_, acc, secs, hash_});
  }

 private:
  const ExperimentConfig& cfg_;
  std::uint64_t seed_;
  std::string hash_;
  std::ostream& log_;
  std::mutex& log_mu_;
  DataAudit audit_;
  Vocab vocab_;
  std::size_t num_classes_ = 0;
  std::unique_ptr<AuditedData> data_;
  EncoderConfig tenc_, senc_;
  std::vector<ResultRecord> records_;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

inline std::vector<TokenizedExample> relabeled(std::span<const TokenizedExample> rows, int domain) {
  std::vector<TokenizedExample> out(rows.begin(), rows.end());
  for (auto& r : out) r.domain = domain;
  return out;
}

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace detail

struct Teacher {
  TeacherResult result;
  std::vector<std::size_t> roster;  // global domain indices, in local order
  double wall_time = 0.0;

  std::optional<std::size_t> local(std::size_t global) const {
    for (std::size_t i = 0; i < roster.size(); ++i)
      if (roster[i] == global) return i;
    return std::nullopt;
  }
  TeacherRef ref(std::size_t global) const {
    return {&result.model, result.table ? &*result.table : nullptr, local(global)};
  }
  /// Test-split accuracy on a global domain the teacher was trained on.
  double test_accuracy(SeedContext& ctx, std::size_t global) const {
    auto scope = ctx.audit().evaluation("evaluate/teacher");
    const auto l = local(global);
    if (!l) throw std::logic_error("teacher evaluated on a domain outside its roster");
    return accuracy(result.model, detail::relabeled(ctx.data().labeled(global, Split::test), static_cast<int>(*l)));
  }
};

/// Trains a teacher over `roster`. Meta teachers sweep gamma1_grid (if set)
/// and keep the run with the best mean dev accuracy.
inline Teacher fit_teacher(SeedContext& ctx, const std::vector<std::size_t>& roster, TeacherMode mode, const std::string& tag,
                           const TeacherData* override_data = nullptr) {
  auto scope = ctx.audit().training("train/" + tag);
  const auto t0 = detail::Clock::now();
  const TeacherData td = override_data ? *override_data : teacher_data(ctx.data(), roster);
  TeacherConfig tc = ctx.cfg().teacher;
  tc.seed = derive_seed(ctx.seed(), "teacher/" + tag);
  std::optional<TeacherResult> best;
  double best_dev = -1.0;
  std::vector<double> grid = mode == TeacherMode::meta && !ctx.cfg().gamma1_grid.empty() ? ctx.cfg().gamma1_grid
                                                                                         : std::vector<double>{tc.gamma1};
  for (double g1 : grid) {
    tc.gamma1 = g1;
    auto r = train_teacher(td, ctx.teacher_encoder(), tc, mode);
    const double dev = r.history.at(r.best_epoch - 1).mean_dev_accuracy;
    if (dev > best_dev) {
      best_dev = dev;
      best = std::move(r);
    }
  }
  Teacher t{std::move(*best), roster, detail::since(t0)};
  ctx.log("teacher " + tag + " best dev " + detail::fmt_num(best_dev) + " (" + detail::fmt_num(t.wall_time) + "s)");
  return t;
}

struct StudentOutcome {
  double test_accuracy = 0.0;
  double dev_accuracy = -1.0;
  double wall_time = 0.0;
};

/// Distils one student for global domain `k` and measures it on k's test split.
inline StudentOutcome fit_student(SeedContext& ctx, const TeacherRef& teacher, std::span<const TokenizedExample> train,
                                  std::span<const TokenizedExample> dev, const DistillPlan& plan, std::size_t k, const std::string& tag,
                                  std::span<const TeacherRef> prediction_teachers = {}, std::size_t min_steps = 0) {
  const auto t0 = detail::Clock::now();
  DistillConfig dc = ctx.cfg().distill;
  dc.seed = derive_seed(ctx.seed(), "distill/" + tag);
  if (min_steps > 0) dc.min_steps_per_phase = min_steps;
  std::optional<DistillResult> res;
  {
    auto scope = ctx.audit().training("distill/" + tag);
    Encoder student(ctx.student_encoder(), derive_seed(ctx.seed(), "student-init/" + ctx.data().name(k)));
    res = distill(teacher, std::move(student), train, dev, plan, dc, prediction_teachers);
  }
  StudentOutcome out;
  for (const auto& h : res->history)
    if (h.phase == "prediction") out.dev_accuracy = std::max(out.dev_accuracy, h.dev_accuracy);
  auto scope = ctx.audit().evaluation("evaluate/" + tag);
  out.test_accuracy = accuracy(res->student, ctx.data().labeled(k, Split::test));
  out.wall_time = detail::since(t0);
  return out;
}

/// Meta-distillation with gamma2 picked on dev from the configured grid.
inline StudentOutcome fit_meta_distill(SeedContext& ctx, const Teacher& meta, std::size_t k, std::span<const TokenizedExample> train,
                                       std::span<const TokenizedExample> dev, const std::string& tag, std::size_t min_steps = 0) {
  const auto& grid = ctx.cfg().gamma2_grid;
  std::vector<double> values = grid.empty() || dev.empty() ? std::vector<double>{ctx.cfg().plan.gamma2} : grid;
  std::optional<StudentOutcome> best;
  double total = 0.0;
  for (double g : values) {
    DistillPlan p = ctx.cfg().plan;
    p.layer_map = ctx.cfg().layer_map();
    p.weighting = Weighting::expertise;
    p.use_tkd = true;
    p.gamma2 = g;
    auto o = fit_student(ctx, meta.ref(k), train, dev, p, k, tag + "/g2=" + detail::fmt_num(g), {}, min_steps);
    total += o.wall_time;
    if (!best || o.dev_accuracy > best->dev_accuracy) best = o;
  }
  best->wall_time = total;
  return *best;
}

inline DistillPlan kd_plan(const ExperimentConfig& cfg) {
  DistillPlan p = DistillPlan::tinybert(cfg.layer_map());
  p.temperature = cfg.plan.temperature;
  return p;
}

// ---------------------------------------------------------------- protocols

inline void run_main_seed(SeedContext& ctx) {
  const auto& data = ctx.data();
  const std::size_t kk = data.num_domains();
  if (kk < 2) throw std::invalid_argument("main protocol needs >= 2 domains");
  std::vector<std::size_t> all(kk);
  for (std::size_t k = 0; k < kk; ++k) all[k] = k;

  std::vector<Teacher> singles;
  for (std::size_t k = 0; k < kk; ++k) singles.push_back(fit_teacher(ctx, {k}, TeacherMode::single, "single/" + data.name(k)));
  const Teacher mix = fit_teacher(ctx, all, TeacherMode::mix, "mix");
  const Teacher meta = fit_teacher(ctx, all, TeacherMode::meta, "meta");

  for (std::size_t k = 0; k < kk; ++k) {
    ctx.record("teacher:single", "", k, singles[k].test_accuracy(ctx, k), singles[k].wall_time);
    ctx.record("teacher:mix", "", k, mix.test_accuracy(ctx, k), mix.wall_time);
    {
      auto scope = ctx.audit().evaluation("evaluate/teacher:multi");
      const auto test = data.labeled(k, Split::test);
      std::vector<std::vector<double>> avg(test.size(), std::vector<double>(ctx.student_encoder().num_classes, 0.0));
      double secs = 0.0;
      for (const auto& s : singles) {
        const auto p = predict_probs(s.result.model, detail::relabeled(test, 0));
        for (std::size_t i = 0; i < p.size(); ++i)
          for (std::size_t c = 0; c < p[i].size(); ++c) avg[i][c] += p[i][c] / static_cast<double>(kk);
        secs += s.wall_time;
      }
      ctx.record("teacher:multi", "", k, accuracy_of(avg, test), secs);
    }
    ctx.record("teacher:meta", "", k, meta.test_accuracy(ctx, k), meta.wall_time);
  }

  const DistillPlan kd = kd_plan(ctx.cfg());
  for (std::size_t k = 0; k < kk; ++k) {
    const std::string dn = data.name(k);
    std::vector<TokenizedExample> train, dev;
    {
      auto scope = ctx.audit().training("distill-data/" + dn);
      auto tr = data.labeled(k, Split::train);
      auto dv = data.labeled(k, Split::dev);
      train.assign(tr.begin(), tr.end());
      dev.assign(dv.begin(), dv.end());
    }
    auto o = fit_student(ctx, singles[k].ref(k), train, dev, kd, k, "single->tinybert-kd/" + dn);
    ctx.record("single->tinybert-kd", "", k, o.test_accuracy, o.wall_time);
    o = fit_student(ctx, mix.ref(k), train, dev, kd, k, "mix->tinybert-kd/" + dn);
    ctx.record("mix->tinybert-kd", "", k, o.test_accuracy, o.wall_time);
    std::vector<TeacherRef> all_singles;
    for (std::size_t j = 0; j < kk; ++j) all_singles.push_back({&singles[j].result.model, nullptr, 0});
    o = fit_student(ctx, singles[k].ref(k), train, dev, kd, k, "multi->mtn-kd/" + dn, all_singles);
    ctx.record("multi->mtn-kd", "", k, o.test_accuracy, o.wall_time);
    o = fit_student(ctx, meta.ref(k), train, dev, kd, k, "meta->tinybert-kd/" + dn);
    ctx.record("meta->tinybert-kd", "", k, o.test_accuracy, o.wall_time);
    o = fit_meta_distill(ctx, meta, k, train, dev, "meta->meta-distill/" + dn);
    ctx.record("meta->meta-distill", "", k, o.test_accuracy, o.wall_time);
    ctx.log("students done for " + dn);
  }
}

inline void run_fewshot_seed(SeedContext& ctx) {
  const auto& data = ctx.data();
  const auto& fp = ctx.cfg().fewshot;
  const std::size_t kk = data.num_domains();
  std::vector<std::size_t> all(kk);
  for (std::size_t k = 0; k < kk; ++k) all[k] = k;
  std::vector<Teacher> singles;
  for (std::size_t k = 0; k < kk; ++k) singles.push_back(fit_teacher(ctx, {k}, TeacherMode::single, "single/" + data.name(k)));
  const Teacher meta = fit_teacher(ctx, all, TeacherMode::meta, "meta");
  const DistillPlan kd = kd_plan(ctx.cfg());

  for (double rate : fp.rates) {
    const std::string setting = "rate=" + detail::fmt_num(rate);
    for (std::size_t k = 0; k < kk; ++k) {
      const std::string dn = data.name(k);
      std::vector<TokenizedExample> sub, dev;
      {
        auto scope = ctx.audit().training("subsample/" + dn);
        try {
          sub = subsample<TokenizedExample>(data.labeled(k, Split::train), rate, derive_seed(ctx.seed(), "subsample/" + dn + "/" + setting));
        } catch (const std::invalid_argument& e) {
          ctx.log("skipping " + setting + " for " + dn + ": " + e.what());
          continue;
        }
        auto dv = data.labeled(k, Split::dev);
        dev.assign(dv.begin(), dv.end());
      }
      const std::string tag = setting + "/" + dn;
      std::optional<Teacher> retrained;
      if (fp.retrain_in_domain_teacher) {
        TeacherData td;
        td.domain_names = {dn};
        td.train = {detail::relabeled(sub, 0)};
        td.dev = {detail::relabeled(dev, 0)};
        retrained = fit_teacher(ctx, {k}, TeacherMode::single, "single-sub/" + tag, &td);
      }
      const Teacher& in_domain = retrained ? *retrained : singles[k];
      auto a = fit_student(ctx, in_domain.ref(k), sub, dev, kd, k, "single->tinybert-kd/" + tag, {}, fp.min_steps_per_phase);
      ctx.record("single->tinybert-kd", setting, k, a.test_accuracy, a.wall_time);
      auto b = fit_meta_distill(ctx, meta, k, sub, dev, "meta->meta-distill/" + tag, fp.min_steps_per_phase);
      ctx.record("meta->meta-distill", setting, k, b.test_accuracy, b.wall_time);
    }
    ctx.log("fewshot " + setting + " done");
  }
}

inline void run_zeroshot_seed(SeedContext& ctx) {
  const auto& data = ctx.data();
  const auto& zp = ctx.cfg().zeroshot;
  const std::size_t kk = data.num_domains();
  if (kk < 3) throw std::invalid_argument("zeroshot protocol needs >= 3 domains");
  const DistillPlan kd = kd_plan(ctx.cfg());
  for (const auto& held_name : zp.held_out) {
    const std::size_t h = ctx.domain_index(held_name);
    std::vector<std::size_t> roster;
    for (std::size_t k = 0; k < kk; ++k)
      if (k != h) roster.push_back(k);
    const std::string setting = "held_out=" + held_name;

    std::vector<TokenizedExample> inputs;
    std::optional<Teacher> meta;
    std::vector<Teacher> outs;
    {
      std::optional<DataAudit::BanScope> ban;
      if (!zp.gold_labels) ban.emplace(ctx.audit(), DataAudit::LabelBan{h, {Split::train, Split::dev}});
      meta = fit_teacher(ctx, roster, TeacherMode::meta, "zs-meta/" + setting);
      for (std::size_t k : roster) outs.push_back(fit_teacher(ctx, {k}, TeacherMode::single, "single/" + data.name(k)));
      {
        auto scope = ctx.audit().training("distill-data/" + setting);
        if (zp.gold_labels) {
          auto tr = data.labeled(h, Split::train);
          inputs.assign(tr.begin(), tr.end());
        } else {
          inputs = data.inputs(h, Split::train);
        }
      }
      DistillPlan md = ctx.cfg().plan;
      md.layer_map = ctx.cfg().layer_map();
      md.use_tkd = true;
      md.weighting = zp.gold_labels ? Weighting::seen_mean_gold : Weighting::seen_mean;
      auto o = fit_student(ctx, meta->ref(h), inputs, {}, md, h, "zs:meta->meta-distill/" + setting);
      ctx.record("zs:meta->meta-distill", setting, h, o.test_accuracy, o.wall_time);
      for (std::size_t i = 0; i < roster.size(); ++i) {
        const std::string cond = "zs:single[" + data.name(roster[i]) + "]->tinybert-kd";
        TeacherRef ref{&outs[i].result.model, nullptr, 0};
        o = fit_student(ctx, ref, inputs, {}, kd, h, cond + "/" + setting);
        ctx.record(cond, setting, h, o.test_accuracy, o.wall_time);
      }
    }
    // skyline: the held-out domain's own teacher, trained on its labels
    const Teacher sky = fit_teacher(ctx, {h}, TeacherMode::single, "zs-skyline/" + setting);
    auto o = fit_student(ctx, sky.ref(h), inputs, {}, kd, h, "zs:skyline->tinybert-kd/" + setting);
    ctx.record("zs:skyline->tinybert-kd", setting, h, o.test_accuracy, o.wall_time);
    ctx.log("zeroshot " + setting + " done");
  }
}

inline void run_ablation_seed(SeedContext& ctx) {
  const auto& data = ctx.data();
  const std::size_t kk = data.num_domains();
  std::vector<std::size_t> all(kk);
  for (std::size_t k = 0; k < kk; ++k) all[k] = k;
  const Teacher meta = fit_teacher(ctx, all, TeacherMode::meta, "meta");
  for (std::size_t k = 0; k < kk; ++k) {
    const std::string dn = data.name(k);
    std::vector<TokenizedExample> train, dev;
    {
      auto scope = ctx.audit().training("distill-data/" + dn);
      auto tr = data.labeled(k, Split::train);
      auto dv = data.labeled(k, Split::dev);
      train.assign(tr.begin(), tr.end());
      dev.assign(dv.begin(), dv.end());
    }
    for (double g : ctx.cfg().ablation.grid) {
      DistillPlan p = ctx.cfg().plan;
      p.layer_map = ctx.cfg().layer_map();
      p.weighting = Weighting::expertise;
      p.use_tkd = true;
      p.gamma2 = g;
      const std::string setting = "gamma2=" + detail::fmt_num(g);
      auto o = fit_student(ctx, meta.ref(k), train, dev, p, k, "meta->meta-distill/" + setting + "/" + dn);
      ctx.record("meta->meta-distill", setting, k, o.test_accuracy, o.wall_time);
    }
    ctx.log("ablation done for " + dn);
  }
}

// ---------------------------------------------------------------- audit summary

struct HygieneSummary {
  std::size_t events = 0;
  std::size_t test_reads_outside_evaluation = 0;
  std::size_t heldout_label_reads = 0;  // zero-shot only, skyline excluded
};

inline void to_json(nlohmann::json& j, const HygieneSummary& h) {
  j = {{"events", h.events},
       {"test_reads_outside_evaluation", h.test_reads_outside_evaluation},
       {"heldout_label_reads", h.heldout_label_reads}};
}

inline HygieneSummary summarize_audit(const DataAudit& audit, const std::vector<std::size_t>& held_out) {
  HygieneSummary s;
  for (const auto& e : audit.events()) {
    ++s.events;
    if (e.split == Split::test && !e.evaluation) ++s.test_reads_outside_evaluation;
    const bool held = std::find(held_out.begin(), held_out.end(), e.domain) != held_out.end();
    const bool skyline = e.context.find("zs-skyline/") != std::string::npos;
    if (held && e.access == Access::labels && e.split != Split::test && !e.evaluation && !skyline) ++s.heldout_label_reads;
  }
  return s;
}

// ---------------------------------------------------------------- orchestration

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::vector<ResultRecord> records;
  HygieneSummary hygiene;
  std::string error;  // empty on success
  double wall_time = 0.0;
};

struct RunSummary {
  std::vector<SeedOutcome> seeds;
  std::string config_hash;

  bool ok() const {
    return std::all_of(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return s.error.empty(); });
  }
  std::vector<ResultRecord> records() const {
    std::vector<ResultRecord> out;
    for (const auto& s : seeds) out.insert(out.end(), s.records.begin(), s.records.end());
    return out;
  }
};

inline std::size_t worker_count(std::size_t tasks) {
  std::size_t n = 1;
  if (const char* env = std::getenv("MKD_THREADS")) {
    try {
      n = static_cast<std::size_t>(std::max(1L, std::stol(env)));
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("MKD_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max<std::size_t>(1, std::min(n, tasks));
}

inline SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream& log, std::mutex& log_mu) {
  SeedOutcome out;
  out.seed = seed;
  const auto t0 = detail::Clock::now();
  std::unique_ptr<SeedContext> ctx;
  try {
    ctx = std::make_unique<SeedContext>(cfg, seed, log, log_mu);
    if (cfg.protocol == "main") run_main_seed(*ctx);
    else if (cfg.protocol == "fewshot") run_fewshot_seed(*ctx);
    else if (cfg.protocol == "zeroshot") run_zeroshot_seed(*ctx);
    else run_ablation_seed(*ctx);
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  if (ctx) {
    out.records = ctx->records();
    std::vector<std::size_t> held;
    if (cfg.protocol == "zeroshot")
      for (const auto& n : cfg.zeroshot.held_out) {
        try {
          held.push_back(ctx->domain_index(n));
        } catch (const std::exception&) {
        }
      }
    out.hygiene = summarize_audit(ctx->audit(), held);
  }
  out.wall_time = detail::since(t0);
  return out;
}

/// Runs every seed (MKD_THREADS workers), then, if cfg.output_dir is set,
/// writes config.json, records.jsonl (append-only), audit.json and reports.
inline RunSummary run_protocol(const ExperimentConfig& cfg, std::ostream& log = std::cerr);

}  // namespace mkd

#include "mkd/report.hpp"

namespace mkd {

inline RunSummary run_protocol(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  RunSummary summary;
  summary.config_hash = experiment_hash(cfg);
  summary.seeds.resize(cfg.seeds.size());
  std::mutex log_mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) summary.seeds[i] = run_seed(cfg, cfg.seeds[i], log, log_mu);
  };
  const std::size_t n = worker_count(cfg.seeds.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (const auto& s : summary.seeds)
    if (!s.error.empty()) log << "[seed " << s.seed << "] FAILED: " << s.error << '\n';

  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    const auto dir = std::filesystem::path(cfg.output_dir);
    std::ofstream(dir / "config.json") << to_json_config(cfg).dump(2) << '\n';
    RecordStore store((dir / "records.jsonl").string());
    for (const auto& r : summary.records()) store.append(r);
    nlohmann::json audit = nlohmann::json::array();
    for (const auto& s : summary.seeds)
      audit.push_back({{"seed", s.seed}, {"ok", s.error.empty()}, {"error", s.error}, {"wall_time", s.wall_time}, {"hygiene", s.hygiene}});
    std::ofstream(dir / "audit.json") << audit.dump(2) << '\n';
    if (!summary.records().empty()) emit_report(summary.records(), dir.string());
  }
  return summary;
}

}  // namespace mkd
