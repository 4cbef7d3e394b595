#include <gtest/gtest.h>

#include <cmath>

#include "mkd/mkd.hpp"
#include "oracles.hpp"

using namespace mkd;

namespace {

EncoderConfig enc_for(const Vocab& v, std::size_t domains) {
  EncoderConfig c;
  c.vocab_size = v.size();
  c.max_seq_len = 16;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.num_classes = 2;
  c.num_domains = domains;
  return c;
}

struct Fixture {
  Vocab vocab;
  TeacherData data;
};

Fixture make_fixture(std::size_t train_per_domain = 60, std::uint64_t seed = 11) {
  SynthSpec s;
  s.train_size = train_per_domain;
  s.dev_size = 40;
  s.test_size = 20;
  s.seed = seed;
  auto [vocab, tok] = tokenize(synth_multidomain(s), 4096, 16);
  Fixture f{std::move(vocab), {}};
  for (std::size_t k = 0; k < tok.size(); ++k) {
    f.data.domain_names.push_back(tok[k].name);
    f.data.train.push_back(tok[k].train);
    f.data.dev.push_back(tok[k].dev);
  }
  return f;
}

TeacherConfig quick(std::size_t epochs = 2) {
  TeacherConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  return c;
}

}  // namespace

TEST(CorruptionLoss, UniformLogitsGiveLogK) {
  for (std::size_t k = 2; k <= 5; ++k) {
    Tensor logits = Tensor::zeros({6, k});
    std::vector<int> d{0, 1, 0, 1, 0, 1}, z;
    for (int x : d) z.push_back((x + 1) % static_cast<int>(k));
    const auto dc = domain_corruption_loss(logits, z, d);
    EXPECT_NEAR(dc.value.item(), std::log(static_cast<double>(k)), 1e-9);
    EXPECT_EQ(dc.included, 6u);
  }
}

TEST(CorruptionLoss, ExcludesUncorruptedRowsAndMatchesOracle) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 2 + trial % 6, k = 2 + trial % 3;
    std::vector<double> l(b * k);
    for (auto& v : l) v = n(rng);
    std::vector<int> d(b), z(b);
    for (std::size_t i = 0; i < b; ++i) {
      d[i] = static_cast<int>(rng() % k);
      z[i] = static_cast<int>(rng() % k);
    }
    const auto dc = domain_corruption_loss(Tensor({b, k}, l), z, d);
    EXPECT_NEAR(dc.value.item(), static_cast<double>(oracle::corruption_loss(l, k, z, d)), 1e-12);
    for (std::size_t i = 0; i < b; ++i)
      if (z[i] == d[i]) {
        EXPECT_EQ(dc.per_row[i], 0.0);
      }
  }
}

TEST(CorruptionLoss, AllExcludedIsZero) {
  const std::vector<int> d{1, 1};
  const auto dc = domain_corruption_loss(Tensor::zeros({2, 2}), d, d);
  EXPECT_TRUE(dc.all_excluded());
  EXPECT_EQ(dc.value.item(), 0.0);
}

TEST(PrototypeScore, HandComputedBlend) {
  // K = 3, M = 1, H = 2
  std::vector<std::vector<std::vector<double>>> p{{{1, 0}}, {{0, 1}}, {{-1, 0}}};
  const std::vector<double> h{1, 0};
  // own = 1, others = 0 and -1
  EXPECT_NEAR(raw_prototype_score(h, 0, 0, p, 0.5), 0.5 * 1 + 0.25 * (0 - 1), 1e-15);
  EXPECT_NEAR(raw_prototype_score(h, 0, 0, p, 1.0), 1.0, 1e-15);
  PrototypeTable t;
  t.alpha = 0.0;
  t.prototypes = p;
  EXPECT_NEAR(prototype_score(h, 0, 0, t), 0.05, 1e-15);  // raw -0.5 clamps to the floor
}

TEST(PrototypeScore, SingleDomainUsesOwnCosine) {
  std::vector<std::vector<std::vector<double>>> p{{{3, 4}}};
  const std::vector<double> h{4, 3};
  EXPECT_NEAR(raw_prototype_score(h, 0, 0, p, 0.5), 24.0 / 25.0, 1e-15);
}

TEST(PrototypeScore, EmptyCellNamesDomainAndClass) {
  const std::vector<std::vector<double>> pooled{{1, 0}, {0, 1}};
  const std::vector<int> labels{0, 0}, domains{0, 1};
  try {
    class_means(pooled, labels, domains, 2, 2);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("domain 0, class 1"), std::string::npos) << e.what();
  }
}

TEST(PrototypeScore, MatchesBruteForceOracle) {
  auto f = make_fixture(67);  // 3 x 67 = 201 rows
  auto rows = f.data.pooled_train();
  rows.resize(200);
  Encoder model(enc_for(f.vocab, 3), 5);
  for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
    const auto table = build_prototypes(model, rows, alpha);
    const auto o = oracle::brute_force(pooled_vectors(model, rows), rows, 3, 2, alpha, 0.05);
    EXPECT_LT(oracle::max_abs_diff(table, o), 1e-6) << "alpha " << alpha;
    for (const auto& [id, t] : table.scores) {
      EXPECT_GE(t, 0.05);
      EXPECT_LE(t, 1.0);
    }
  }
}

TEST(PrototypeTable, JsonRoundTripAndMissingId) {
  PrototypeTable t;
  t.alpha = 0.3;
  t.source = "init";
  t.prototypes = {{{1.5, -2}, {0, 1}}, {{3, 4}, {5, 6}}};
  t.scores = {{"a", 0.25}, {"b", 0.75}};
  const auto path = std::filesystem::temp_directory_path() / "mkd_proto.json";
  write_prototype_table(path.string(), t);
  const auto j = nlohmann::json::parse(std::ifstream(path));
  for (const char* key : {"alpha", "source", "prototypes", "scores"}) EXPECT_TRUE(j.contains(key)) << key;
  const auto back = read_prototype_table(path.string());
  EXPECT_EQ(back.prototypes, t.prototypes);
  EXPECT_EQ(back.scores, t.scores);
  EXPECT_EQ(back.alpha, 0.3);
  EXPECT_THROW(back.score("zzz"), std::out_of_range);
  EXPECT_DOUBLE_EQ(back.mean_score(), 0.5);
}

TEST(TeacherLoss, MatchesWeightedCrossEntropyPlusCorruption) {
  auto f = make_fixture();
  Encoder model(enc_for(f.vocab, 3), 6);
  auto rows = f.data.pooled_train();
  rows.resize(12);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].domain = static_cast<int>(i % 3);
  std::mt19937_64 rng(1);
  std::vector<const TokenizedExample*> ptrs;
  for (auto& r : rows) ptrs.push_back(&r);
  const Batch b = collate(ptrs, true, &rng);
  const auto tr = model.encode(b);
  std::vector<double> t(b.size);
  for (std::size_t i = 0; i < b.size; ++i) t[i] = 0.1 + 0.07 * static_cast<double>(i);
  long double ce = 0, dc = 0;
  const auto lg = tr.class_logits.data(), dl = tr.domain_logits.data();
  for (std::size_t i = 0; i < b.size; ++i) {
    const long double mx = std::max(lg[i * 2], lg[i * 2 + 1]);
    const long double lse = mx + std::log(std::exp(lg[i * 2] - mx) + std::exp(lg[i * 2 + 1] - mx));
    ce += t[i] * (lse - lg[i * 2 + static_cast<std::size_t>(b.class_labels[i])]);
    if (b.corrupted_domain_labels[i] != b.domain_labels[i]) {
      long double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += std::exp(static_cast<long double>(dl[i * 3 + c]));
      dc += std::log(s) - dl[i * 3 + static_cast<std::size_t>(b.corrupted_domain_labels[i])];
    }
  }
  const double n = static_cast<double>(b.size);
  EXPECT_NEAR(teacher_loss(b, tr, t, 0.0).item(), static_cast<double>(ce / n), 1e-12);
  EXPECT_NEAR(teacher_loss(b, tr, t, 0.4).item(), static_cast<double>(ce / n + 0.4L * dc / n), 1e-12);
}

TEST(TeacherMode, ParseAndNames) {
  EXPECT_EQ(parse_teacher_mode("meta"), TeacherMode::meta);
  EXPECT_EQ(parse_teacher_mode("mix"), TeacherMode::mix);
  EXPECT_STREQ(teacher_mode_name(TeacherMode::single), "single");
  EXPECT_THROW(parse_teacher_mode("multi"), std::invalid_argument);
}

TEST(TeacherConfig, JsonRoundTripAndValidation) {
  TeacherConfig c;
  c.alpha = 0.7;
  c.gamma1 = 0.1;
  c.epochs = 9;
  const TeacherConfig back = nlohmann::json(c).get<TeacherConfig>();
  EXPECT_EQ(back.alpha, 0.7);
  EXPECT_EQ(back.gamma1, 0.1);
  EXPECT_EQ(back.epochs, 9u);
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainTeacher, RosterSizeChecks) {
  auto f = make_fixture();
  TeacherData one;
  one.domain_names = {f.data.domain_names[0]};
  one.train = {f.data.train[0]};
  one.dev = {f.data.dev[0]};
  EXPECT_THROW(train_teacher(one, enc_for(f.vocab, 3), quick(1), TeacherMode::meta), std::invalid_argument);
  EXPECT_THROW(train_teacher(f.data, enc_for(f.vocab, 3), quick(1), TeacherMode::single), std::invalid_argument);
}

TEST(TrainTeacher, MetaLearnsAndIsDeterministic) {
  auto f = make_fixture(120);
  const auto a = train_teacher(f.data, enc_for(f.vocab, 3), quick(3), TeacherMode::meta);
  const auto b = train_teacher(f.data, enc_for(f.vocab, 3), quick(3), TeacherMode::meta);
  ASSERT_TRUE(a.table.has_value());
  EXPECT_EQ(a.table->scores.size(), 360u);
  EXPECT_EQ(a.history.size(), 3u);
  EXPECT_GT(a.history.at(a.best_epoch - 1).mean_dev_accuracy, 0.6);
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    const auto x = a.model.params().all()[i].tensor.data(), y = b.model.params().all()[i].tensor.data();
    for (std::size_t j = 0; j < x.size(); ++j) ASSERT_EQ(x[j], y[j]);
  }
}

TEST(TrainTeacher, BaselinesLeaveDomainHeadUntouched) {
  auto f = make_fixture();
  auto cfg = quick(1);
  const Encoder init(enc_for(f.vocab, 3), cfg.seed);
  const auto r = train_teacher(f.data, enc_for(f.vocab, 3), cfg, TeacherMode::mix);
  EXPECT_FALSE(r.table.has_value());
  for (const auto& p : r.model.params().all()) {
    if (p.name.rfind("domain.", 0) != 0) continue;
    const auto before = init.params().at(p.name).tensor.data();
    for (std::size_t j = 0; j < before.size(); ++j) ASSERT_EQ(before[j], p.tensor[j]) << p.name;
  }
}

TEST(TrainTeacher, DevSelectionRestoresBestEpoch) {
  auto f = make_fixture();
  const auto r = train_teacher(f.data, enc_for(f.vocab, 3), quick(3), TeacherMode::mix);
  double best = -1;
  for (const auto& h : r.history) best = std::max(best, h.mean_dev_accuracy);
  EXPECT_EQ(r.history.at(r.best_epoch - 1).mean_dev_accuracy, best);
  double now = 0;
  for (const auto& dev : f.data.dev) now += accuracy(r.model, dev) / 3.0;
  EXPECT_NEAR(now, best, 1e-12);
}
