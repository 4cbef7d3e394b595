#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "mkd/mkd.hpp"

using namespace mkd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(MKD_TEST_TMP) / "data";
  fs::create_directories(dir);
  return dir / name;
}

void write_file(const fs::path& p, const std::string& body) { std::ofstream(p) << body; }

std::string ingest_error(const fs::path& p, FileFormat fmt, std::size_t m = 0) {
  try {
    read_examples(p.string(), fmt, m);
  } catch (const IngestError& e) {
    return e.what();
  }
  return "";
}

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.train_size = 60;
  s.dev_size = 20;
  s.test_size = 20;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Ingest, JsonlRoundTripSortsById) {
  const auto p = scratch("ok.jsonl");
  write_file(p, R"({"id":"b","text":"x y","label":1,"domain":0}
{"id":"a","text":"z","text2":"w","label":0,"domain":2}
)");
  const auto rows = read_examples(p.string(), FileFormat::jsonl, 2);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].id, "a");
  EXPECT_EQ(rows[0].text2, "w");
  EXPECT_EQ(rows[1].label, 1);
}

TEST(Ingest, ErrorsCarryLineNumbers) {
  const auto p = scratch("bad.jsonl");
  write_file(p, "{\"id\":\"a\",\"text\":\"x\",\"label\":0,\"domain\":0}\n{\"id\":\"b\",\"text\":\"x\",\"domain\":0}\n");
  const auto msg = ingest_error(p, FileFormat::jsonl);
  EXPECT_NE(msg.find(":2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("label"), std::string::npos) << msg;
}

TEST(Ingest, RejectsDuplicateIdsAndOutOfRangeLabels) {
  const auto p = scratch("dup.jsonl");
  write_file(p, "{\"id\":\"a\",\"text\":\"x\",\"label\":0,\"domain\":0}\n{\"id\":\"a\",\"text\":\"y\",\"label\":1,\"domain\":0}\n");
  EXPECT_NE(ingest_error(p, FileFormat::jsonl).find("duplicate"), std::string::npos);
  const auto q = scratch("range.jsonl");
  write_file(q, "{\"id\":\"a\",\"text\":\"x\",\"label\":3,\"domain\":0}\n");
  EXPECT_NE(ingest_error(q, FileFormat::jsonl, 2).find("label"), std::string::npos);
  EXPECT_EQ(ingest_error(q, FileFormat::jsonl, 0), "");
}

TEST(Ingest, TsvHeaderAndColumns) {
  const auto p = scratch("ok.tsv");
  write_file(p, "id\ttext\ttext2\tlabel\tdomain\nr1\thello world\t\t1\t0\n");
  const auto rows = read_examples(p.string(), FileFormat::tsv);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].text, "hello world");
  const auto bad = scratch("bad.tsv");
  write_file(bad, "id\ttext\tlabel\nr1\tx\t1\n");
  EXPECT_NE(ingest_error(bad, FileFormat::tsv).find(":1"), std::string::npos);
  const auto cols = scratch("cols.tsv");
  write_file(cols, "id\ttext\ttext2\tlabel\tdomain\nr1\tx\t1\t0\n");
  EXPECT_NE(ingest_error(cols, FileFormat::tsv).find(":2"), std::string::npos);
}

TEST(Ingest, WriteReadRoundTrip) {
  const auto corpora = synth_multidomain(small_spec());
  for (auto fmt : {FileFormat::jsonl, FileFormat::tsv}) {
    const auto p = scratch(fmt == FileFormat::tsv ? "rt.tsv" : "rt.jsonl");
    write_examples(p.string(), corpora[1].train, fmt);
    const auto back = read_examples(p.string(), fmt, 2);
    ASSERT_EQ(back.size(), corpora[1].train.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      EXPECT_EQ(back[i].id, corpora[1].train[i].id);
      EXPECT_EQ(back[i].text, corpora[1].train[i].text);
      EXPECT_EQ(back[i].label, corpora[1].train[i].label);
    }
  }
}

TEST(Synth, DeterministicAndSized) {
  const auto a = synth_multidomain(small_spec(5)), b = synth_multidomain(small_spec(5)), c = synth_multidomain(small_spec(6));
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a[k].name, "dom" + std::to_string(k));
    EXPECT_EQ(a[k].train.size(), 60u);
    EXPECT_EQ(a[k].dev.size(), 20u);
    EXPECT_EQ(a[k].test.size(), 20u);
    for (std::size_t i = 0; i < a[k].train.size(); ++i) EXPECT_EQ(a[k].train[i].text, b[k].train[i].text);
    a[k].validate(2);
  }
  EXPECT_NE(a[0].train[0].text, c[0].train[0].text);
}

TEST(Synth, IdsUniqueAcrossSplitsAndDomains) {
  std::set<std::string> ids;
  std::size_t n = 0;
  for (const auto& c : synth_multidomain(small_spec()))
    for (Split s : {Split::train, Split::dev, Split::test})
      for (const auto& e : c.split(s)) {
        ids.insert(e.id);
        ++n;
      }
  EXPECT_EQ(ids.size(), n);
}

TEST(Synth, SharedSignalControlsCrossDomainTokens) {
  // with s = 1 no private class tokens appear; with s = 0 no shared ones
  auto count = [](double s, const std::string& prefix) {
    auto spec = small_spec();
    spec.shared_signal = s;
    std::size_t hits = 0;
    for (const auto& c : synth_multidomain(spec))
      for (const auto& e : c.train)
        for (const auto& t : Vocab::whitespace_split(e.text)) hits += t.rfind(prefix, 0) == 0 ? 1 : 0;
    return hits;
  };
  EXPECT_EQ(count(1.0, "p"), 0u);
  EXPECT_GT(count(1.0, "s"), 0u);
  EXPECT_EQ(count(0.0, "s"), 0u);
  EXPECT_GT(count(0.0, "p"), 0u);
}

TEST(Synth, SpecValidation) {
  auto s = small_spec();
  s.shared_signal = 1.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.min_len = 10;
  s.max_len = 5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Synth, CorpusDirRoundTrip) {
  const auto corpora = synth_multidomain(small_spec());
  const auto dir = scratch("corpus");
  fs::remove_all(dir);
  write_corpus_dir(dir.string(), corpora, nlohmann::json(small_spec()));
  for (const auto& c : corpora)
    for (Split s : {Split::train, Split::dev, Split::test})
      EXPECT_TRUE(fs::exists(dir / (c.name + "." + split_name(s) + ".jsonl")));
  std::ifstream mf(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  EXPECT_EQ(manifest.at("generation").at("seed"), 3);
  const auto back = read_corpus_dir(dir.string(), 2);
  ASSERT_EQ(back.size(), corpora.size());
  EXPECT_EQ(back[2].test.size(), corpora[2].test.size());
  EXPECT_EQ(back[2].test[0].text, corpora[2].test[0].text);
}

TEST(Vocab, FrequencyRankedWithLexicographicTies) {
  const auto v = Vocab::build({"b a c", "a b", "a"}, 100);
  ASSERT_EQ(v.size(), 7u);
  EXPECT_EQ(v.token(0), "[PAD]");
  EXPECT_EQ(v.token(kNumReserved), "a");
  EXPECT_EQ(v.token(kNumReserved + 1), "b");
  EXPECT_EQ(v.token(kNumReserved + 2), "c");
  EXPECT_EQ(v.id("zzz"), kUnkId);
  EXPECT_EQ(Vocab::build({"b a c", "a b", "a"}, 5).size(), 5u);
}

TEST(Vocab, FromTokensRoundTrip) {
  const auto v = Vocab::build({"x y y z"}, 100);
  const auto w = Vocab::from_tokens(v.tokens());
  for (const auto& t : {"x", "y", "z", "q"}) EXPECT_EQ(v.id(t), w.id(t));
}

TEST(Tokenize, SpecialTokensAndTruncation) {
  const auto v = Vocab::build({"a b c d e f"}, 100);
  const auto ids = encode_text(v, "a b c d e f", "", 5);
  ASSERT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids.front(), kClsId);
  EXPECT_EQ(ids.back(), kSepId);
  const auto pair = encode_text(v, "a b c d", "e f", 7);
  ASSERT_EQ(pair.size(), 7u);
  EXPECT_EQ(std::count(pair.begin(), pair.end(), kSepId), 2);
}

TEST(Tokenize, VocabularyComesFromTrainOnly) {
  std::vector<DomainCorpus> cs(1);
  cs[0].name = "d";
  cs[0].train = {{"t1", "alpha beta", "", 0, 0}};
  cs[0].test = {{"x1", "gamma", "", 0, 0}};
  const auto [v, tok] = tokenize(cs, 100, 8);
  EXPECT_EQ(v.id("gamma"), kUnkId);
  EXPECT_EQ(tok[0].test[0].ids[1], kUnkId);
}

TEST(Corruption, DerangementWhenPossible) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> d;
    const int n = 2 + trial % 9;
    for (int i = 0; i < n; ++i) d.push_back(static_cast<int>(rng() % 3));
    std::map<int, int> counts;
    for (int x : d) ++counts[x];
    int mx = 0;
    for (auto [k, c] : counts) mx = std::max(mx, c);
    const auto z = corrupt_domains(d, rng);
    auto zs = z, ds = d;
    std::sort(zs.begin(), zs.end());
    std::sort(ds.begin(), ds.end());
    EXPECT_EQ(zs, ds) << "corruption must permute the batch labels";
    if (2 * mx <= n) {
      for (int i = 0; i < n; ++i) EXPECT_NE(z[static_cast<std::size_t>(i)], d[static_cast<std::size_t>(i)]);
    }
  }
}

TEST(Corruption, SingleDomainBatchKeepsLabels) {
  std::mt19937_64 rng(2);
  const std::vector<int> d{1, 1, 1};
  EXPECT_EQ(corrupt_domains(d, rng), d);
}

TEST(Batching, EpochCoversEveryRowOnce) {
  const auto [v, tok] = tokenize(synth_multidomain(small_spec()), 4096, 16);
  std::vector<TokenizedExample> rows;
  for (const auto& c : tok) rows.insert(rows.end(), c.train.begin(), c.train.end());
  for (auto mode : {BatchMode::mixed, BatchMode::single_domain}) {
    std::mt19937_64 rng(3);
    std::multiset<std::string> seen;
    for (const auto& b : make_batches(rows, 16, rng, mode, true)) {
      EXPECT_LE(b.size, 16u);
      for (const auto& id : b.ids) seen.insert(id);
      if (mode == BatchMode::single_domain) {
        for (int d : b.domain_labels) EXPECT_EQ(d, b.domain_labels[0]);
      }
    }
    EXPECT_EQ(seen.size(), rows.size());
    EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), rows.size());
  }
}

TEST(Batching, PaddingMaskMatchesLengths) {
  std::vector<TokenizedExample> rows{{"a", {1, 5, 2}, 0, 0}, {"b", {1, 5, 6, 7, 2}, 1, 0}};
  const auto b = collate(rows);
  EXPECT_EQ(b.seq_len, 5u);
  EXPECT_EQ(std::accumulate(b.mask.begin(), b.mask.begin() + 5, 0), 3);
  EXPECT_EQ(b.token_ids[3], kPadId);
}

TEST(Subsample, StratifiedCeilingAndDeterministic) {
  std::vector<Example> rows;
  for (int i = 0; i < 100; ++i) rows.push_back({"r" + std::to_string(i), "x", "", i < 70 ? 0 : 1, 0});
  const auto a = subsample<Example>(rows, 0.05, 9), b = subsample<Example>(rows, 0.05, 9);
  ASSERT_EQ(a.size(), 5u);
  const auto ones = std::count_if(a.begin(), a.end(), [](const Example& e) { return e.label == 1; });
  EXPECT_GE(ones, 1);
  EXPECT_LE(std::abs(static_cast<double>(ones) - 1.5), 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].id, b[i].id);
  EXPECT_EQ(subsample<Example>(rows, 1.0, 9).size(), 100u);
  EXPECT_EQ(subsample<Example>(rows, 0.33, 9).size(), 33u);
}

TEST(Subsample, EmptyClassIsAnError) {
  std::vector<Example> rows;
  for (int i = 0; i < 100; ++i) rows.push_back({"r" + std::to_string(i), "x", "", i < 99 ? 0 : 1, 0});
  EXPECT_THROW(subsample<Example>(rows, 0.05, 1), std::invalid_argument);
  EXPECT_THROW(subsample<Example>(rows, 0.0, 1), std::invalid_argument);
}

TEST(Subsample, CorpusOnlyTouchesTrain) {
  const auto c = synth_multidomain(small_spec())[0];
  const auto s = subsample(c, 0.5, 1);
  EXPECT_EQ(s.train.size(), 30u);
  EXPECT_EQ(s.dev.size(), c.dev.size());
  EXPECT_EQ(s.test.size(), c.test.size());
}

TEST(Audit, TestReadOutsideEvaluationThrows) {
  DataAudit audit;
  auto [v, tok] = tokenize(synth_multidomain(small_spec()), 4096, 16);
  AuditedData data(std::move(tok), audit);
  {
    auto s = audit.training("train");
    EXPECT_NO_THROW(data.labeled(0, Split::train));
    EXPECT_THROW(data.labeled(0, Split::test), HygieneViolation);
    EXPECT_THROW(data.inputs(0, Split::test), HygieneViolation);
  }
  {
    auto s = audit.evaluation("eval");
    EXPECT_NO_THROW(data.labeled(0, Split::test));
  }
  ASSERT_FALSE(audit.events().empty());
  EXPECT_EQ(audit.events().back().context, "eval");
  EXPECT_TRUE(audit.events().back().evaluation);
}

TEST(Audit, LabelBanBlocksLabelsButNotInputs) {
  DataAudit audit;
  auto [v, tok] = tokenize(synth_multidomain(small_spec()), 4096, 16);
  AuditedData data(std::move(tok), audit);
  auto s = audit.training("zs");
  {
    DataAudit::BanScope ban(audit, {1, {Split::train, Split::dev}});
    EXPECT_THROW(data.labeled(1, Split::train), HygieneViolation);
    EXPECT_THROW(data.labeled(1, Split::dev), HygieneViolation);
    EXPECT_NO_THROW(data.labeled(0, Split::train));
    const auto in = data.inputs(1, Split::train);
    for (const auto& r : in) EXPECT_EQ(r.label, kHiddenLabel);
  }
  EXPECT_NO_THROW(data.labeled(1, Split::train));
}
