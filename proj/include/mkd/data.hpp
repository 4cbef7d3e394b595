#pragma once

// Multi-domain labeled text: file ingestion, a synthetic multi-domain task
// generator, whitespace tokenization, batching with in-batch domain-label
// corruption, stratified subsampling, and an audited access layer that
// records which (domain, split, labels?) every consumer touched.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "mkd/batch.hpp"

namespace mkd {

// ---------------------------------------------------------------- corpus types

enum class Split { train, dev, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

struct Example {
  std::string id;
  std::string text;
  std::string text2;  // empty for single-sentence tasks
  int label = 0;
  int domain = 0;

  bool operator==(const Example&) const = default;
};

struct DomainCorpus {
  std::string name;
  std::vector<Example> train, dev, test;

  std::vector<Example>& split(Split s) { return s == Split::train ? train : s == Split::dev ? dev : test; }
  const std::vector<Example>& split(Split s) const { return s == Split::train ? train : s == Split::dev ? dev : test; }

  /// Checks label ranges, non-empty text, disjoint split ids, and that every
  /// class occurs in train.
  void validate(std::size_t num_classes) const {
    std::set<std::string> ids;
    for (Split s : {Split::train, Split::dev, Split::test}) {
      for (const auto& e : split(s)) {
        if (e.text.empty()) throw std::invalid_argument(name + ": example '" + e.id + "' has empty text");
        if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_classes) {
          throw std::invalid_argument(name + ": example '" + e.id + "' label " + std::to_string(e.label) +
                                      " outside [0, " + std::to_string(num_classes) + ")");
        }
        if (!ids.insert(e.id).second) throw std::invalid_argument(name + ": id '" + e.id + "' appears in two splits");
      }
    }
    std::vector<bool> seen(num_classes, false);
    for (const auto& e : train) seen[static_cast<std::size_t>(e.label)] = true;
    for (std::size_t m = 0; m < num_classes; ++m)
      if (!seen[m]) throw std::invalid_argument(name + ": class " + std::to_string(m) + " absent from train");
  }
};

// ---------------------------------------------------------------- file formats

enum class FileFormat { jsonl, tsv };

inline FileFormat format_from_path(const std::string& path) {
  return std::filesystem::path(path).extension() == ".tsv" ? FileFormat::tsv : FileFormat::jsonl;
}

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline int parse_int_field(const std::string& s, const std::string& what, const std::string& where) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    throw IngestError(where + ": " + what + " '" + s + "' is not an integer");
  }
  if (pos != s.size()) throw IngestError(where + ": " + what + " '" + s + "' is not an integer");
  return v;
}

}  // namespace detail

/// Reads one JSONL or TSV file. Rows are returned sorted by id. Errors carry
/// the file name and 1-based line number.
inline std::vector<Example> read_examples(const std::string& path, FileFormat fmt, std::size_t num_classes = 0) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open " + path);
  std::vector<Example> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  auto check = [&](Example& e, const std::string& where) {
    if (e.id.empty()) throw IngestError(where + ": empty id");
    if (e.text.empty()) throw IngestError(where + ": empty text");
    if (e.label < 0 || (num_classes > 0 && static_cast<std::size_t>(e.label) >= num_classes)) {
      throw IngestError(where + ": bad label " + std::to_string(e.label));
    }
    if (e.domain < 0) throw IngestError(where + ": bad domain " + std::to_string(e.domain));
    if (!ids.insert(e.id).second) throw IngestError(where + ": duplicate id '" + e.id + "'");
    out.push_back(std::move(e));
  };

  if (fmt == FileFormat::tsv) {
    if (!std::getline(f, line)) throw IngestError(path + ": missing header");
    ++lineno;
    const auto header = detail::split_tabs(line);
    const std::vector<std::string> expected{"id", "text", "text2", "label", "domain"};
    if (header != expected) throw IngestError(path + ":1: header must be id\\ttext\\ttext2\\tlabel\\tdomain");
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      const std::string where = path + ":" + std::to_string(lineno);
      auto cols = detail::split_tabs(line);
      if (cols.size() != 5) throw IngestError(where + ": expected 5 columns, got " + std::to_string(cols.size()));
      Example e{cols[0], cols[1], cols[2], detail::parse_int_field(cols[3], "label", where),
                detail::parse_int_field(cols[4], "domain", where)};
      check(e, where);
    }
  } else {
    while (std::getline(f, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = path + ":" + std::to_string(lineno);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& ex) {
        throw IngestError(where + ": invalid JSON (" + ex.what() + ")");
      }
      for (const char* key : {"id", "text", "label", "domain"})
        if (!j.contains(key)) throw IngestError(where + ": missing column '" + key + "'");
      if (!j["label"].is_number_integer()) throw IngestError(where + ": bad label " + j["label"].dump());
      if (!j["domain"].is_number_integer()) throw IngestError(where + ": bad domain " + j["domain"].dump());
      if (!j["id"].is_string() || !j["text"].is_string()) throw IngestError(where + ": id and text must be strings");
      Example e{j["id"].get<std::string>(), j["text"].get<std::string>(), j.value("text2", std::string{}),
                j["label"].get<int>(), j["domain"].get<int>()};
      check(e, where);
    }
  }
  std::sort(out.begin(), out.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
  return out;
}

/// Wraps a single file as one split of a corpus.
inline DomainCorpus ingest(const std::string& path, FileFormat fmt, Split into = Split::train, std::size_t num_classes = 0) {
  DomainCorpus c;
  c.name = std::filesystem::path(path).stem().string();
  c.split(into) = read_examples(path, fmt, num_classes);
  return c;
}

inline void write_examples(const std::string& path, std::span<const Example> rows, FileFormat fmt) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  if (fmt == FileFormat::tsv) {
    f << "id\ttext\ttext2\tlabel\tdomain\n";
    for (const auto& e : rows) {
      for (const auto* s : {&e.id, &e.text, &e.text2})
        if (s->find_first_of("\t\n") != std::string::npos) throw std::invalid_argument("TSV field contains tab/newline in '" + e.id + "'");
      f << e.id << '\t' << e.text << '\t' << e.text2 << '\t' << e.label << '\t' << e.domain << '\n';
    }
  } else {
    for (const auto& e : rows) {
      nlohmann::json j{{"id", e.id}, {"text", e.text}, {"label", e.label}, {"domain", e.domain}};
      if (!e.text2.empty()) j["text2"] = e.text2;
      f << j.dump() << '\n';
    }
  }
}

// ---------------------------------------------------------------- synthetic task

/// Generator for a controllable multi-domain classification task. Each
/// content token is class-indicative with probability signal_rate; an
/// indicative token comes from the cross-domain shared region with
/// probability shared_signal and from the domain's private region otherwise,
/// and points at the true class with probability 1 - token_noise. Remaining
/// tokens are filler, domain-specific with probability domain_noise.
struct SynthSpec {
  std::size_t num_domains = 3;
  std::size_t num_classes = 2;
  std::size_t train_size = 600;
  std::size_t dev_size = 100;
  std::size_t test_size = 100;
  double shared_signal = 0.8;
  double domain_noise = 0.5;
  std::uint64_t seed = 0;

  std::size_t shared_tokens_per_class = 150;
  std::size_t private_tokens_per_class = 150;
  std::size_t common_filler_tokens = 100;
  std::size_t domain_filler_tokens = 100;
  std::size_t min_len = 8;
  std::size_t max_len = 12;
  double signal_rate = 0.4;
  double token_noise = 0.25;
  double zipf_exponent = 1.0;

  void validate() const {
    if (num_domains < 1 || num_classes < 2) throw std::invalid_argument("synth: need >= 1 domain and >= 2 classes");
    const std::size_t floor = num_classes * 5;
    if (train_size < floor || dev_size < floor || test_size < floor) {
      throw std::invalid_argument("synth: every split needs at least " + std::to_string(floor) + " examples");
    }
    if (shared_signal < 0.0 || shared_signal > 1.0) throw std::invalid_argument("synth: shared_signal outside [0, 1]");
    if (domain_noise < 0.0 || domain_noise > 1.0) throw std::invalid_argument("synth: domain_noise outside [0, 1]");
    if (token_noise < 0.0 || token_noise >= 1.0) throw std::invalid_argument("synth: token_noise outside [0, 1)");
    if (signal_rate <= 0.0 || signal_rate > 1.0) throw std::invalid_argument("synth: signal_rate outside (0, 1]");
    if (min_len < 1 || max_len < min_len) throw std::invalid_argument("synth: bad length range");
    if (shared_tokens_per_class == 0 || private_tokens_per_class == 0) throw std::invalid_argument("synth: empty token region");
    if (common_filler_tokens == 0 || domain_filler_tokens == 0) throw std::invalid_argument("synth: empty filler region");
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"num_domains", s.num_domains},
       {"num_classes", s.num_classes},
       {"train_size", s.train_size},
       {"dev_size", s.dev_size},
       {"test_size", s.test_size},
       {"shared_signal", s.shared_signal},
       {"domain_noise", s.domain_noise},
       {"seed", s.seed},
       {"shared_tokens_per_class", s.shared_tokens_per_class},
       {"private_tokens_per_class", s.private_tokens_per_class},
       {"common_filler_tokens", s.common_filler_tokens},
       {"domain_filler_tokens", s.domain_filler_tokens},
       {"min_len", s.min_len},
       {"max_len", s.max_len},
       {"signal_rate", s.signal_rate},
       {"token_noise", s.token_noise},
       {"zipf_exponent", s.zipf_exponent}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  const SynthSpec d = s;
#define MKD_GET(f) s.f = j.value(#f, d.f)
  MKD_GET(num_domains);
  MKD_GET(num_classes);
  MKD_GET(train_size);
  MKD_GET(dev_size);
  MKD_GET(test_size);
  MKD_GET(shared_signal);
  MKD_GET(domain_noise);
  MKD_GET(seed);
  MKD_GET(shared_tokens_per_class);
  MKD_GET(private_tokens_per_class);
  MKD_GET(common_filler_tokens);
  MKD_GET(domain_filler_tokens);
  MKD_GET(min_len);
  MKD_GET(max_len);
  MKD_GET(signal_rate);
  MKD_GET(token_noise);
  MKD_GET(zipf_exponent);
#undef MKD_GET
}

inline std::string synth_domain_name(std::size_t k) { return "dom" + std::to_string(k); }

inline std::vector<DomainCorpus> synth_multidomain(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  auto zipf = [&](std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf_exponent);
    return std::discrete_distribution<std::size_t>(w.begin(), w.end());
  };
  auto shared_pick = zipf(spec.shared_tokens_per_class);
  auto private_pick = zipf(spec.private_tokens_per_class);
  auto common_pick = zipf(spec.common_filler_tokens);
  auto dfill_pick = zipf(spec.domain_filler_tokens);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len_pick(spec.min_len, spec.max_len);
  std::uniform_int_distribution<std::size_t> other_class(1, spec.num_classes - 1);

  auto make_text = [&](std::size_t k, std::size_t y) {
    const std::size_t len = len_pick(rng);
    std::string text;
    for (std::size_t t = 0; t < len; ++t) {
      std::string tok;
      if (u(rng) < spec.signal_rate) {
        std::size_t cls = y;
        if (u(rng) < spec.token_noise) cls = (y + other_class(rng)) % spec.num_classes;
        if (u(rng) < spec.shared_signal) {
          tok = "s" + std::to_string(cls) + "_" + std::to_string(shared_pick(rng));
        } else {
          tok = "p" + std::to_string(k) + "c" + std::to_string(cls) + "_" + std::to_string(private_pick(rng));
        }
      } else if (u(rng) < spec.domain_noise) {
        tok = "f" + std::to_string(k) + "_" + std::to_string(dfill_pick(rng));
      } else {
        tok = "w" + std::to_string(common_pick(rng));
      }
      if (!text.empty()) text.push_back(' ');
      text += tok;
    }
    return text;
  };

  std::vector<DomainCorpus> out(spec.num_domains);
  for (std::size_t k = 0; k < spec.num_domains; ++k) {
    out[k].name = synth_domain_name(k);
    for (Split s : {Split::train, Split::dev, Split::test}) {
      const std::size_t n = s == Split::train ? spec.train_size : s == Split::dev ? spec.dev_size : spec.test_size;
      std::vector<std::size_t> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.num_classes;
      std::shuffle(labels.begin(), labels.end(), rng);
      auto& rows = out[k].split(s);
      rows.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "%s-%s-%05zu", out[k].name.c_str(), split_name(s), i);
        rows.push_back({idbuf, make_text(k, labels[i]), "", static_cast<int>(labels[i]), static_cast<int>(k)});
      }
    }
  }
  return out;
}

/// Writes one JSONL per domain per split plus manifest.json.
inline void write_corpus_dir(const std::string& dir, const std::vector<DomainCorpus>& corpora, const nlohmann::json& generation) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "jsonl"}, {"generation", generation}, {"domains", nlohmann::json::array()}};
  for (const auto& c : corpora) {
    nlohmann::json d{{"name", c.name}};
    for (Split s : {Split::train, Split::dev, Split::test}) {
      const std::string file = c.name + "." + split_name(s) + ".jsonl";
      write_examples((std::filesystem::path(dir) / file).string(), c.split(s), FileFormat::jsonl);
      d[split_name(s)] = file;
    }
    manifest["domains"].push_back(d);
  }
  std::ofstream(std::filesystem::path(dir) / "manifest.json") << manifest.dump(2) << '\n';
}

inline std::vector<DomainCorpus> read_corpus_dir(const std::string& dir, std::size_t num_classes = 0) {
  std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
  if (!mf) throw IngestError("no manifest.json in " + dir);
  const auto manifest = nlohmann::json::parse(mf);
  std::vector<DomainCorpus> out;
  for (const auto& d : manifest.at("domains")) {
    DomainCorpus c;
    c.name = d.at("name").get<std::string>();
    for (Split s : {Split::train, Split::dev, Split::test}) {
      const auto file = (std::filesystem::path(dir) / d.at(split_name(s)).get<std::string>()).string();
      c.split(s) = read_examples(file, format_from_path(file), num_classes);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------- tokenization

class Vocab {
 public:
  Vocab() {
    for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[UNK]"}) add(t);
  }

  /// Frequency-ranked whitespace vocabulary (ties broken lexicographically),
  /// capped at `budget` entries including the four reserved ones.
  static Vocab build(const std::vector<std::string>& texts, std::size_t budget) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts)
      for (const auto& tok : whitespace_split(t)) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, n] : ranked) {
      if (v.size() >= budget) break;
      v.add(tok);
    }
    return v;
  }

  static std::vector<std::string> whitespace_split(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
  }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& toks) {
    Vocab v;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (i < static_cast<std::size_t>(kNumReserved)) {
        if (toks[i] != v.tokens_[i]) throw std::invalid_argument("vocab: reserved id " + std::to_string(i) + " reassigned");
        continue;
      }
      v.add(toks[i]);
    }
    return v;
  }

 private:
  void add(const std::string& tok) {
    if (index_.count(tok)) return;
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TokenizedExample {
  std::string id;
  std::vector<int> ids;
  int label = 0;
  int domain = 0;
};

struct TokenizedCorpus {
  std::string name;
  std::vector<TokenizedExample> train, dev, test;

  std::vector<TokenizedExample>& split(Split s) { return s == Split::train ? train : s == Split::dev ? dev : test; }
  const std::vector<TokenizedExample>& split(Split s) const {
    return s == Split::train ? train : s == Split::dev ? dev : test;
  }
};

/// [CLS] a... [SEP] (b... [SEP]), truncated longest-first to max_len.
inline std::vector<int> encode_text(const Vocab& vocab, const std::string& text, const std::string& text2, std::size_t max_len) {
  std::vector<int> a, b;
  for (const auto& t : Vocab::whitespace_split(text)) a.push_back(vocab.id(t));
  for (const auto& t : Vocab::whitespace_split(text2)) b.push_back(vocab.id(t));
  const bool pair = !text2.empty();
  const std::size_t reserved = pair ? 3 : 2;
  if (max_len < reserved) throw std::invalid_argument("encode_text: max_len too small for special tokens");
  while (a.size() + b.size() + reserved > max_len) {
    if (a.size() >= b.size()) a.pop_back();
    else b.pop_back();
  }
  std::vector<int> ids{kClsId};
  ids.insert(ids.end(), a.begin(), a.end());
  ids.push_back(kSepId);
  if (pair) {
    ids.insert(ids.end(), b.begin(), b.end());
    ids.push_back(kSepId);
  }
  return ids;
}

inline TokenizedExample tokenize_example(const Vocab& vocab, const Example& e, std::size_t max_len) {
  return {e.id, encode_text(vocab, e.text, e.text2, max_len), e.label, e.domain};
}

/// Builds the vocabulary from train texts only and tokenizes every split.
inline std::pair<Vocab, std::vector<TokenizedCorpus>> tokenize(const std::vector<DomainCorpus>& corpora, std::size_t vocab_budget,
                                                               std::size_t max_len) {
  std::vector<std::string> texts;
  for (const auto& c : corpora)
    for (const auto& e : c.train) {
      texts.push_back(e.text);
      if (!e.text2.empty()) texts.push_back(e.text2);
    }
  Vocab vocab = Vocab::build(texts, vocab_budget);
  std::vector<TokenizedCorpus> out;
  for (const auto& c : corpora) {
    TokenizedCorpus t;
    t.name = c.name;
    for (Split s : {Split::train, Split::dev, Split::test})
      for (const auto& e : c.split(s)) t.split(s).push_back(tokenize_example(vocab, e, max_len));
    out.push_back(std::move(t));
  }
  return {std::move(vocab), std::move(out)};
}

// ---------------------------------------------------------------- batching

/// In-batch shuffle of domain labels that prefers derangements: up to ten
/// random permutations are tried; if none avoids every z_i == d_i but one
/// exists (no label holds more than half the batch), a shifted
/// sorted-order assignment is used. Otherwise the permutation with the
/// fewest fixed labels wins.
inline std::vector<int> corrupt_domains(std::span<const int> domains, std::mt19937_64& rng) {
  const std::size_t n = domains.size();
  std::vector<int> d(domains.begin(), domains.end());
  if (n < 2) return d;
  auto fixed = [&](const std::vector<int>& z) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) c += z[i] == d[i] ? 1 : 0;
    return c;
  };
  std::vector<int> best = d;
  std::size_t best_fixed = n + 1;
  for (int attempt = 0; attempt < 10; ++attempt) {
    std::vector<int> z = d;
    std::shuffle(z.begin(), z.end(), rng);
    const std::size_t f = fixed(z);
    if (f < best_fixed) {
      best = z;
      best_fixed = f;
    }
    if (f == 0) return z;
  }
  std::map<int, std::size_t> counts;
  for (int x : d) ++counts[x];
  std::size_t max_count = 0;
  for (const auto& [k, c] : counts) max_count = std::max(max_count, c);
  if (max_count * 2 <= n) {
    // Sort positions by label (random order within a label) and hand each
    // position the label sitting max_count places further along.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    std::vector<int> z(n);
    for (std::size_t i = 0; i < n; ++i) z[order[i]] = d[order[(i + max_count) % n]];
    return z;
  }
  return best;
}

inline Batch collate(std::span<const TokenizedExample* const> rows, bool corrupt, std::mt19937_64* rng) {
  Batch b;
  b.size = rows.size();
  for (const auto* r : rows) b.seq_len = std::max(b.seq_len, r->ids.size());
  b.token_ids.assign(b.size * b.seq_len, kPadId);
  b.mask.assign(b.size * b.seq_len, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = *rows[i];
    for (std::size_t t = 0; t < r.ids.size(); ++t) {
      b.token_ids[i * b.seq_len + t] = r.ids[t];
      b.mask[i * b.seq_len + t] = 1;
    }
    b.class_labels.push_back(r.label);
    b.domain_labels.push_back(r.domain);
    b.ids.push_back(r.id);
  }
  b.corrupted_domain_labels =
      corrupt && rng ? corrupt_domains(b.domain_labels, *rng) : b.domain_labels;
  return b;
}

inline Batch collate(std::span<const TokenizedExample> rows) {
  std::vector<const TokenizedExample*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  return collate(ptrs, false, nullptr);
}

enum class BatchMode { mixed, single_domain };

/// One epoch: every example exactly once, order shuffled by `rng`.
inline std::vector<Batch> make_batches(std::span<const TokenizedExample> rows, std::size_t batch_size, std::mt19937_64& rng,
                                       BatchMode mode = BatchMode::mixed, bool corrupt = false) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be positive");
  if (corrupt && batch_size < 2) throw std::invalid_argument("make_batches: corruption needs batch_size >= 2");
  std::vector<std::vector<const TokenizedExample*>> groups;
  if (mode == BatchMode::mixed) {
    groups.emplace_back();
    for (const auto& r : rows) groups.back().push_back(&r);
  } else {
    std::map<int, std::size_t> slot;
    for (const auto& r : rows) {
      auto [it, fresh] = slot.emplace(r.domain, groups.size());
      if (fresh) groups.emplace_back();
      groups[it->second].push_back(&r);
    }
  }
  std::vector<std::vector<const TokenizedExample*>> chunks;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    for (std::size_t i = 0; i < g.size(); i += batch_size)
      chunks.emplace_back(g.begin() + static_cast<std::ptrdiff_t>(i),
                          g.begin() + static_cast<std::ptrdiff_t>(std::min(g.size(), i + batch_size)));
  }
  if (mode == BatchMode::single_domain) std::shuffle(chunks.begin(), chunks.end(), rng);
  std::vector<Batch> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) out.push_back(collate(c, corrupt, &rng));
  return out;
}

/// Fixed-order batches for evaluation.
inline std::vector<Batch> eval_batches(std::span<const TokenizedExample> rows, std::size_t batch_size) {
  std::vector<Batch> out;
  for (std::size_t i = 0; i < rows.size(); i += batch_size)
    out.push_back(collate(rows.subspan(i, std::min(batch_size, rows.size() - i))));
  return out;
}

// ---------------------------------------------------------------- subsampling

/// Class-stratified sample of ceil(rate * n) rows; per-class quotas use
/// largest remainders so ratios hold within one example.
template <class Row>
std::vector<Row> subsample(std::span<const Row> rows, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("subsample: rate must be in (0, 1]");
  if (rate == 1.0) return {rows.begin(), rows.end()};
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < rows.size(); ++i) by_class[rows[i].label].push_back(i);
  const auto total = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(rows.size()) - 1e-9));
  std::vector<std::pair<int, std::size_t>> quota;
  std::vector<std::pair<double, int>> remainders;
  std::size_t assigned = 0;
  for (const auto& [cls, idx] : by_class) {
    const double exact = static_cast<double>(total) * static_cast<double>(idx.size()) / static_cast<double>(rows.size());
    const auto q = static_cast<std::size_t>(std::floor(exact));
    quota.emplace_back(cls, q);
    remainders.emplace_back(exact - static_cast<double>(q), cls);
    assigned += q;
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total && i < remainders.size(); ++i, ++assigned)
    for (auto& [cls, q] : quota)
      if (cls == remainders[i].second) ++q;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  for (const auto& [cls, q] : quota) {
    if (q == 0) throw std::invalid_argument("subsample: class " + std::to_string(cls) + " would receive no samples at rate " + std::to_string(rate));
    auto idx = by_class[cls];
    std::shuffle(idx.begin(), idx.end(), rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(q, idx.size())));
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<Row> out;
  for (auto i : chosen) out.push_back(rows[i]);
  return out;
}

/// Subsamples the train split only.
inline DomainCorpus subsample(const DomainCorpus& c, double rate, std::uint64_t seed) {
  DomainCorpus out = c;
  out.train = subsample<Example>(c.train, rate, seed);
  return out;
}

// ---------------------------------------------------------------- audit

enum class Access { inputs, labels };

class HygieneViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ReadEvent {
  std::string context;
  bool evaluation = false;
  std::size_t domain = 0;
  Split split = Split::train;
  Access access = Access::inputs;
};

/// Records every data read and enforces: no test-split reads outside an
/// evaluation scope, plus any caller-installed label bans.
class DataAudit {
 public:
  struct LabelBan {
    std::size_t domain;
    std::vector<Split> splits;
  };

  void record(std::size_t domain, Split split, Access access) {
    ReadEvent ev{context_, evaluation_, domain, split, access};
    events_.push_back(ev);
    if (split == Split::test && !evaluation_) {
      throw HygieneViolation("test split of domain " + std::to_string(domain) + " read during '" + context_ + "'");
    }
    if (access == Access::labels && !evaluation_) {
      for (const auto& ban : bans_)
        if (ban.domain == domain && std::find(ban.splits.begin(), ban.splits.end(), split) != ban.splits.end())
          throw HygieneViolation(std::string("labels of ") + split_name(split) + " split of domain " + std::to_string(domain) +
                                 " read during '" + context_ + "'");
    }
  }

  const std::vector<ReadEvent>& events() const { return events_; }
  std::size_t violations_checked() const { return events_.size(); }

  class Scope {
   public:
    Scope(DataAudit& a, std::string context, bool evaluation)
        : a_(a), prev_ctx_(a.context_), prev_eval_(a.evaluation_) {
      a_.context_ = std::move(context);
      a_.evaluation_ = evaluation;
    }
    ~Scope() {
      a_.context_ = prev_ctx_;
      a_.evaluation_ = prev_eval_;
    }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    DataAudit& a_;
    std::string prev_ctx_;
    bool prev_eval_;
  };

  class BanScope {
   public:
    BanScope(DataAudit& a, LabelBan ban) : a_(a) { a_.bans_.push_back(std::move(ban)); }
    ~BanScope() { a_.bans_.pop_back(); }
    BanScope(const BanScope&) = delete;
    BanScope& operator=(const BanScope&) = delete;

   private:
    DataAudit& a_;
  };

  Scope training(std::string context) { return Scope(*this, std::move(context), false); }
  Scope evaluation(std::string context) { return Scope(*this, std::move(context), true); }

 private:
  std::vector<ReadEvent> events_;
  std::vector<LabelBan> bans_;
  std::string context_ = "unscoped";
  bool evaluation_ = false;
};

/// Tokenized corpora behind the audit. Every accessor logs the read.
class AuditedData {
 public:
  AuditedData(std::vector<TokenizedCorpus> corpora, DataAudit& audit) : corpora_(std::move(corpora)), audit_(&audit) {}

  std::size_t num_domains() const { return corpora_.size(); }
  const std::string& name(std::size_t k) const { return corpora_.at(k).name; }
  DataAudit& audit() const { return *audit_; }

  std::span<const TokenizedExample> labeled(std::size_t k, Split s) const {
    audit_->record(k, s, Access::labels);
    return corpora_.at(k).split(s);
  }

  /// Copies with class labels replaced by kHiddenLabel.
  std::vector<TokenizedExample> inputs(std::size_t k, Split s) const {
    audit_->record(k, s, Access::inputs);
    std::vector<TokenizedExample> out(corpora_.at(k).split(s).begin(), corpora_.at(k).split(s).end());
    for (auto& e : out) e.label = kHiddenLabel;
    return out;
  }

 private:
  std::vector<TokenizedCorpus> corpora_;
  DataAudit* audit_;
};

}  // namespace mkd
