#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

namespace mkd {

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (key-sorted, compact) JSON text.
inline std::string config_hash(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

/// Deterministic child seed for a named sub-run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t z = fnv1a(tag) ^ (seed + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct ResultRecord {
  std::string protocol;
  std::string condition;
  std::string setting;  // protocol parameter point, e.g. "rate=0.05"; empty if none
  std::string domain;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double wall_time = 0.0;
  std::string config_hash;

  auto key() const { return std::tie(protocol, condition, setting, domain, seed); }
};

inline void to_json(nlohmann::json& j, const ResultRecord& r) {
  j = {{"protocol", r.protocol}, {"condition", r.condition}, {"setting", r.setting},   {"domain", r.domain},
       {"seed", r.seed},         {"accuracy", r.accuracy},   {"wall_time", r.wall_time}, {"config_hash", r.config_hash}};
}

inline void from_json(const nlohmann::json& j, ResultRecord& r) {
  r.protocol = j.at("protocol").get<std::string>();
  r.condition = j.at("condition").get<std::string>();
  r.setting = j.value("setting", std::string{});
  r.domain = j.at("domain").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.wall_time = j.value("wall_time", 0.0);
  r.config_hash = j.value("config_hash", std::string{});
}

class DuplicateRecord : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Append-only JSONL store; a second record with an existing
/// (protocol, condition, setting, domain, seed) key is rejected.
class RecordStore {
 public:
  explicit RecordStore(std::string path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_))
      for (const auto& r : load(path_)) keys_.insert(key_string(r));
  }

  void append(const ResultRecord& r) {
    std::lock_guard<std::mutex> lock(mu_);
    if (!keys_.insert(key_string(r)).second) {
      throw DuplicateRecord("record already stored for " + r.protocol + "/" + r.condition + "/" + r.setting + "/" + r.domain +
                            "/seed " + std::to_string(r.seed));
    }
    std::ofstream f(path_, std::ios::app);
    if (!f) throw std::runtime_error("cannot append to " + path_);
    f << nlohmann::json(r).dump() << '\n';
  }

  static std::vector<ResultRecord> load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open records " + path);
    std::vector<ResultRecord> out;
    std::string line;
    while (std::getline(f, line))
      if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<ResultRecord>());
    return out;
  }

  const std::string& path() const { return path_; }

 private:
  static std::string key_string(const ResultRecord& r) {
    return r.protocol + '\x1f' + r.condition + '\x1f' + r.setting + '\x1f' + r.domain + '\x1f' + std::to_string(r.seed);
  }

  std::string path_;
  std::set<std::string> keys_;
  std::mutex mu_;
};

}  // namespace mkd
