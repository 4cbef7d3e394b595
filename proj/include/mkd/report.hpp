#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mkd/records.hpp"

namespace mkd {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  r.n = v.size();
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

/// Per-seed average over domains for one (protocol, setting, condition).
inline std::map<std::uint64_t, double> seed_averages(const std::vector<ResultRecord>& records, const std::string& protocol,
                                                     const std::string& setting, const std::string& condition) {
  std::map<std::uint64_t, std::pair<double, std::size_t>> acc;
  for (const auto& r : records)
    if (r.protocol == protocol && r.setting == setting && r.condition == condition) {
      acc[r.seed].first += r.accuracy;
      ++acc[r.seed].second;
    }
  std::map<std::uint64_t, double> out;
  for (const auto& [s, v] : acc) out[s] = v.first / static_cast<double>(v.second);
  return out;
}

namespace detail {

template <class T>
std::vector<T> first_seen(const std::vector<ResultRecord>& rs, T ResultRecord::*field) {
  std::vector<T> out;
  std::set<T> seen;
  for (const auto& r : rs)
    if (seen.insert(r.*field).second) out.push_back(r.*field);
  return out;
}

inline std::string pm(const MeanStd& m) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << m.mean << " ± " << m.std;
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string short_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline double rate_of(const std::string& setting, const std::string& prefix) {
  return setting.rfind(prefix, 0) == 0 ? std::stod(setting.substr(prefix.size())) : NAN;
}

}  // namespace detail

/// Markdown tables (conditions × domains, mean ± std over seeds), one per
/// (protocol, setting). The Average column is the mean ± std of per-seed
/// domain averages.
inline std::string markdown_report(const std::vector<ResultRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::ostringstream os;
  const auto hashes = detail::first_seen(records, &ResultRecord::config_hash);
  auto seeds = detail::first_seen(records, &ResultRecord::seed);
  std::sort(seeds.begin(), seeds.end());
  os << "# Results\n\n";
  os << "config hash: ";
  for (std::size_t i = 0; i < hashes.size(); ++i) os << (i ? ", " : "") << '`' << hashes[i] << '`';
  os << "\n\nseeds: ";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? ", " : "") << seeds[i];
  os << "\n";

  std::vector<std::pair<std::string, std::string>> groups;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : records)
    if (seen.insert({r.protocol, r.setting}).second) groups.emplace_back(r.protocol, r.setting);

  for (const auto& [protocol, setting] : groups) {
    std::vector<ResultRecord> rs;
    for (const auto& r : records)
      if (r.protocol == protocol && r.setting == setting) rs.push_back(r);
    const auto conditions = detail::first_seen(rs, &ResultRecord::condition);
    const auto domains = detail::first_seen(rs, &ResultRecord::domain);
    os << "\n## " << protocol << (setting.empty() ? "" : " (" + setting + ")") << "\n\n| condition |";
    for (const auto& d : domains) os << ' ' << d << " |";
    os << " Average |\n|---|";
    for (std::size_t i = 0; i <= domains.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& c : conditions) {
      os << "| " << c << " |";
      for (const auto& d : domains) {
        std::vector<double> v;
        for (const auto& r : rs)
          if (r.condition == c && r.domain == d) v.push_back(r.accuracy);
        os << ' ' << (v.empty() ? std::string("n/a") : detail::pm(mean_std(v))) << " |";
      }
      std::vector<double> avg;
      for (const auto& [s, a] : seed_averages(rs, protocol, setting, c)) avg.push_back(a);
      os << ' ' << detail::pm(mean_std(avg)) << " |\n";
    }
  }
  return os.str();
}

inline void write_records_csv(const std::vector<ResultRecord>& records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "protocol,condition,setting,domain,seed,accuracy,wall_time,config_hash\n" << std::setprecision(17);
  for (const auto& r : records)
    f << detail::csv_field(r.protocol) << ',' << detail::csv_field(r.condition) << ',' << detail::csv_field(r.setting) << ','
      << detail::csv_field(r.domain) << ',' << r.seed << ',' << r.accuracy << ',' << r.wall_time << ',' << r.config_hash << '\n';
}

struct FewshotPoint {
  double rate = 0.0;
  std::string domain;
  std::uint64_t seed = 0;
  double single_kd = 0.0;
  double meta_distill = 0.0;
  double improvement() const { return (meta_distill - single_kd) / single_kd; }
};

/// One point per (rate, domain, seed) that has both few-shot conditions.
inline std::vector<FewshotPoint> fewshot_points(const std::vector<ResultRecord>& records) {
  std::map<std::tuple<double, std::string, std::uint64_t>, FewshotPoint> pts;
  std::map<std::tuple<double, std::string, std::uint64_t>, int> have;
  for (const auto& r : records) {
    if (r.protocol != "fewshot") continue;
    const double rate = detail::rate_of(r.setting, "rate=");
    if (std::isnan(rate)) continue;
    const auto key = std::make_tuple(rate, r.domain, r.seed);
    auto& p = pts[key];
    p.rate = rate;
    p.domain = r.domain;
    p.seed = r.seed;
    if (r.condition == "single->tinybert-kd") {
      p.single_kd = r.accuracy;
      have[key] |= 1;
    } else if (r.condition == "meta->meta-distill") {
      p.meta_distill = r.accuracy;
      have[key] |= 2;
    }
  }
  std::vector<FewshotPoint> out;
  for (const auto& [k, p] : pts)
    if (have[k] == 3) out.push_back(p);
  return out;
}

/// Mean improvement rate per sample rate, averaged over domains and seeds.
inline std::map<double, double> improvement_by_rate(const std::vector<ResultRecord>& records) {
  std::map<double, std::vector<double>> by;
  for (const auto& p : fewshot_points(records)) by[p.rate].push_back(p.improvement());
  std::map<double, double> out;
  for (const auto& [r, v] : by) out[r] = mean_std(v).mean;
  return out;
}

inline void write_fewshot_csv(const std::vector<ResultRecord>& records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "rate,domain,seed,single_kd,meta_distill,improvement\n" << std::setprecision(17);
  for (const auto& p : fewshot_points(records))
    f << detail::short_num(p.rate) << ',' << detail::csv_field(p.domain) << ',' << p.seed << ',' << p.single_kd << ',' << p.meta_distill << ','
      << p.improvement() << '\n';
}

inline void write_ablation_csv(const std::vector<ResultRecord>& records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "gamma2,domain,mean_accuracy,std_accuracy,seeds\n" << std::setprecision(17);
  std::map<std::pair<double, std::string>, std::vector<double>> by;
  for (const auto& r : records) {
    if (r.protocol != "ablation-g2") continue;
    const double g = detail::rate_of(r.setting, "gamma2=");
    if (!std::isnan(g)) by[{g, r.domain}].push_back(r.accuracy);
  }
  for (const auto& [k, v] : by) {
    const auto m = mean_std(v);
    f << detail::short_num(k.first) << ',' << detail::csv_field(k.second) << ',' << m.mean << ',' << m.std << ',' << m.n << '\n';
  }
}

/// report.md + records.csv, plus curve CSVs when the matching protocol is present.
inline void emit_report(const std::vector<ResultRecord>& records, const std::string& dir) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  std::ofstream(d / "report.md") << markdown_report(records);
  write_records_csv(records, (d / "records.csv").string());
  const auto has = [&](const std::string& p) {
    return std::any_of(records.begin(), records.end(), [&](const ResultRecord& r) { return r.protocol == p; });
  };
  if (has("fewshot")) write_fewshot_csv(records, (d / "fewshot_curve.csv").string());
  if (has("ablation-g2")) write_ablation_csv(records, (d / "ablation_curve.csv").string());
}

}  // namespace mkd
