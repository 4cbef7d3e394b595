// meta-kd command line: data generation, teacher training, distillation,
// protocol runs and report emission.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mkd/mkd.hpp"

namespace {

using nlohmann::json;

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return json::parse(f, nullptr, true, true);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string sidecar_path(const std::string& ckpt) { return ckpt + ".prototypes.json"; }

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  mkd::SynthSpec spec;
  if (!spec_path.empty()) {
    const json j = read_json_file(spec_path);
    spec = (j.contains("data") && j["data"].contains("synth") ? j["data"]["synth"] : j).get<mkd::SynthSpec>();
  }
  if (seed) spec.seed = *seed;
  spec.validate();
  const auto corpora = mkd::synth_multidomain(spec);
  mkd::write_corpus_dir(out, corpora, json(spec));
  std::cout << "wrote " << corpora.size() << " domains to " << out << '\n';
  return 0;
}

// ---------------------------------------------------------------- train-teacher

int cmd_train_teacher(const std::string& mode_name, const std::string& config_path, std::string out, const std::string& domains_arg) {
  const auto cfg = mkd::load_config(config_path);
  const auto mode = mkd::parse_teacher_mode(mode_name);
  const std::uint64_t seed = cfg.seeds.front();
  std::mutex mu;
  mkd::SeedContext ctx(cfg, seed, std::cerr, mu);

  std::vector<std::size_t> roster;
  for (const auto& n : split_commas(domains_arg)) roster.push_back(ctx.domain_index(n));
  if (roster.empty())
    for (std::size_t k = 0; k < ctx.data().num_domains(); ++k) roster.push_back(k);
  if (mode == mkd::TeacherMode::single && roster.size() != 1)
    throw std::invalid_argument("--mode single needs exactly one domain (--domains <name>)");

  std::string tag = mode_name;
  for (auto k : roster) tag += "/" + ctx.data().name(k);
  const auto t = mkd::fit_teacher(ctx, roster, mode, tag);
  if (out.empty()) out = (cfg.output_dir.empty() ? std::string(".") : cfg.output_dir) + "/teacher_" + mode_name + ".ckpt";
  if (auto parent = std::filesystem::path(out).parent_path(); !parent.empty()) std::filesystem::create_directories(parent);

  json meta = t.result.checkpoint_meta();
  meta["vocab"] = ctx.vocab().tokens();
  meta["experiment"] = mkd::to_json_config(cfg);
  meta["data_seed"] = seed;
  mkd::write_checkpoint(out, t.result.model.to_checkpoint(meta));
  if (t.result.table) mkd::write_prototype_table(sidecar_path(out), *t.result.table);

  for (std::size_t i = 0; i < roster.size(); ++i)
    std::cout << ctx.data().name(roster[i]) << " test accuracy " << t.test_accuracy(ctx, roster[i]) << '\n';
  std::cout << "wrote " << out << (t.result.table ? " (+ prototype sidecar)" : "") << '\n';
  return 0;
}

// ---------------------------------------------------------------- distill

struct LoadedTeacher {
  mkd::Encoder model;
  std::optional<mkd::PrototypeTable> table;
  std::vector<std::string> domains;
  json meta;

  mkd::TeacherRef ref(const std::string& domain) const {
    std::optional<std::size_t> local;
    for (std::size_t i = 0; i < domains.size(); ++i)
      if (domains[i] == domain) local = i;
    return {&model, table ? &*table : nullptr, local};
  }
};

LoadedTeacher load_teacher(const std::string& path) {
  const auto ck = mkd::read_checkpoint(path);
  LoadedTeacher t{mkd::Encoder::from_checkpoint(ck), std::nullopt, {}, ck.meta};
  const json& extra = ck.meta.contains("extra") ? ck.meta.at("extra") : ck.meta;
  t.domains = extra.value("domains", std::vector<std::string>{});
  t.meta = extra;
  if (std::filesystem::exists(sidecar_path(path))) t.table = mkd::read_prototype_table(sidecar_path(path));
  return t;
}

int cmd_distill(const std::string& teacher_path, const std::string& domain, const std::string& plan_path, const std::string& out,
                const std::string& teachers_arg, const std::string& config_path) {
  const auto teacher = load_teacher(teacher_path);
  if (!teacher.meta.contains("experiment") || !teacher.meta.contains("vocab"))
    throw std::runtime_error(teacher_path + " lacks the experiment/vocab metadata written by train-teacher");
  const auto cfg = config_path.empty() ? mkd::parse_config(teacher.meta.at("experiment")) : mkd::load_config(config_path);
  const std::uint64_t seed = teacher.meta.value("data_seed", cfg.seeds.front());

  // rebuild the teacher's token space over the same corpora
  const auto vocab = mkd::Vocab::from_tokens(teacher.meta.at("vocab").get<std::vector<std::string>>());
  const auto corpora = mkd::load_corpora(cfg.data, seed);
  std::optional<std::size_t> k;
  for (std::size_t i = 0; i < corpora.size(); ++i)
    if (corpora[i].name == domain) k = i;
  if (!k) throw std::invalid_argument("unknown domain '" + domain + "'");
  auto tok = [&](mkd::Split s) {
    std::vector<mkd::TokenizedExample> rows;
    for (const auto& e : corpora[*k].split(s)) {
      auto r = mkd::tokenize_example(vocab, e, cfg.data.max_seq_len);
      r.domain = static_cast<int>(*k);
      rows.push_back(std::move(r));
    }
    return rows;
  };
  const auto train = tok(mkd::Split::train), dev = tok(mkd::Split::dev), test = tok(mkd::Split::test);

  mkd::DistillPlan plan = plan_path.empty() ? cfg.plan : read_json_file(plan_path).get<mkd::DistillPlan>();
  if (plan.layer_map.empty()) plan.layer_map = mkd::map_layers(teacher.model.config().num_layers, cfg.student_encoder.num_layers);
  if (plan.weighting == mkd::Weighting::expertise && !teacher.table) {
    throw std::invalid_argument("plan uses expertise weighting but " + sidecar_path(teacher_path) + " is missing");
  }

  std::vector<LoadedTeacher> extra;
  for (const auto& p : split_commas(teachers_arg)) extra.push_back(load_teacher(p));
  std::vector<mkd::TeacherRef> refs;
  for (const auto& t : extra) refs.push_back(t.ref(domain));
  if (!extra.empty() && refs.size() < 2) throw std::invalid_argument("--teachers needs at least two checkpoints");

  auto enc = cfg.student_encoder;
  enc.vocab_size = vocab.size();
  enc.max_seq_len = cfg.data.max_seq_len;
  enc.num_classes = teacher.model.config().num_classes;
  enc.num_domains = corpora.size();
  mkd::DistillConfig dc = cfg.distill;
  dc.seed = mkd::derive_seed(seed, "distill/cli/" + domain);
  mkd::Encoder student(enc, mkd::derive_seed(seed, "student-init/" + domain));
  auto res = mkd::distill(teacher.ref(domain), std::move(student), train, dev, plan, dc, refs);

  json meta{{"teacher", teacher_path}, {"domain", domain}, {"plan", plan}, {"history", res.history}, {"vocab", vocab.tokens()}};
  if (auto parent = std::filesystem::path(out).parent_path(); !parent.empty()) std::filesystem::create_directories(parent);
  mkd::write_checkpoint(out, res.student.to_checkpoint(meta));
  std::cout << domain << " student test accuracy " << mkd::accuracy(res.student, test) << "\nwrote " << out << '\n';
  return 0;
}

// ---------------------------------------------------------------- run / report

int cmd_run(const std::string& protocol, const std::string& config_path, const std::string& out) {
  json j = read_json_file(config_path);
  j["protocol"] = protocol;
  if (!out.empty()) j["output_dir"] = out;
  auto cfg = mkd::parse_config(j);
  if (cfg.output_dir.empty()) cfg.output_dir = "runs/" + protocol;
  const auto summary = mkd::run_protocol(cfg, std::cerr);
  std::size_t n = 0;
  for (const auto& s : summary.seeds) n += s.records.size();
  std::cout << protocol << ": " << n << " records in " << cfg.output_dir << " (config " << summary.config_hash << ")\n";
  for (const auto& s : summary.seeds) {
    if (s.hygiene.test_reads_outside_evaluation || s.hygiene.heldout_label_reads) {
      std::cerr << "seed " << s.seed << ": hygiene counters non-zero\n";
      return 1;
    }
  }
  return summary.ok() ? 0 : 1;
}

int cmd_report(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "records.jsonl";
  const auto records = mkd::RecordStore::load(path.string());
  mkd::emit_report(records, dir);
  std::cout << mkd::markdown_report(records);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-knowledge distillation toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out, mode, config, teacher, domain, plan, teachers, domains, protocol, records_dir;
  std::optional<std::uint64_t> seed;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic multi-domain corpus directory");
  gen->add_option("--spec", spec_path, "JSON synth spec (or experiment config with data.synth)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "override the generation seed");

  auto* tt = app.add_subcommand("train-teacher", "train a meta, single or mix teacher");
  tt->add_option("--mode", mode, "teacher mode")->required()->check(CLI::IsMember({"meta", "single", "mix"}));
  tt->add_option("--config", config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  tt->add_option("--domains", domains, "comma-separated domain roster (default: all)");
  tt->add_option("--out", out, "checkpoint path");

  auto* ds = app.add_subcommand("distill", "distil a student for one domain");
  ds->add_option("--teacher", teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  ds->add_option("--domain", domain, "distillation domain")->required();
  ds->add_option("--plan", plan, "DistillPlan JSON")->check(CLI::ExistingFile);
  ds->add_option("--out", out, "student checkpoint path")->required();
  ds->add_option("--teachers", teachers, "comma-separated checkpoints for multi-teacher prediction targets");
  ds->add_option("--config", config, "experiment config overriding the one stored in the teacher")->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "run an experiment protocol over all seeds");
  run->add_option("--protocol", protocol, "protocol")->required()->check(CLI::IsMember(mkd::protocol_names()));
  run->add_option("--config", config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory (overrides output_dir)");

  auto* rep = app.add_subcommand("report", "render report.md and CSVs from records.jsonl");
  rep->add_option("records-dir", records_dir, "directory containing records.jsonl")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out, seed);
    if (tt->parsed()) return cmd_train_teacher(mode, config, out, domains);
    if (ds->parsed()) return cmd_distill(teacher, domain, plan, out, teachers, config);
    if (run->parsed()) return cmd_run(protocol, config, out);
    if (rep->parsed()) return cmd_report(records_dir);
  } catch (const std::exception& e) {
    std::cerr << "meta-kd: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
