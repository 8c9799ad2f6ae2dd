#pragma once

// Experiment configuration: a flat `section.key = value` text format over the
// world, agent and training configs, plus the seed list and output
// directory. Ablation matrices expand one base config into named variants.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalvln/agent.hpp"

namespace causalvln::experiment {

inline constexpr const char* artifact_version = "causalvln-1";

struct ExperimentConfig {
  agent::RunConfig run;  // run.seed is replaced by each entry of `seeds`
  std::vector<std::uint64_t> seeds{1};
  std::string out;

  void validate() const {
    run.validate();
    if (seeds.empty()) throw nav::ConfigError("seeds must not be empty");
  }
};

/// Desk-scale preset: small enough that a five-seed comparison of two
/// variants fits in half an hour on one core.
inline ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.run.agent.d_h = 32;
  c.run.train.iterations = 3500;
  c.run.train.val_every = 500;
  c.run.train.test_episodes = 400;
  c.run.train.policy.period = 500;
  return c;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline nlohmann::json parse_like(const nlohmann::json& like, const std::string& key, const std::string& text) {
  auto bad = [&] { return nav::ConfigError("value '" + text + "' is not valid for " + key); };
  try {
    std::size_t used = 0;
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw bad();
    }
    if (like.is_number_unsigned()) {
      if (!text.empty() && text[0] == '-') throw bad();
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw bad();
      return v;
    }
    if (like.is_number_integer()) {
      const auto v = std::stoll(text, &used);
      if (used != text.size()) throw bad();
      return v;
    }
    if (like.is_number_float()) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw bad();
      return v;
    }
  } catch (const std::logic_error&) {
    throw bad();
  }
  return text;
}

}  // namespace detail

inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    try {
      out.push_back(std::stoull(item, &used));
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != item.size() || item[0] == '-') throw nav::ConfigError("bad seed '" + item + "'");
  }
  return out;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = agent::to_json(c.run);
  j.erase("seed");
  j["seeds"] = c.seeds;
  return j;
}

/// Applies one `key = value` assignment. Keys are `world.*`, `agent.*`,
/// `train.*`, `policy.*`, `seeds` and `out`.
inline void set(ExperimentConfig& c, const std::string& key, const std::string& value) {
  if (key == "seeds") {
    c.seeds = parse_seeds(value);
    return;
  }
  if (key == "out") {
    c.out = value;
    return;
  }
  nlohmann::json j = agent::to_json(c.run);
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw nav::ConfigError("unknown config key '" + key + "'");
  std::string section = key.substr(0, dot), field = key.substr(dot + 1);
  nlohmann::json* target = nullptr;
  if (section == "policy") target = &j["train"]["policy"];
  else if (section == "world" || section == "agent" || section == "train") target = &j[section];
  if (!target || !target->contains(field) || (section == "train" && field == "policy"))
    throw nav::ConfigError("unknown config key '" + key + "'");
  (*target)[field] = detail::parse_like((*target)[field], key, value);
  try {
    const auto seed = c.run.seed;
    c.run = agent::run_config_from_json(j);
    c.run.seed = seed;
  } catch (const std::invalid_argument& e) {
    throw nav::ConfigError(key + ": " + e.what());
  }
}

/// Parses the flat format on top of `base`. Blank lines and `#` comments are
/// ignored.
inline ExperimentConfig parse(std::istream& is, ExperimentConfig base = desk_preset()) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw nav::ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      set(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const nav::ConfigError& e) {
      throw nav::ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline ExperimentConfig load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  return parse(is);
}

inline std::string dump(const ExperimentConfig& c) {
  std::ostringstream os;
  const nlohmann::json j = agent::to_json(c.run);
  auto section = [&](const char* name, const nlohmann::json& obj) {
    for (const auto& [k, v] : obj.items()) {
      if (v.is_object()) continue;
      os << name << '.' << k << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
    }
  };
  section("world", j.at("world"));
  section("agent", j.at("agent"));
  section("train", j.at("train"));
  section("policy", j.at("train").at("policy"));
  os << "seeds = ";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) os << (i ? "," : "") << c.seeds[i];
  os << '\n';
  if (!c.out.empty()) os << "out = " << c.out << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation matrices

struct Variant {
  std::string name;
  agent::RunConfig run;
};

/// Confounders on or off for instructions, objects and rooms; row 1 is the
/// baseline and row 8 the full intervention.
inline std::vector<Variant> confounder_matrix(const agent::RunConfig& base) {
  std::vector<Variant> out;
  for (int mask = 0; mask < 8; ++mask) {
    Variant v{"", base};
    v.run.agent.instr = mask & 1;
    v.run.agent.obj = mask & 2;
    v.run.agent.room = mask & 4;
    v.name = "#" + std::to_string(mask + 1) + (v.run.agent.instr ? "+instr" : "") + (v.run.agent.obj ? "+obj" : "") +
             (v.run.agent.room ? "+room" : "");
    if (mask == 0) v.name += "baseline";
    out.push_back(std::move(v));
  }
  return out;
}

/// Type-1/Type-2 for language crossed with Type-1/Type-2 for vision.
inline std::vector<Variant> pairing_matrix(const agent::RunConfig& base) {
  std::vector<Variant> out;
  for (auto lk : {ibrl::LayerKind::type1, ibrl::LayerKind::type2})
    for (auto vk : {ibrl::LayerKind::type1, ibrl::LayerKind::type2}) {
      Variant v{std::string("lang-") + ibrl::to_string(lk) + "/vis-" + ibrl::to_string(vk), base};
      v.run.agent.instr = v.run.agent.obj = v.run.agent.room = true;
      v.run.agent.lang_kind = lk;
      v.run.agent.vis_kind = vk;
      out.push_back(std::move(v));
    }
  return out;
}

/// The five dictionary update strategies on the full intervention agent.
inline std::vector<Variant> update_matrix(const agent::RunConfig& base) {
  std::vector<Variant> out;
  for (auto m : {dict::UpdateMode::random, dict::UpdateMode::precomputed, dict::UpdateMode::schedule,
                 dict::UpdateMode::best, dict::UpdateMode::best_schedule}) {
    Variant v{dict::to_string(m), base};
    v.run.agent.instr = v.run.agent.obj = v.run.agent.room = true;
    v.run.train.policy.mode = m;
    out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<Variant> ablation(const std::string& table, const agent::RunConfig& base) {
  if (table == "table3") return confounder_matrix(base);
  if (table == "table4") return pairing_matrix(base);
  if (table == "table5") return update_matrix(base);
  throw nav::ConfigError("unknown ablation '" + table + "' (expected table3, table4 or table5)");
}

// ---------------------------------------------------------------------------
// Runs

/// Held-out test results of one variant trained with one seed, evaluated with
/// the parameters of its best validation point.
struct SeedResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::uint64_t best_iteration = 0;
  eval::SplitReport seen;
  eval::SplitReport unseen;
};

inline std::pair<eval::SplitReport, eval::SplitReport> test_reports(agent::Agent& a, const agent::Benchmark& b,
                                                                    const std::string& variant,
                                                                    const nlohmann::json& config) {
  auto seen = agent::evaluate(a, b.train, b.train_geo, b.perception, b.test_seen_eps);
  auto unseen = agent::evaluate(a, b.test_unseen, b.test_unseen_geo, b.perception, b.test_unseen_eps);
  return {eval::aggregate(variant, "seen", seen, config), eval::aggregate(variant, "unseen", unseen, config)};
}

inline void write_reports(const std::filesystem::path& dir, const eval::SplitReport& seen,
                          const eval::SplitReport& unseen) {
  std::ofstream(dir / "report.csv") << [&] {
    std::ostringstream os;
    eval::write_report_csv(os, {seen, unseen});
    return os.str();
  }();
  std::ofstream(dir / "gap.csv") << [&] {
    std::ostringstream os;
    eval::write_gap_csv(os, eval::gap_report(seen, unseen));
    return os.str();
  }();
  nlohmann::json j{{"artifact_version", artifact_version},
                   {"config", seen.config},
                   {"reports", {eval::to_json(seen), eval::to_json(unseen)}}};
  std::ofstream(dir / "report.json") << j.dump(2) << '\n';
}

/// Trains one variant with one seed. `dir` may be empty to keep everything in
/// memory; `resume` continues from a checkpoint of the same run.
inline SeedResult run_seed(const Variant& v, std::uint64_t seed, const std::filesystem::path& dir = {},
                           const std::filesystem::path& resume = {}) {
  agent::RunConfig run = v.run;
  run.seed = seed;
  agent::Trainer tr(run, dir);
  if (!resume.empty()) tr.resume(resume);
  tr.run();
  tr.restore_best();
  auto [seen, unseen] = test_reports(tr.agent(), tr.benchmark(), v.name, agent::to_json(run));
  if (!dir.empty()) write_reports(dir, seen, unseen);
  return {v.name, seed, tr.best_iteration(), seen, unseen};
}

inline void write_results_csv(std::ostream& os, const std::vector<SeedResult>& rs) {
  os << "variant,seed,split,count,NE,SR,OSR,SPL\n";
  for (const auto& r : rs)
    for (const auto* rep : {&r.seen, &r.unseen})
      os << r.variant << ',' << r.seed << ',' << rep->split << ',' << rep->count << ',' << eval::fixed2(rep->ne) << ','
         << eval::fixed2(rep->sr) << ',' << eval::fixed2(rep->osr) << ',' << eval::fixed2(rep->spl) << '\n';
}

/// One row per variant with metrics averaged over seeds, in first-seen order.
inline void write_summary_csv(std::ostream& os, const std::vector<SeedResult>& rs) {
  os << "variant,seeds,seen_SR,unseen_SR,seen_SPL,unseen_SPL,SR_gap,SPL_gap\n";
  std::vector<std::string> order;
  for (const auto& r : rs)
    if (std::find(order.begin(), order.end(), r.variant) == order.end()) order.push_back(r.variant);
  for (const auto& name : order) {
    double n = 0, ss = 0, us = 0, sp = 0, up = 0;
    for (const auto& r : rs)
      if (r.variant == name) {
        n += 1;
        ss += r.seen.sr;
        us += r.unseen.sr;
        sp += r.seen.spl;
        up += r.unseen.spl;
      }
    os << name << ',' << n << ',' << eval::fixed2(ss / n) << ',' << eval::fixed2(us / n) << ','
       << eval::fixed2(sp / n) << ',' << eval::fixed2(up / n) << ',' << eval::fixed2((ss - us) / n) << ','
       << eval::fixed2((sp - up) / n) << '\n';
  }
}

}  // namespace causalvln::experiment
