// causalvln: world generation, confounding statistics, dictionaries,
// training and evaluation from the command line.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "causalvln/experiment.hpp"

namespace fs = std::filesystem;
using namespace causalvln;
using nlohmann::json;

namespace {

/// Bad input from the user: reported and mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_out() {
  const char* env = std::getenv("CAUSALVLN_OUT");
  return env && *env ? env : "causalvln_out";
}

fs::path out_dir(const std::string& flag) {
  fs::path p = flag.empty() ? fs::path(default_out()) : fs::path(flag);
  fs::create_directories(p);
  return p;
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("no such file: " + path);
}

std::string slurp(const std::string& path) {
  require_file(path);
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

json read_json(const std::string& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

/// Every output directory gets a manifest echoing the configuration, since
/// JSONL and CSV files cannot carry it inline.
void write_manifest(const fs::path& dir, const std::string& command, const json& config,
                    const std::vector<std::string>& files) {
  json j{{"artifact_version", experiment::artifact_version},
         {"command", command},
         {"config", config},
         {"files", files}};
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

experiment::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  experiment::ExperimentConfig c = experiment::desk_preset();
  if (!path.empty()) {
    require_file(path);
    c = experiment::load(path);
  }
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    experiment::set(c, experiment::detail::trim(kv.substr(0, eq)), experiment::detail::trim(kv.substr(eq + 1)));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// generate-world

struct GenerateArgs {
  std::string config, out, split = "seen";
  std::vector<std::string> sets;
  std::uint64_t seed = 1;
  std::size_t episodes = 50;
};

int generate_world(const GenerateArgs& a) {
  const auto c = load_config(a.config, a.sets);
  nav::Split split;
  try {
    split = nav::split_from_string(a.split);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const nav::NavWorld w = nav::generate_world(c.run.world, a.seed, split);
  const fs::path dir = out_dir(a.out);
  json world{{"artifact_version", experiment::artifact_version},
             {"config", nav::to_json(c.run.world)},
             {"world", nav::to_json(w)}};
  write_text(dir / "world.json", world.dump(2) + "\n");

  std::ostringstream eps, node_events, instr_events;
  for (std::size_t i = 0; i < a.episodes; ++i) {
    const nav::Episode e = nav::generate_episode(w, a.seed * 1'000'003ULL + i);
    eps << nav::to_json(e).dump() << '\n';
    stats::write_jsonl(instr_events, nav::instruction_events(e, c.run.world.objects));
  }
  stats::write_jsonl(node_events, nav::node_events(w));
  write_text(dir / "episodes.jsonl", eps.str());
  write_text(dir / "events.jsonl", node_events.str());
  write_text(dir / "instruction_events.jsonl", instr_events.str());
  write_manifest(dir, "generate-world", {{"world", nav::to_json(c.run.world)}, {"seed", a.seed}, {"split", a.split}},
                 {"world.json", "episodes.jsonl", "events.jsonl", "instruction_events.jsonl"});
  std::cout << dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// intervene-stats

struct StatsArgs {
  std::string records, z_var, out;
  std::vector<std::string> pairs;
};

/// "X=1|Y=1" -> ({X:1}, {Y:1}); either side may hold several `;`-joined terms.
std::pair<stats::Assignment, stats::Assignment> parse_pair(const std::string& text) {
  const auto bar = text.find('|');
  if (bar == std::string::npos) throw UsageError("pair '" + text + "' must look like X=x|Y=y");
  try {
    return {stats::parse_assignment(text.substr(0, bar)), stats::parse_assignment(text.substr(bar + 1))};
  } catch (const std::invalid_argument& e) {
    throw UsageError("pair '" + text + "': " + e.what());
  }
}

int intervene_stats(const StatsArgs& a) {
  require_file(a.records);
  std::ifstream is(a.records);
  std::vector<stats::EventRecord> records;
  try {
    records = stats::read_jsonl(is);
  } catch (const std::invalid_argument& e) {
    throw UsageError(a.records + ": " + e.what());
  }
  const stats::Schema schema = stats::Schema::infer(records);
  if (!schema.has_variable(a.z_var)) throw UsageError("confounder '" + a.z_var + "' does not occur in the records");
  stats::CooccurrenceTable table(schema);
  try {
    table.ingest_all(records);
  } catch (const stats::RecordError& e) {
    throw UsageError(e.what());
  }
  std::vector<std::pair<stats::Assignment, stats::Assignment>> pairs;
  for (const auto& p : a.pairs)
    if (!p.empty()) pairs.push_back(parse_pair(p));
  for (const auto& [x, y] : pairs)
    for (const auto* side : {&x, &y})
      for (const auto& [var, cat] : *side)
        if (!schema.has_variable(var)) throw UsageError("variable '" + var + "' does not occur in the records");
        else if (!schema.category_index(schema.var_index(var), cat))
          throw UsageError("category '" + cat + "' of '" + var + "' does not occur in the records");
  std::ostringstream os;
  stats::write_shift_csv(os, stats::shift_report(table, pairs, a.z_var));
  const fs::path dir = out_dir(a.out);
  write_text(dir / "shift_report.csv", os.str());
  write_manifest(dir, "intervene-stats", {{"records", a.records}, {"z_var", a.z_var}, {"pairs", a.pairs}},
                 {"shift_report.csv"});
  std::cout << os.str();
  return 0;
}

// ---------------------------------------------------------------------------
// build-dicts

struct DictArgs {
  std::vector<std::string> worlds;
  std::string encoder = "raw", checkpoint, out;
};

int build_dicts(const DictArgs& a) {
  if (a.encoder != "raw" && a.encoder != "checkpoint")
    throw UsageError("--encoder must be raw or checkpoint, got '" + a.encoder + "'");
  std::vector<nav::NavWorld> worlds;
  for (const auto& path : a.worlds) {
    const json j = read_json(path);
    worlds.push_back(nav::world_from_json(j.contains("world") ? j.at("world") : j));
  }
  agent::Dictionaries d;
  json config;
  if (a.encoder == "raw") {
    if (worlds.empty()) throw UsageError("raw mode needs at least one --worlds file");
    for (const auto& w : worlds)
      if (w.config.feature_dim != worlds.front().config.feature_dim ||
          w.config.perception_seed != worlds.front().config.perception_seed)
        throw UsageError("worlds disagree on perception settings");
    std::tie(d.object, d.room) = agent::visual_dictionaries(worlds, nav::Perception(worlds.front().config));
    config = {{"encoder", "raw"}, {"worlds", a.worlds}};
  } else {
    if (a.checkpoint.empty()) throw UsageError("checkpoint mode needs --checkpoint");
    require_file(a.checkpoint);
    const agent::Checkpoint ck = agent::read_checkpoint(a.checkpoint);
    const agent::RunConfig run = agent::run_config_from_json(ck.header.at("config"));
    const agent::Benchmark bench(run.world, run.train);
    agent::Agent ag(run.agent, run.seed);
    agent::load_parameters(ag, ck);
    ag.dicts = agent::dictionaries_from_json(ck.header.at("dictionaries"));
    if (run.agent.lang_intervenes())
      for (const auto& w : agent::refresh_language(ag, bench)) std::cerr << "warning: " << w << '\n';
    d = ag.dicts;
    if (!worlds.empty()) std::tie(d.object, d.room) = agent::visual_dictionaries(worlds, bench.perception);
    config = {{"encoder", "checkpoint"}, {"checkpoint", a.checkpoint}, {"run", ck.header.at("config")},
              {"worlds", a.worlds}};
  }
  const fs::path dir = out_dir(a.out);
  json j{{"artifact_version", experiment::artifact_version}, {"config", config}, {"dictionaries", agent::to_json(d)}};
  write_text(dir / "dictionaries.json", j.dump(2) + "\n");
  write_manifest(dir, "build-dicts", config, {"dictionaries.json"});
  std::cout << (dir / "dictionaries.json").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, seeds, out, ablation, resume;
  std::vector<std::string> sets;
  unsigned jobs = 1;
};

std::string safe_name(std::string s) {
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '+') ch = '_';
  return s;
}

int train(const TrainArgs& a) {
  auto c = load_config(a.config, a.sets);
  if (!a.seeds.empty()) {
    c.seeds = experiment::parse_seeds(a.seeds);
    c.validate();
  }
  std::vector<experiment::Variant> variants;
  if (a.ablation.empty()) variants.push_back({"run", c.run});
  else variants = experiment::ablation(a.ablation, c.run);
  for (auto& v : variants) v.run.validate();
  if (!a.resume.empty()) {
    require_file(a.resume);
    if (variants.size() != 1 || c.seeds.size() != 1)
      throw UsageError("--resume needs a single variant and a single seed");
  }

  const fs::path dir = out_dir(a.out.empty() ? c.out : a.out);
  write_text(dir / "config.txt", experiment::dump(c));
  json echo = experiment::to_json(c);
  if (!a.ablation.empty()) echo["ablation"] = a.ablation;

  struct Job {
    std::size_t variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (auto s : c.seeds) jobs.push_back({v, s});
  std::vector<experiment::SeedResult> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::mutex io;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(io);
        if (next == jobs.size()) return;
        i = next++;
        std::cerr << "training " << variants[jobs[i].variant].name << " seed " << jobs[i].seed << '\n';
      }
      const auto& v = variants[jobs[i].variant];
      const fs::path run_dir = dir / safe_name(v.name) / ("seed" + std::to_string(jobs[i].seed));
      try {
        results[i] = experiment::run_seed(v, jobs[i].seed, run_dir, a.resume);
      } catch (const std::exception& e) {
        errors[i] = v.name + " seed " + std::to_string(jobs[i].seed) + ": " + e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::max(1u, a.jobs); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error(e);

  std::ostringstream res, sum;
  experiment::write_results_csv(res, results);
  experiment::write_summary_csv(sum, results);
  write_text(dir / "results.csv", res.str());
  write_text(dir / "summary.csv", sum.str());
  write_manifest(dir, "train", echo, {"config.txt", "results.csv", "summary.csv"});
  std::cout << sum.str();
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalArgs {
  std::string checkpoint, worlds = "test", out, variant;
};

int evaluate(const EvalArgs& a) {
  if (a.worlds != "test" && a.worlds != "val") throw UsageError("--worlds must be test or val");
  require_file(a.checkpoint);
  const agent::Checkpoint ck = agent::read_checkpoint(a.checkpoint);
  const agent::RunConfig run = agent::run_config_from_json(ck.header.at("config"));
  const agent::Benchmark b(run.world, run.train);
  agent::Agent ag(run.agent, run.seed);
  agent::load_parameters(ag, ck);
  ag.dicts = agent::dictionaries_from_json(ck.header.at("dictionaries"));
  const std::string variant = a.variant.empty() ? fs::path(a.checkpoint).stem().string() : a.variant;
  const json config = ck.header.at("config");
  eval::SplitReport seen, unseen;
  if (a.worlds == "test") {
    std::tie(seen, unseen) = experiment::test_reports(ag, b, variant, config);
  } else {
    seen = eval::aggregate(variant, "seen", agent::evaluate(ag, b.train, b.train_geo, b.perception, b.val_seen_eps),
                           config);
    unseen = eval::aggregate(
        variant, "unseen", agent::evaluate(ag, b.val_unseen, b.val_unseen_geo, b.perception, b.val_unseen_eps), config);
  }
  const fs::path dir = out_dir(a.out);
  experiment::write_reports(dir, seen, unseen);
  write_manifest(dir, "evaluate", {{"checkpoint", a.checkpoint}, {"worlds", a.worlds}, {"run", config}},
                 {"report.csv", "gap.csv", "report.json"});
  std::ostringstream os;
  eval::write_report_csv(os, {seen, unseen});
  std::cout << os.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor-adjusted navigation agents on synthetic confounded worlds"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-world", "Write a world, its episodes and event records");
  g->add_option("--config", gen.config, "Experiment config file (key = value lines)");
  g->add_option("--set", gen.sets, "Config override key=value; repeatable");
  g->add_option("--seed", gen.seed, "World seed");
  g->add_option("--split", gen.split, "seen or unseen object statistics")->check(CLI::IsMember({"seen", "unseen"}));
  g->add_option("--episodes", gen.episodes, "Number of episodes to sample");
  g->add_option("--out", gen.out, "Output directory (default $CAUSALVLN_OUT)");

  StatsArgs st;
  auto* s = app.add_subcommand("intervene-stats", "Observational versus backdoor-adjusted probabilities");
  s->add_option("--records", st.records, "EventRecord JSONL file")->required();
  s->add_option("--z-var", st.z_var, "Confounder variable")->required();
  s->add_option("--pairs", st.pairs, "Queries as X=x|Y=y, comma separated or repeated")->delimiter(',');
  s->add_option("--out", st.out, "Output directory (default $CAUSALVLN_OUT)");

  DictArgs dc;
  auto* d = app.add_subcommand("build-dicts", "Build confounder dictionaries");
  d->add_option("--worlds", dc.worlds, "World JSON files");
  d->add_option("--encoder", dc.encoder, "raw or checkpoint");
  d->add_option("--checkpoint", dc.checkpoint, "Checkpoint whose language encoder re-encodes the dictionaries");
  d->add_option("--out", dc.out, "Output directory (default $CAUSALVLN_OUT)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one variant or an ablation matrix over seeds");
  t->add_option("--config", tr.config, "Experiment config file (key = value lines)");
  t->add_option("--set", tr.sets, "Config override key=value; repeatable");
  t->add_option("--seeds", tr.seeds, "Comma-separated seeds, overriding the config");
  t->add_option("--out", tr.out, "Output directory (default: config `out`, then $CAUSALVLN_OUT)");
  t->add_option("--ablation", tr.ablation, "table3, table4 or table5")
      ->check(CLI::IsMember({"table3", "table4", "table5"}));
  t->add_option("--resume", tr.resume, "Checkpoint to continue from");
  t->add_option("--jobs", tr.jobs, "Runs trained in parallel");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "Evaluate a checkpoint on seen and unseen worlds");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--worlds", ev.worlds, "test or val episode lists");
  e->add_option("--variant", ev.variant, "Label for the report rows (default: checkpoint file name)");
  e->add_option("--out", ev.out, "Output directory (default $CAUSALVLN_OUT)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*g) return generate_world(gen);
    if (*s) return intervene_stats(st);
    if (*d) return build_dicts(dc);
    if (*t) return train(tr);
    if (*e) return evaluate(ev);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const nav::ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const agent::CheckpointError& err) {
    std::cerr << "checkpoint error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
