#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "causalvln/experiment.hpp"

#ifndef CAUSALVLN_CLI
#error "CAUSALVLN_CLI must name the CLI binary"
#endif

namespace fs = std::filesystem;
using namespace causalvln;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("causalvln_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(CAUSALVLN_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(slurp(p));
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const char* tiny_config =
    "world.nodes = 9\n"
    "world.rooms = 3\n"
    "world.objects = 6\n"
    "world.feature_dim = 8\n"
    "world.min_path = 2\n"
    "world.max_path = 3\n"
    "agent.d_h = 16\n"
    "agent.d_m = 8\n"
    "agent.objects = 6\n"
    "agent.max_len = 16\n"
    "agent.max_steps = 5\n"
    "agent.n_lang = 1\n"
    "agent.n_cross = 1\n"
    "train.iterations = 4\n"
    "train.batch = 2\n"
    "train.val_every = 2\n"
    "train.val_episodes = 3\n"
    "train.test_episodes = 3\n"
    "train.train_worlds = 2\n"
    "train.val_worlds = 1\n"
    "train.test_worlds = 1\n"
    "train.dict_episodes = 6\n";

fs::path write_tiny_config(const fs::path& dir) {
  std::ofstream(dir / "tiny.cfg") << tiny_config;
  return dir / "tiny.cfg";
}

}  // namespace

TEST(GenerateWorld, WritesDeterministicFiles) {
  const auto d = scratch("gen");
  const auto cfg = write_tiny_config(d);
  ASSERT_EQ(run("generate-world --config " + cfg.string() + " --seed 7 --out " + (d / "a").string()), 0);
  ASSERT_EQ(run("generate-world --config " + cfg.string() + " --seed 7 --out " + (d / "b").string()), 0);
  for (const char* f : {"world.json", "episodes.jsonl", "events.jsonl", "instruction_events.jsonl", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(d / "a" / f)) << f;
    EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
  }
  const auto world = nlohmann::json::parse(slurp(d / "a" / "world.json"));
  EXPECT_EQ(world.at("artifact_version"), experiment::artifact_version);
  EXPECT_EQ(world.at("config").at("nodes"), 9);
  const auto w = nav::world_from_json(world.at("world"));
  EXPECT_EQ(w.size(), 9u);
  std::ifstream events(d / "a" / "events.jsonl");
  EXPECT_EQ(stats::read_jsonl(events).size(), 9u);
}

TEST(GenerateWorld, RejectsBadConfig) {
  const auto d = scratch("gen_bad");
  EXPECT_EQ(run("generate-world --set world.rho_vision=1.5 --out " + d.string()), 2);
  EXPECT_EQ(run("generate-world --set world.nope=1 --out " + d.string()), 2);
  EXPECT_EQ(run("generate-world --config " + (d / "missing.cfg").string()), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run(""), 2);
}

TEST(GenerateWorld, DefaultOutputFromEnvironment) {
  const auto d = scratch("env");
  const auto cfg = write_tiny_config(d);
  ::setenv("CAUSALVLN_OUT", (d / "from_env").string().c_str(), 1);
  const int code = run("generate-world --config " + cfg.string());
  ::unsetenv("CAUSALVLN_OUT");
  EXPECT_EQ(code, 0);
  EXPECT_TRUE(fs::exists(d / "from_env" / "world.json"));
}

TEST(InterveneStats, FixtureF) {
  const auto d = scratch("stats");
  // (Z, X, Y) counts of the ten-record fixture.
  const std::vector<std::tuple<const char*, const char*, const char*, int>> counts{
      {"a", "1", "1", 3}, {"a", "1", "0", 1}, {"a", "0", "1", 1}, {"a", "0", "0", 1},
      {"b", "1", "0", 1}, {"b", "0", "1", 1}, {"b", "0", "0", 2}};
  {
    std::ofstream os(d / "f.jsonl");
    int id = 0;
    for (auto [z, x, y, n] : counts)
      for (int i = 0; i < n; ++i)
        os << nlohmann::json{{"id", "r" + std::to_string(id++)}, {"vars", {{"Z", z}, {"X", x}, {"Y", y}}}}.dump()
           << "\n";
  }
  const std::string records = (d / "f.jsonl").string();
  ASSERT_EQ(run("intervene-stats --records " + records + " --z-var Z --pairs 'X=1|Y=1' --out " + (d / "o").string()),
            0);
  auto rows = csv(d / "o" / "shift_report.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"x", "y", "p_obs", "p_do", "delta", "support"}));
  EXPECT_EQ(rows[1][0], "X=1");
  EXPECT_EQ(rows[1][1], "Y=1");
  EXPECT_NEAR(std::stod(rows[1][2]), 0.60, 1e-12);
  EXPECT_NEAR(std::stod(rows[1][3]), 0.45, 1e-12);
  EXPECT_NEAR(std::stod(rows[1][4]), -0.15, 1e-12);
  EXPECT_TRUE(fs::exists(d / "o" / "manifest.json"));

  ASSERT_EQ(run("intervene-stats --records " + records + " --z-var Z --out " + (d / "empty").string()), 0);
  EXPECT_EQ(slurp(d / "empty" / "shift_report.csv"), "x,y,p_obs,p_do,delta,support\n");

  // A query without support is flagged, not fatal.
  {
    std::ofstream os(d / "sparse.jsonl");
    os << R"({"id":"1","vars":{"Z":"a","X":"1","Y":"1"}})" << "\n"
       << R"({"id":"2","vars":{"Z":"a","X":"0","Y":"0"}})" << "\n"
       << R"({"id":"3","vars":{"Z":"b","X":"0","Y":"1"}})" << "\n";
  }
  ASSERT_EQ(run("intervene-stats --records " + (d / "sparse.jsonl").string() +
                " --z-var Z --pairs 'X=1;Y=0|Y=1' --out " + (d / "ns").string()),
            0);
  EXPECT_EQ(csv(d / "ns" / "shift_report.csv")[1].back(), "none");
  EXPECT_EQ(run("intervene-stats --records " + records + " --z-var Z --pairs 'X=2|Y=1' --out " + (d / "q").string()),
            2);

  EXPECT_EQ(run("intervene-stats --records " + (d / "missing.jsonl").string() + " --z-var Z"), 2);
  EXPECT_EQ(run("intervene-stats --records " + records + " --z-var Q --out " + (d / "q").string()), 2);
  EXPECT_EQ(run("intervene-stats --records " + records + " --z-var Z --pairs 'X=1' --out " + (d / "q").string()), 2);
}

TEST(BuildDicts, RawModeCountsClasses) {
  const auto d = scratch("dicts");
  const auto cfg = write_tiny_config(d);
  ASSERT_EQ(run("generate-world --config " + cfg.string() + " --seed 2 --out " + (d / "w").string()), 0);
  const std::string world = (d / "w" / "world.json").string();
  ASSERT_EQ(run("build-dicts --worlds " + world + " --encoder raw --out " + (d / "a").string()), 0);
  ASSERT_EQ(run("build-dicts --worlds " + world + " --encoder raw --out " + (d / "b").string()), 0);
  EXPECT_EQ(slurp(d / "a" / "dictionaries.json"), slurp(d / "b" / "dictionaries.json"));

  const auto w = nav::world_from_json(nlohmann::json::parse(slurp(world)).at("world"));
  std::set<int> rooms, objects;
  for (const auto& n : w.nodes) {
    rooms.insert(n.room);
    objects.insert(n.objects.begin(), n.objects.end());
  }
  const auto j = nlohmann::json::parse(slurp(d / "a" / "dictionaries.json"));
  const auto dicts = agent::dictionaries_from_json(j.at("dictionaries"));
  EXPECT_EQ(dicts.room.size(), rooms.size());
  EXPECT_EQ(dicts.object.size(), objects.size());
  EXPECT_TRUE(dicts.direction.empty());

  EXPECT_EQ(run("build-dicts --encoder raw --out " + (d / "c").string()), 2);
  EXPECT_EQ(run("build-dicts --worlds " + world + " --encoder fancy --out " + (d / "c").string()), 2);
}

TEST(TrainEvaluate, EndToEnd) {
  const auto d = scratch("train");
  const auto cfg = write_tiny_config(d);
  const std::string base = "train --config " + cfg.string() + " --seeds 3 --out ";
  ASSERT_EQ(run(base + (d / "a").string()), 0);
  ASSERT_EQ(run(base + (d / "b").string()), 0);
  const auto run_a = d / "a" / "run" / "seed3", run_b = d / "b" / "run" / "seed3";
  for (const char* f : {"train_log.csv", "last.ckpt", "best.ckpt", "report.csv", "gap.csv"}) {
    ASSERT_TRUE(fs::exists(run_a / f)) << f;
    EXPECT_EQ(slurp(run_a / f), slurp(run_b / f)) << f;
  }
  EXPECT_EQ(csv(d / "a" / "summary.csv").size(), 2u);
  const auto manifest = nlohmann::json::parse(slurp(d / "a" / "manifest.json"));
  EXPECT_EQ(manifest.at("artifact_version"), experiment::artifact_version);
  EXPECT_EQ(manifest.at("config").at("agent").at("d_h"), 16);

  // Evaluate the checkpoint: reports for both splits plus the gap table.
  ASSERT_EQ(run("evaluate --checkpoint " + (run_a / "best.ckpt").string() + " --variant run --out " +
                (d / "ev").string()),
            0);
  auto report = csv(d / "ev" / "report.csv");
  ASSERT_EQ(report.size(), 3u);
  EXPECT_EQ(report[1][1], "seen");
  EXPECT_EQ(report[2][1], "unseen");
  auto gap = csv(d / "ev" / "gap.csv");
  ASSERT_EQ(gap.size(), 5u);
  EXPECT_EQ(gap[0], (std::vector<std::string>{"variant", "metric", "gap"}));
  EXPECT_EQ(report, csv(run_a / "report.csv"));

  // Checkpoint-mode dictionaries match a refresh under the frozen encoder.
  ASSERT_EQ(run("build-dicts --encoder checkpoint --checkpoint " + (run_a / "last.ckpt").string() + " --out " +
                (d / "dk").string()),
            0);
  const auto ck = agent::read_checkpoint(run_a / "last.ckpt");
  const auto rc = agent::run_config_from_json(ck.header.at("config"));
  agent::Benchmark bench(rc.world, rc.train);
  agent::Agent ag(rc.agent, rc.seed);
  agent::load_parameters(ag, ck);
  ag.dicts = agent::dictionaries_from_json(ck.header.at("dictionaries"));
  agent::refresh_language(ag, bench);
  const auto built = agent::dictionaries_from_json(
      nlohmann::json::parse(slurp(d / "dk" / "dictionaries.json")).at("dictionaries"));
  EXPECT_EQ(built, ag.dicts);

  EXPECT_EQ(run("evaluate --checkpoint " + (d / "nope.ckpt").string()), 2);
  EXPECT_EQ(run("evaluate --checkpoint " + cfg.string() + " --out " + (d / "x").string()), 1);
}

TEST(TrainEvaluate, ResumeRefusesOtherConfig) {
  const auto d = scratch("resume");
  const auto cfg = write_tiny_config(d);
  ASSERT_EQ(run("train --config " + cfg.string() + " --seeds 1 --out " + (d / "a").string()), 0);
  const auto ckpt = (d / "a" / "run" / "seed1" / "last.ckpt").string();
  EXPECT_EQ(run("train --config " + cfg.string() + " --seeds 1 --set train.lr=0.5 --resume " + ckpt + " --out " +
                (d / "b").string()),
            1);
  EXPECT_EQ(run("train --config " + cfg.string() + " --seeds 1 --set train.iterations=6 --resume " + ckpt +
                " --out " + (d / "c").string()),
            1);
  EXPECT_EQ(run("train --config " + cfg.string() + " --seeds 1,2 --resume " + ckpt + " --out " + (d / "e").string()),
            2);
}

TEST(TrainEvaluate, AblationMatrices) {
  const auto d = scratch("ablation");
  const auto cfg = write_tiny_config(d);
  std::ofstream(cfg, std::ios::app) << "train.iterations = 2\n";
  for (auto [table, rows] : {std::pair{"table3", 8u}, std::pair{"table4", 4u}, std::pair{"table5", 5u}}) {
    const auto out = d / table;
    ASSERT_EQ(run("train --config " + cfg.string() + " --seeds 1 --ablation " + table + " --out " + out.string()), 0)
        << table;
    auto summary = csv(out / "summary.csv");
    ASSERT_EQ(summary.size(), rows + 1) << table;
    for (const auto& r : summary) EXPECT_EQ(r.size(), 8u);
    EXPECT_EQ(csv(out / "results.csv").size(), 2 * rows + 1);
  }
  EXPECT_EQ(run("train --config " + cfg.string() + " --ablation table9 --out " + (d / "x").string()), 2);
}
