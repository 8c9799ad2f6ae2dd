#pragma once

// Rollouts, teacher-forced and demonstrator-supervised losses, confounder
// dictionary construction, and the training loop with exact-resume
// checkpoints.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalvln/agent/model.hpp"
#include "causalvln/eval.hpp"

namespace causalvln::agent {

// ---------------------------------------------------------------------------
// Benchmark

struct TrainConfig {
  std::uint64_t iterations = 1500;
  std::size_t batch = 4;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int mix_tf = 1;      // teacher-forcing batches per cycle
  int mix_sample = 1;  // sampled batches per cycle
  std::uint64_t val_every = 250;
  std::size_t val_episodes = 60;
  std::size_t test_episodes = 100;
  std::size_t train_worlds = 20;
  std::size_t val_worlds = 8;
  std::size_t test_worlds = 8;
  std::size_t dict_episodes = 200;
  std::uint64_t world_seed = 1000;
  double random_dict_sd = 1.0;
  dict::UpdatePolicy policy;

  void validate() const {
    auto fail = [](const std::string& m) { throw nav::ConfigError("train config: " + m); };
    if (batch == 0) fail("batch must be positive");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (weight_decay < 0.0) fail("weight_decay must be nonnegative");
    if (mix_tf < 0 || mix_sample < 0 || mix_tf + mix_sample == 0) fail("mix needs at least one batch kind");
    if (val_every == 0) fail("val_every must be positive");
    if (val_episodes == 0 || test_episodes == 0) fail("episode counts must be positive");
    if (train_worlds == 0 || val_worlds == 0 || test_worlds == 0) fail("world counts must be positive");
    if (dict_episodes == 0) fail("dict_episodes must be positive");
    try {
      policy.validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch", c.batch},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"mix_tf", c.mix_tf},
          {"mix_sample", c.mix_sample},
          {"val_every", c.val_every},
          {"val_episodes", c.val_episodes},
          {"test_episodes", c.test_episodes},
          {"train_worlds", c.train_worlds},
          {"val_worlds", c.val_worlds},
          {"test_worlds", c.test_worlds},
          {"dict_episodes", c.dict_episodes},
          {"world_seed", c.world_seed},
          {"random_dict_sd", c.random_dict_sd},
          {"policy",
           {{"mode", dict::to_string(c.policy.mode)}, {"period", c.policy.period}, {"metric", c.policy.metric}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.iterations = j.at("iterations");
  c.batch = j.at("batch");
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.mix_tf = j.at("mix_tf");
  c.mix_sample = j.at("mix_sample");
  c.val_every = j.at("val_every");
  c.val_episodes = j.at("val_episodes");
  c.test_episodes = j.at("test_episodes");
  c.train_worlds = j.at("train_worlds");
  c.val_worlds = j.at("val_worlds");
  c.test_worlds = j.at("test_worlds");
  c.dict_episodes = j.at("dict_episodes");
  c.world_seed = j.at("world_seed");
  c.random_dict_sd = j.at("random_dict_sd");
  const auto& p = j.at("policy");
  c.policy.mode = dict::update_mode_from_string(p.at("mode"));
  c.policy.period = p.at("period");
  c.policy.metric = p.at("metric");
  return c;
}

struct EpisodeRef {
  std::size_t world = 0;
  nav::Episode episode;
};

/// Training worlds (seen split), held-out unseen worlds for validation and
/// test, and fixed evaluation episode lists. Seen evaluation uses new
/// instructions on the training worlds.
struct Benchmark {
  nav::WorldConfig world_config;
  nav::Perception perception{nav::WorldConfig{}};
  std::vector<nav::NavWorld> train;
  std::vector<nav::NavWorld> val_unseen;
  std::vector<nav::NavWorld> test_unseen;
  std::vector<nav::GeodesicTable> train_geo;
  std::vector<nav::GeodesicTable> val_unseen_geo;
  std::vector<nav::GeodesicTable> test_unseen_geo;
  std::vector<EpisodeRef> val_seen_eps;
  std::vector<EpisodeRef> val_unseen_eps;
  std::vector<EpisodeRef> test_seen_eps;
  std::vector<EpisodeRef> test_unseen_eps;
  std::vector<EpisodeRef> dict_eps;

  static constexpr std::uint64_t val_seed_base = 1'000'000;
  static constexpr std::uint64_t test_seed_base = 2'000'000;
  static constexpr std::uint64_t dict_seed_base = 3'000'000;
  static constexpr std::uint64_t train_seed_range = 1'000'000;

  Benchmark(const nav::WorldConfig& wc, const TrainConfig& tc) : world_config(wc), perception(wc) {
    wc.validate();
    auto make = [&](std::vector<nav::NavWorld>& out, std::vector<nav::GeodesicTable>& geo, std::size_t n,
                    std::uint64_t base, nav::Split split) {
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back(nav::generate_world(wc, base + i, split));
        geo.emplace_back(out.back());
      }
    };
    make(train, train_geo, tc.train_worlds, tc.world_seed, nav::Split::seen);
    make(val_unseen, val_unseen_geo, tc.val_worlds, tc.world_seed + 10'000, nav::Split::unseen);
    make(test_unseen, test_unseen_geo, tc.test_worlds, tc.world_seed + 20'000, nav::Split::unseen);
    auto episodes = [](const std::vector<nav::NavWorld>& worlds, std::size_t n, std::uint64_t base) {
      std::vector<EpisodeRef> out;
      for (std::size_t i = 0; i < n; ++i)
        out.push_back({i % worlds.size(), nav::generate_episode(worlds[i % worlds.size()], base + i)});
      return out;
    };
    val_seen_eps = episodes(train, tc.val_episodes, val_seed_base);
    val_unseen_eps = episodes(val_unseen, tc.val_episodes, val_seed_base);
    test_seen_eps = episodes(train, tc.test_episodes, test_seed_base);
    test_unseen_eps = episodes(test_unseen, tc.test_episodes, test_seed_base);
    dict_eps = episodes(train, tc.dict_episodes, dict_seed_base);
  }
};

// ---------------------------------------------------------------------------
// Dictionaries

/// Room entries average node image features; object entries average object
/// features over every object occurrence in the training worlds.
inline std::pair<dict::ConfounderDictionary, dict::ConfounderDictionary> visual_dictionaries(
    const std::vector<nav::NavWorld>& worlds, const nav::Perception& p) {
  std::vector<dict::Sample> rooms, objects;
  for (const auto& w : worlds)
    for (const auto& n : w.nodes) {
      rooms.push_back({n.room, nav::clean_node_feature(w, p, n.id)});
      for (int o : n.objects) objects.push_back({o, nav::clean_object_feature(p, o)});
    }
  return {dict::build(objects, dict::Family::object), dict::build(rooms, dict::Family::room)};
}

/// Contextual features (rows of E_w) of every direction and landmark token in
/// the given instructions, keyed by token id.
struct TokenFeatures {
  std::vector<std::pair<int, std::vector<double>>> direction;
  std::vector<std::pair<int, std::vector<double>>> landmark;
};

inline TokenFeatures token_features(LinguisticEncoder& enc, const std::vector<EpisodeRef>& eps, int objects) {
  TokenFeatures out;
  for (const auto& ref : eps) {
    Tape t;
    const Tensor& e = enc.context(t, ref.episode.tokens).value();
    for (std::size_t i = 0; i < ref.episode.tokens.size(); ++i) {
      const int tok = ref.episode.tokens[i];
      auto r = e.row(i);
      std::vector<double> f(r.begin(), r.end());
      if (nav::vocab::is_direction(tok)) out.direction.emplace_back(tok, std::move(f));
      else if (nav::vocab::is_landmark(tok, objects)) out.landmark.emplace_back(tok, std::move(f));
    }
  }
  return out;
}

inline std::vector<dict::Sample> as_samples(const std::vector<std::pair<int, std::vector<double>>>& v) {
  std::vector<dict::Sample> out;
  for (const auto& [c, f] : v) out.push_back({c, f});
  return out;
}

/// Builds all four dictionaries for `agent`. The language dictionaries are
/// encoded with the agent's current encoder, or randomized under the
/// `random` update policy.
inline Dictionaries initial_dictionaries(Agent& agent, const Benchmark& b, const TrainConfig& tc,
                                         std::uint64_t seed) {
  Dictionaries d;
  std::tie(d.object, d.room) = visual_dictionaries(b.train, b.perception);
  if (agent.config().lang_intervenes()) {
    auto f = token_features(agent.lang, b.dict_eps, agent.config().objects);
    d.direction = dict::build(as_samples(f.direction), dict::Family::direction);
    d.landmark = dict::build(as_samples(f.landmark), dict::Family::landmark);
    if (tc.policy.mode == dict::UpdateMode::random) {
      Rng rng(derive_seed(seed, 100));
      d.direction = dict::randomized(d.direction, rng, tc.random_dict_sd);
      d.landmark = dict::randomized(d.landmark, rng, tc.random_dict_sd);
    }
  }
  return d;
}

/// Re-encodes the language dictionaries with the current encoder.
inline std::vector<std::string> refresh_language(Agent& agent, const Benchmark& b) {
  auto f = token_features(agent.lang, b.dict_eps, agent.config().objects);
  auto identity = [](const std::vector<double>& v) { return v; };
  auto rd = dict::refresh(agent.dicts.direction, f.direction, identity);
  auto rl = dict::refresh(agent.dicts.landmark, f.landmark, identity);
  agent.dicts.direction = std::move(rd.dictionary);
  agent.dicts.landmark = std::move(rl.dictionary);
  rd.warnings.insert(rd.warnings.end(), rl.warnings.begin(), rl.warnings.end());
  return rd.warnings;
}

// ---------------------------------------------------------------------------
// Rollout

enum class Policy { greedy, sample };

struct Rollout {
  std::vector<int> trajectory;
  bool stopped = false;  // false when max_steps ran out
};

inline std::uint64_t noise_seed(const nav::Episode& e) { return derive_seed(e.seed, e.world_seed ^ 0x6e6f697365ULL); }

inline std::size_t argmax(const Tensor& p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

/// Runs the agent from the episode start. `sampler` is used only for
/// Policy::sample; observation noise comes from `noise`.
inline Rollout rollout(Agent& agent, const nav::NavWorld& w, const nav::Perception& p, const nav::Episode& e,
                       Policy policy, std::size_t max_steps, Rng& noise, Rng* sampler = nullptr) {
  if (policy == Policy::sample && !sampler) throw std::invalid_argument("sampling rollout needs a generator");
  Rollout r;
  int node = e.path.front();
  double heading = e.start_heading;
  r.trajectory.push_back(node);
  if (max_steps == 0) return r;
  Tape t;
  EpisodeContext ctx = agent.begin(t, e.tokens);
  for (std::size_t s = 0; s < max_steps; ++s) {
    StepOutput out = agent.step(ctx, nav::observe(w, p, node, heading, &noise));
    const Tensor& probs = out.dist.probs.value();
    const std::size_t a = policy == Policy::greedy ? argmax(probs) : sampler->categorical(probs.values());
    if (out.actions[a] == stop_action) {
      r.stopped = true;
      return r;
    }
    const int next = out.actions[a];
    heading = w.bearing(node, next);
    node = next;
    r.trajectory.push_back(node);
  }
  return r;
}

inline std::vector<eval::EpisodeResult> evaluate(Agent& agent, const std::vector<nav::NavWorld>& worlds,
                                                 const std::vector<nav::GeodesicTable>& geo,
                                                 const nav::Perception& p, const std::vector<EpisodeRef>& eps) {
  std::vector<eval::EpisodeResult> out;
  for (const auto& ref : eps) {
    Rng noise(noise_seed(ref.episode));
    auto r = rollout(agent, worlds[ref.world], p, ref.episode, Policy::greedy, agent.config().max_steps, noise);
    out.push_back(eval::score(worlds[ref.world], ref.episode, r.trajectory, &geo[ref.world]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

inline Var mean(const std::vector<Var>& xs) {
  Var s = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) s = add(s, xs[i]);
  return scale(s, 1.0 / static_cast<double>(xs.size()));
}

/// Teacher forcing: follow the ground-truth path, supervise each step with the
/// next path node and the final step with stop.
inline Var teacher_forcing_loss(Tape& t, Agent& agent, const nav::NavWorld& w, const nav::Perception& p,
                                const nav::Episode& e, Rng& noise) {
  EpisodeContext ctx = agent.begin(t, e.tokens);
  double heading = e.start_heading;
  std::vector<Var> losses;
  for (std::size_t s = 0; s < e.path.size(); ++s) {
    const int node = e.path[s];
    StepOutput out = agent.step(ctx, nav::observe(w, p, node, heading, &noise));
    const int target = s + 1 < e.path.size() ? e.path[s + 1] : stop_action;
    const int idx = out.index_of(target);
    if (idx < 0) throw std::logic_error("ground-truth action missing from the action space");
    losses.push_back(cross_entropy(out.dist.logits, static_cast<std::size_t>(idx), &out.mask));
    if (target != stop_action) heading = w.bearing(node, target);
  }
  return mean(losses);
}

/// The demonstrator's label at `node`: stop at the goal, otherwise the
/// candidate geodesically nearest to the goal (first on ties).
inline int demonstrator_action(const nav::GeodesicTable& geo, const nav::Observation& obs, int goal) {
  if (obs.node == goal) return stop_action;
  int best = obs.candidates.front().node;
  for (const auto& c : obs.candidates)
    if (geo(c.node, goal) < geo(best, goal)) best = c.node;
  return best;
}

/// Sampling: act from the agent's own distribution, supervise each visited
/// step with the demonstrator's label. Returns an invalid Var when
/// max_steps is zero.
inline Var sampling_loss(Tape& t, Agent& agent, const nav::NavWorld& w, const nav::GeodesicTable& geo,
                         const nav::Perception& p, const nav::Episode& e, Rng& noise, Rng& sampler) {
  EpisodeContext ctx = agent.begin(t, e.tokens);
  int node = e.path.front();
  double heading = e.start_heading;
  std::vector<Var> losses;
  for (std::size_t s = 0; s < agent.config().max_steps; ++s) {
    nav::Observation obs = nav::observe(w, p, node, heading, &noise);
    StepOutput out = agent.step(ctx, obs);
    const int idx = out.index_of(demonstrator_action(geo, obs, e.goal));
    losses.push_back(cross_entropy(out.dist.logits, static_cast<std::size_t>(idx), &out.mask));
    const std::size_t a = sampler.categorical(out.dist.probs.value().values());
    if (out.actions[a] == stop_action) break;
    heading = w.bearing(node, out.actions[a]);
    node = out.actions[a];
  }
  if (losses.empty()) return Var{};
  return mean(losses);
}

// ---------------------------------------------------------------------------
// Logging and checkpoints

struct LogRow {
  std::uint64_t iteration = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  std::string split;  // train, val_seen, val_unseen
  double sr = std::numeric_limits<double>::quiet_NaN();
  double spl = std::numeric_limits<double>::quiet_NaN();
  double ne = std::numeric_limits<double>::quiet_NaN();
  double osr = std::numeric_limits<double>::quiet_NaN();
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string log_header() { return "iteration,loss,split,SR,SPL,NE,OSR"; }

inline std::string to_csv(const LogRow& r) {
  return std::to_string(r.iteration) + "," + format_number(r.loss) + "," + r.split + "," + format_number(r.sr) +
         "," + format_number(r.spl) + "," + format_number(r.ne) + "," + format_number(r.osr);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char checkpoint_magic[8] = {'C', 'V', 'L', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

/// Everything needed to resume: parameters with optimizer moments (binary),
/// plus a JSON header carrying config, RNG state, dictionaries, history and
/// the log so far.
struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Parameter>> params;
};

namespace detail {

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw CheckpointError("truncated checkpoint");
  return v;
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor get_tensor(std::istream& is, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!is) throw CheckpointError("truncated checkpoint tensor data");
  return t;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, nlohmann::json header, const ParamList& params) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& [name, p] : params)
    shapes.push_back({{"name", name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"steps", p->steps}});
  header["params"] = shapes;
  const std::string h = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp);
    os.write(checkpoint_magic, sizeof checkpoint_magic);
    detail::put(os, checkpoint_version);
    detail::put(os, static_cast<std::uint64_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, p] : params) {
      detail::put_tensor(os, p->value);
      detail::put_tensor(os, p->first_moment);
      detail::put_tensor(os, p->second_moment);
    }
    if (!os) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, checkpoint_magic, sizeof magic) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != checkpoint_version)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get<std::uint64_t>(is);
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError("truncated checkpoint header");
  Checkpoint c;
  c.header = nlohmann::json::parse(h);
  for (const auto& s : c.header.at("params")) {
    const std::size_t r = s.at("rows"), k = s.at("cols");
    Parameter p(detail::get_tensor(is, r, k));
    p.first_moment = detail::get_tensor(is, r, k);
    p.second_moment = detail::get_tensor(is, r, k);
    p.steps = s.at("steps");
    c.params.emplace_back(s.at("name"), std::move(p));
  }
  return c;
}

/// Copies checkpoint parameters into `agent`, matching by name and shape.
inline void load_parameters(Agent& agent, const Checkpoint& c) {
  auto params = agent.parameters();
  if (params.size() != c.params.size())
    throw CheckpointError("checkpoint has " + std::to_string(c.params.size()) + " parameters, agent has " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, src] = c.params[i];
    if (name != params[i].first || !src.value.same_shape(params[i].second->value))
      throw CheckpointError("checkpoint parameter " + name + " does not match " + params[i].first);
    Tensor grad = params[i].second->grad;
    *params[i].second = src;
    params[i].second->grad = std::move(grad);
  }
}

// ---------------------------------------------------------------------------
// Training loop

/// Full description of one training run; hashed to detect resume mismatches.
struct RunConfig {
  nav::WorldConfig world;
  AgentConfig agent;
  TrainConfig train;
  std::uint64_t seed = 0;

  void validate() const {
    world.validate();
    agent.validate();
    train.validate();
    if (agent.d_m != static_cast<std::size_t>(world.feature_dim))
      throw nav::ConfigError("agent d_m must equal world feature_dim");
    if (agent.objects != world.objects) throw nav::ConfigError("agent objects must equal world objects");
    if (static_cast<std::size_t>(1 + 3 * world.max_path) > agent.max_len)
      throw nav::ConfigError("agent max_len cannot hold the longest instruction");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"world", nav::to_json(c.world)}, {"agent", to_json(c.agent)}, {"train", to_json(c.train)}, {"seed", c.seed}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  return {nav::world_config_from_json(j.at("world")), agent_config_from_json(j.at("agent")),
          train_config_from_json(j.at("train")), j.at("seed").get<std::uint64_t>()};
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(to_json(c).dump()); }

inline std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Trainer {
 public:
  /// `out_dir` empty keeps everything in memory.
  Trainer(const RunConfig& cfg, std::filesystem::path out_dir = {})
      : cfg_((cfg.validate(), cfg)), out_(std::move(out_dir)), bench_(cfg.world, cfg.train), agent_(cfg.agent, cfg.seed),
        rng_(derive_seed(cfg.seed, 200)) {
    agent_.dicts = initial_dictionaries(agent_, bench_, cfg_.train, cfg_.seed);
    params_ = agent_.parameters();
    for (auto& [n, p] : params_) ptrs_.push_back(p);
    if (!out_.empty()) std::filesystem::create_directories(out_);
  }

  Agent& agent() { return agent_; }
  const Benchmark& benchmark() const { return bench_; }
  const RunConfig& config() const { return cfg_; }
  std::uint64_t iteration() const { return iteration_; }
  const std::vector<LogRow>& log() const { return log_; }
  const std::vector<dict::MetricPoint>& history() const { return history_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  std::uint64_t refreshes() const { return refreshes_; }
  std::uint64_t best_iteration() const { return best_iteration_; }

  bool teacher_forcing_at(std::uint64_t it) const {
    const auto cycle = static_cast<std::uint64_t>(cfg_.train.mix_tf + cfg_.train.mix_sample);
    return (it - 1) % cycle < static_cast<std::uint64_t>(cfg_.train.mix_tf);
  }

  /// One optimizer step on a batch, then validation and dictionary refresh
  /// when due.
  void step() {
    const std::uint64_t it = ++iteration_;
    const bool tf = teacher_forcing_at(it);
    zero_grads(ptrs_);
    double total = 0.0;
    std::size_t counted = 0;
    const double inv_batch = 1.0 / static_cast<double>(cfg_.train.batch);
    for (std::size_t b = 0; b < cfg_.train.batch; ++b) {
      const std::size_t wi = rng_.index(bench_.train.size());
      const nav::Episode e = nav::generate_episode(bench_.train[wi], rng_.index(Benchmark::train_seed_range));
      Rng noise(rng_.next());
      Rng sampler(rng_.next());
      try {
        Tape t;
        Var loss = tf ? teacher_forcing_loss(t, agent_, bench_.train[wi], bench_.perception, e, noise)
                      : sampling_loss(t, agent_, bench_.train[wi], bench_.train_geo[wi], bench_.perception, e,
                                      noise, sampler);
        if (!loss.valid()) continue;
        total += loss.value()[0];
        ++counted;
        t.backward(scale(loss, inv_batch));
      } catch (const NumericError& err) {
        throw NumericError("iteration " + std::to_string(it) + ", episode " + e.id + ": " + err.what());
      }
    }
    adamw_step(ptrs_, AdamWConfig{cfg_.train.lr, 0.9, 0.999, 1e-8, cfg_.train.weight_decay});
    LogRow row;
    row.iteration = it;
    row.loss = counted ? total / static_cast<double>(counted) : 0.0;
    row.split = "train";
    append(row);

    if (it % cfg_.train.val_every == 0 || it == cfg_.train.iterations) validate_now();
    if (agent_.config().lang_intervenes() && dict::should_refresh(cfg_.train.policy, it, history_)) {
      auto w = refresh_language(agent_, bench_);
      warnings_.insert(warnings_.end(), w.begin(), w.end());
      ++refreshes_;
    }
    if (!out_.empty() && (it % cfg_.train.val_every == 0 || it == cfg_.train.iterations))
      save(out_ / "last.ckpt");
  }

  void run() {
    while (iteration_ < cfg_.train.iterations) step();
  }

  eval::SplitReport report(const std::string& variant, const std::string& split,
                           const std::vector<eval::EpisodeResult>& rs) const {
    return eval::aggregate(variant, split, rs, to_json(cfg_));
  }

  /// Greedy validation on both splits; records val-unseen SPL in the metric
  /// history and keeps the best checkpoint.
  void validate_now() {
    auto seen = evaluate(agent_, bench_.train, bench_.train_geo, bench_.perception, bench_.val_seen_eps);
    auto unseen = evaluate(agent_, bench_.val_unseen, bench_.val_unseen_geo, bench_.perception, bench_.val_unseen_eps);
    for (auto& [name, rs] : {std::pair{"val_seen", &seen}, std::pair{"val_unseen", &unseen}}) {
      auto r = eval::aggregate("", name, *rs);
      append({iteration_, std::numeric_limits<double>::quiet_NaN(), name, r.sr, r.spl, r.ne, r.osr});
    }
    const double metric = metric_value(eval::aggregate("", "val_seen", seen), eval::aggregate("", "val_unseen", unseen));
    history_.push_back({iteration_, metric});
    if (dict::improved_at(iteration_, history_)) {
      best_iteration_ = iteration_;
      best_.clear();
      for (auto& [n, p] : params_) best_.push_back(p->value);
      best_dicts_ = agent_.dicts;
      if (!out_.empty()) save(out_ / "best.ckpt");
    }
  }

  /// Loads the parameters and dictionaries of the best validation point.
  /// Without any validation yet the agent is left as it is.
  void restore_best() {
    if (best_.empty()) return;
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second->value = best_[i];
    agent_.dicts = best_dicts_;
  }

  nlohmann::json header() const {
    nlohmann::json h;
    h["config"] = to_json(cfg_);
    h["config_hash"] = hex64(config_hash(cfg_));
    h["iteration"] = iteration_;
    h["rng"] = rng_.state();
    h["dictionaries"] = to_json(agent_.dicts);
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& m : history_) hist.push_back({{"iteration", m.iteration}, {"value", dict::hex_double(m.value)}});
    h["history"] = hist;
    h["best_iteration"] = best_iteration_;
    h["refreshes"] = refreshes_;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : log_) rows.push_back(to_csv(r));
    h["log"] = rows;
    return h;
  }

  void save(const std::filesystem::path& path) { write_checkpoint(path, header(), params_); }

  /// Restores a run saved by save(); refuses a checkpoint whose config
  /// differs from this trainer's.
  void resume(const std::filesystem::path& path) {
    Checkpoint c = read_checkpoint(path);
    const std::string want = hex64(config_hash(cfg_));
    if (c.header.at("config_hash") != want)
      throw CheckpointError("config hash " + c.header.at("config_hash").get<std::string>() +
                            " in checkpoint differs from " + want);
    load_parameters(agent_, c);
    agent_.dicts = dictionaries_from_json(c.header.at("dictionaries"));
    iteration_ = c.header.at("iteration");
    rng_.set_state(c.header.at("rng"));
    history_.clear();
    for (const auto& m : c.header.at("history"))
      history_.push_back({m.at("iteration").get<std::uint64_t>(), dict::parse_hex_double(m.at("value"))});
    best_iteration_ = c.header.at("best_iteration");
    best_.clear();
    const auto best_path = path.parent_path() / "best.ckpt";
    if (best_iteration_ > 0 && std::filesystem::exists(best_path)) {
      Checkpoint b = read_checkpoint(best_path);
      if (b.header.at("config_hash") == want && b.header.at("iteration") == best_iteration_) {
        for (auto& [n, bp] : b.params) best_.push_back(bp.value);
        best_dicts_ = dictionaries_from_json(b.header.at("dictionaries"));
      }
    }
    refreshes_ = c.header.at("refreshes");
    log_.clear();
    std::string text = log_header() + "\n";
    for (const auto& r : c.header.at("log")) {
      log_.push_back(parse_row(r.get<std::string>()));
      text += r.get<std::string>() + "\n";
    }
    if (!out_.empty()) {
      std::ofstream os(out_ / "train_log.csv", std::ios::trunc);
      os << text;
    }
  }

 private:
  double metric_value(const eval::SplitReport& seen, const eval::SplitReport& unseen) const {
    const std::string& m = cfg_.train.policy.metric;
    if (m == "val_unseen_spl") return unseen.spl;
    if (m == "val_unseen_sr") return unseen.sr;
    if (m == "val_seen_spl") return seen.spl;
    if (m == "val_seen_sr") return seen.sr;
    throw nav::ConfigError("unknown selection metric '" + m + "'");
  }

  static LogRow parse_row(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    while (f.size() < 7) f.emplace_back();
    auto num = [](const std::string& s) {
      return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::strtod(s.c_str(), nullptr);
    };
    return {std::stoull(f[0]), num(f[1]), f[2], num(f[3]), num(f[4]), num(f[5]), num(f[6])};
  }

  void append(const LogRow& r) {
    log_.push_back(r);
    if (out_.empty()) return;
    const auto path = out_ / "train_log.csv";
    const bool fresh = !std::filesystem::exists(path) || log_.size() == 1;
    std::ofstream os(path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) os << log_header() << "\n";
    os << to_csv(r) << "\n";
  }

  RunConfig cfg_;
  std::filesystem::path out_;
  Benchmark bench_;
  Agent agent_;
  Rng rng_;
  ParamList params_;
  std::vector<Parameter*> ptrs_;
  std::uint64_t iteration_ = 0;
  std::vector<LogRow> log_;
  std::vector<dict::MetricPoint> history_;
  std::vector<std::string> warnings_;
  std::uint64_t refreshes_ = 0;
  std::uint64_t best_iteration_ = 0;
  std::vector<Tensor> best_;
  Dictionaries best_dicts_;
};

}  // namespace causalvln::agent
