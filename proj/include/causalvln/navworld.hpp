#pragma once

// Procedural navigation worlds with controllable co-occurrence bias between
// room types and objects, and between direction words and landmark words.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalvln/causal_stats.hpp"
#include "causalvln/diffcore/rng.hpp"
#include "causalvln/diffcore/tensor.hpp"

namespace causalvln::nav {

enum class Split { seen, unseen };

inline const char* to_string(Split s) { return s == Split::seen ? "seen" : "unseen"; }

inline Split split_from_string(const std::string& s) {
  if (s == "seen") return Split::seen;
  if (s == "unseen") return Split::unseen;
  throw std::invalid_argument("unknown split '" + s + "'");
}

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct WorldConfig {
  int nodes = 25;
  int rooms = 8;
  int objects = 16;
  int objects_per_node = 3;
  double rho_vision = 0.8;
  double rho_language = 0.8;
  int feature_dim = 32;
  double image_noise = 0.3;
  double object_noise = 0.5;
  double object_mix = 0.5;  // weight of the mean object embedding in the image feature
  double jitter = 0.2;
  double diagonal_prob = 0.5;
  double edge_dropout = 0.15;
  int min_path = 3;
  int max_path = 7;
  double success_radius_scale = 0.25;
  double filler_prob = 0.5;
  std::uint64_t perception_seed = 1234;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (nodes < 4) fail("nodes must be at least 4");
    if (rooms < 1) fail("rooms must be positive");
    if (objects < 2) fail("objects must be at least 2");
    if (objects_per_node < 1 || objects_per_node > objects) fail("objects_per_node must be in [1, objects]");
    if (!(rho_vision >= 0.0 && rho_vision <= 1.0)) fail("rho_vision must be in [0,1]");
    if (!(rho_language >= 0.0 && rho_language <= 1.0)) fail("rho_language must be in [0,1]");
    if (feature_dim < 1) fail("feature_dim must be positive");
    if (image_noise < 0.0 || object_noise < 0.0) fail("noise levels must be nonnegative");
    if (!(jitter >= 0.0 && jitter < 0.5)) fail("jitter must be in [0, 0.5)");
    if (!(diagonal_prob >= 0.0 && diagonal_prob <= 1.0)) fail("diagonal_prob must be in [0,1]");
    if (!(edge_dropout >= 0.0 && edge_dropout < 1.0)) fail("edge_dropout must be in [0,1)");
    if (min_path < 1 || max_path < min_path) fail("path length bounds must satisfy 1 <= min_path <= max_path");
    if (!(success_radius_scale > 0.0)) fail("success_radius_scale must be positive");
    if (!(filler_prob >= 0.0 && filler_prob <= 1.0)) fail("filler_prob must be in [0,1]");
  }
};

inline nlohmann::json to_json(const WorldConfig& c) {
  return {{"nodes", c.nodes},
          {"rooms", c.rooms},
          {"objects", c.objects},
          {"objects_per_node", c.objects_per_node},
          {"rho_vision", c.rho_vision},
          {"rho_language", c.rho_language},
          {"feature_dim", c.feature_dim},
          {"image_noise", c.image_noise},
          {"object_noise", c.object_noise},
          {"object_mix", c.object_mix},
          {"jitter", c.jitter},
          {"diagonal_prob", c.diagonal_prob},
          {"edge_dropout", c.edge_dropout},
          {"min_path", c.min_path},
          {"max_path", c.max_path},
          {"success_radius_scale", c.success_radius_scale},
          {"filler_prob", c.filler_prob},
          {"perception_seed", c.perception_seed}};
}

inline WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  c.nodes = j.at("nodes");
  c.rooms = j.at("rooms");
  c.objects = j.at("objects");
  c.objects_per_node = j.at("objects_per_node");
  c.rho_vision = j.at("rho_vision");
  c.rho_language = j.at("rho_language");
  c.feature_dim = j.at("feature_dim");
  c.image_noise = j.at("image_noise");
  c.object_noise = j.at("object_noise");
  c.object_mix = j.at("object_mix");
  c.jitter = j.at("jitter");
  c.diagonal_prob = j.at("diagonal_prob");
  c.edge_dropout = j.at("edge_dropout");
  c.min_path = j.at("min_path");
  c.max_path = j.at("max_path");
  c.success_radius_scale = j.at("success_radius_scale");
  c.filler_prob = j.at("filler_prob");
  c.perception_seed = j.at("perception_seed");
  return c;
}

// ---------------------------------------------------------------------------
// Vocabulary: [PAD], [CLS], 8 direction words (4 turn classes x 2 synonyms),
// one landmark word per object category, 8 filler words.

namespace vocab {

inline constexpr int pad = 0;
inline constexpr int cls = 1;
inline constexpr int direction_base = 2;
inline constexpr int direction_count = 8;
inline constexpr int landmark_base = direction_base + direction_count;
inline constexpr int filler_count = 8;

inline int filler_base(int objects) { return landmark_base + objects; }
inline int size(int objects) { return filler_base(objects) + filler_count; }

enum Turn { forward = 0, left = 1, back = 2, right = 3 };

inline int direction_token(Turn t, int synonym) { return direction_base + 2 * static_cast<int>(t) + synonym; }
inline int landmark_token(int object) { return landmark_base + object; }
inline bool is_direction(int tok) { return tok >= direction_base && tok < landmark_base; }
inline bool is_landmark(int tok, int objects) { return tok >= landmark_base && tok < filler_base(objects); }
inline Turn turn_of(int tok) { return static_cast<Turn>((tok - direction_base) / 2); }

/// Landmark favored by a direction word in biased worlds.
inline int correlated_object(int direction_tok, int objects) {
  return (3 * (direction_tok - direction_base) + 1) % objects;
}

inline std::string name(int tok, int objects) {
  static const char* turns[] = {"forward", "left", "back", "right"};
  if (tok == pad) return "[PAD]";
  if (tok == cls) return "[CLS]";
  if (is_direction(tok)) return std::string(turns[turn_of(tok)]) + (((tok - direction_base) % 2) ? "'" : "");
  if (is_landmark(tok, objects)) return "obj" + std::to_string(tok - landmark_base);
  return "filler" + std::to_string(tok - filler_base(objects));
}

}  // namespace vocab

// ---------------------------------------------------------------------------

struct Node {
  int id = 0;
  double x = 0.0;
  double y = 0.0;
  int room = 0;
  std::vector<int> objects;  // sorted, distinct
};

struct Edge {
  int a = 0;
  int b = 0;
  double length = 0.0;
};

inline double wrap_angle(double a) {
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  return a;
}

inline vocab::Turn quantize_turn(double delta) {
  const double d = wrap_angle(delta);
  const double q = std::numbers::pi / 4.0;
  if (std::abs(d) <= q) return vocab::forward;
  if (d > q && d <= 3.0 * q) return vocab::left;
  if (d < -q && d >= -3.0 * q) return vocab::right;
  return vocab::back;
}

struct NavWorld {
  WorldConfig config;
  std::uint64_t seed = 0;
  Split split = Split::seen;
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::vector<std::vector<std::pair<int, double>>> adjacency;  // sorted by neighbor id

  std::size_t size() const { return nodes.size(); }

  const Node& node(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes.size())
      throw std::out_of_range("unknown node " + std::to_string(id));
    return nodes[id];
  }

  /// Angle of the ray a -> b, counterclockwise from +x.
  double bearing(int a, int b) const {
    const Node &na = node(a), &nb = node(b);
    return std::atan2(nb.y - na.y, nb.x - na.x);
  }

  bool adjacent(int a, int b) const {
    for (const auto& [n, len] : adjacency.at(a))
      if (n == b) return true;
    return false;
  }

  double edge_length(int a, int b) const {
    for (const auto& [n, len] : adjacency.at(a))
      if (n == b) return len;
    throw std::invalid_argument("no edge " + std::to_string(a) + "-" + std::to_string(b));
  }

  double mean_edge_length() const {
    double s = 0.0;
    for (const auto& e : edges) s += e.length;
    return edges.empty() ? 1.0 : s / static_cast<double>(edges.size());
  }

  double success_radius() const { return config.success_radius_scale * mean_edge_length(); }

  void rebuild_adjacency() {
    adjacency.assign(nodes.size(), {});
    for (const auto& e : edges) {
      adjacency[e.a].emplace_back(e.b, e.length);
      adjacency[e.b].emplace_back(e.a, e.length);
    }
    for (auto& a : adjacency) std::sort(a.begin(), a.end());
  }
};

/// Probability weights used to draw objects for a node of room type `room`:
/// a (1 - rho) share of uniform mass plus rho split over the room's two
/// signature objects. Unseen worlds always use the uniform table.
inline std::vector<double> object_weights(const WorldConfig& c, Split split, int room) {
  std::vector<double> w(c.objects, 1.0 / c.objects);
  if (split == Split::unseen) return w;
  const double rho = c.rho_vision;
  for (double& v : w) v *= (1.0 - rho);
  for (int s = 0; s < 2; ++s) w[(2 * room + s) % c.objects] += rho / 2.0;
  return w;
}

inline std::vector<int> signature_objects(const WorldConfig& c, int room) {
  return {(2 * room) % c.objects, (2 * room + 1) % c.objects};
}

namespace detail {

inline bool connected(const NavWorld& w) {
  std::vector<bool> seen(w.size(), false);
  std::vector<int> stack{0};
  seen[0] = true;
  std::size_t count = 1;
  while (!stack.empty()) {
    int n = stack.back();
    stack.pop_back();
    for (const auto& [m, len] : w.adjacency[n])
      if (!seen[m]) {
        seen[m] = true;
        ++count;
        stack.push_back(m);
      }
  }
  return count == w.size();
}

inline double distance(const Node& a, const Node& b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace detail

/// Jittered grid with optional diagonals and random edge removal that never
/// disconnects the graph. Rooms are Voronoi regions around random seed nodes.
inline NavWorld generate_world(const WorldConfig& cfg, std::uint64_t seed, Split split) {
  cfg.validate();
  Rng rng(seed);
  NavWorld w;
  w.config = cfg;
  w.seed = seed;
  w.split = split;
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.nodes))));
  for (int i = 0; i < cfg.nodes; ++i) {
    Node n;
    n.id = i;
    n.x = (i % cols) + rng.uniform(-cfg.jitter, cfg.jitter);
    n.y = (i / cols) + rng.uniform(-cfg.jitter, cfg.jitter);
    w.nodes.push_back(n);
  }
  auto at = [&](int r, int c) -> int {
    if (c < 0 || c >= cols || r < 0) return -1;
    const int id = r * cols + c;
    return id < cfg.nodes ? id : -1;
  };
  std::vector<Edge> candidates;
  for (int i = 0; i < cfg.nodes; ++i) {
    const int r = i / cols, c = i % cols;
    for (int j : {at(r, c + 1), at(r + 1, c)})
      if (j >= 0) candidates.push_back({i, j, detail::distance(w.nodes[i], w.nodes[j])});
    for (int j : {at(r + 1, c + 1), at(r + 1, c - 1)})
      if (j >= 0 && rng.bernoulli(cfg.diagonal_prob))
        candidates.push_back({i, j, detail::distance(w.nodes[i], w.nodes[j])});
  }
  // Crossing diagonals are kept; the graph is an abstract connectivity graph.
  w.edges = candidates;
  w.rebuild_adjacency();
  if (!detail::connected(w)) throw std::logic_error("grid construction produced a disconnected graph");
  std::vector<std::size_t> order(w.edges.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  std::vector<bool> keep(w.edges.size(), true);
  for (std::size_t idx : order) {
    if (!rng.bernoulli(cfg.edge_dropout)) continue;
    keep[idx] = false;
    NavWorld trial = w;
    trial.edges.clear();
    for (std::size_t e = 0; e < w.edges.size(); ++e)
      if (keep[e]) trial.edges.push_back(w.edges[e]);
    trial.rebuild_adjacency();
    if (!detail::connected(trial)) keep[idx] = true;
  }
  std::vector<Edge> kept;
  for (std::size_t e = 0; e < w.edges.size(); ++e)
    if (keep[e]) kept.push_back(w.edges[e]);
  w.edges = std::move(kept);
  w.rebuild_adjacency();

  const int regions = std::max(1, cfg.nodes / 3);
  std::vector<int> seeds, seed_room;
  for (int r = 0; r < regions; ++r) {
    seeds.push_back(static_cast<int>(rng.index(cfg.nodes)));
    seed_room.push_back(static_cast<int>(rng.index(cfg.rooms)));
  }
  for (auto& n : w.nodes) {
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < regions; ++r) {
      const double d = detail::distance(n, w.nodes[seeds[r]]);
      if (d < best) {
        best = d;
        n.room = seed_room[r];
      }
    }
  }
  for (auto& n : w.nodes) {
    std::vector<double> weights = object_weights(cfg, split, n.room);
    for (int k = 0; k < cfg.objects_per_node; ++k) {
      double left = 0.0;
      for (double v : weights) left += v;
      if (!(left > 0.0))
        for (int o = 0; o < cfg.objects; ++o)
          weights[o] = std::find(n.objects.begin(), n.objects.end(), o) == n.objects.end() ? 1.0 : 0.0;
      const int o = static_cast<int>(rng.categorical(weights));
      n.objects.push_back(o);
      weights[o] = 0.0;
    }
    std::sort(n.objects.begin(), n.objects.end());
  }
  return w;
}

// ---------------------------------------------------------------------------
// Geodesics

struct PathResult {
  double distance = 0.0;
  std::vector<int> path;
};

/// Dijkstra from `a`; ties are broken toward smaller node ids so that paths
/// are deterministic.
inline std::vector<double> distances_from(const NavWorld& w, int a, std::vector<int>* parent = nullptr) {
  w.node(a);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(w.size(), inf);
  std::vector<int> par(w.size(), -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[a] = 0.0;
  pq.push({0.0, a});
  while (!pq.empty()) {
    auto [d, n] = pq.top();
    pq.pop();
    if (d > dist[n]) continue;
    for (const auto& [m, len] : w.adjacency[n]) {
      const double nd = d + len;
      if (nd < dist[m] || (nd == dist[m] && par[m] > n)) {
        dist[m] = nd;
        par[m] = n;
        pq.push({nd, m});
      }
    }
  }
  if (parent) *parent = std::move(par);
  return dist;
}

/// Searched from the smaller id so that d(a, b) and d(b, a) round identically.
inline double geodesic(const NavWorld& w, int a, int b) {
  w.node(b);
  const double d = distances_from(w, std::min(a, b))[std::max(a, b)];
  if (!std::isfinite(d)) throw std::runtime_error("nodes " + std::to_string(a) + " and " + std::to_string(b) +
                                                  " are disconnected");
  return d;
}

inline PathResult shortest_path(const NavWorld& w, int a, int b) {
  w.node(b);
  std::vector<int> parent;
  const auto dist = distances_from(w, a, &parent);
  if (!std::isfinite(dist[b])) throw std::runtime_error("no path between " + std::to_string(a) + " and " +
                                                        std::to_string(b));
  PathResult r{dist[b], {}};
  for (int n = b; n != -1; n = parent[n]) r.path.push_back(n);
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

/// All-pairs geodesic table, computed once per world. Entries agree exactly
/// with geodesic(), so the table is symmetric.
class GeodesicTable {
 public:
  GeodesicTable() = default;
  explicit GeodesicTable(const NavWorld& w) : n_(w.size()), d_(n_ * n_) {
    for (std::size_t a = 0; a < n_; ++a) {
      const auto row = distances_from(w, static_cast<int>(a));
      for (std::size_t b = a; b < n_; ++b) d_[a * n_ + b] = d_[b * n_ + a] = row[b];
    }
  }
  double operator()(int a, int b) const { return d_.at(static_cast<std::size_t>(a) * n_ + b); }

 private:
  std::size_t n_ = 0;
  std::vector<double> d_;
};

// ---------------------------------------------------------------------------
// Episodes

struct Episode {
  std::string id;
  std::uint64_t world_seed = 0;
  std::uint64_t seed = 0;
  std::vector<int> tokens;  // starts with [CLS]
  std::vector<int> path;
  int goal = 0;
  double start_heading = 0.0;
  double success_radius = 0.0;
  std::vector<int> step_directions;  // direction token per step
  std::vector<int> step_landmarks;   // landmark token per step
};

class EpisodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Samples endpoints whose shortest path has min_path..max_path edges, and
/// describes each step by a turn word and an object at the step's target.
inline Episode generate_episode(const NavWorld& w, std::uint64_t seed, int max_retries = 1000) {
  const WorldConfig& c = w.config;
  Rng rng(seed);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    const int a = static_cast<int>(rng.index(w.size()));
    const int b = static_cast<int>(rng.index(w.size()));
    if (a == b) continue;
    PathResult sp = shortest_path(w, a, b);
    const int steps = static_cast<int>(sp.path.size()) - 1;
    if (steps < c.min_path || steps > c.max_path) continue;

    Episode e;
    e.world_seed = w.seed;
    e.seed = seed;
    e.id = "w" + std::to_string(w.seed) + "-e" + std::to_string(seed);
    e.path = sp.path;
    e.goal = b;
    e.success_radius = w.success_radius();
    const auto& start_adj = w.adjacency[a];
    e.start_heading = w.bearing(a, start_adj[rng.index(start_adj.size())].first);
    e.tokens.push_back(vocab::cls);
    double heading = e.start_heading;
    for (int s = 0; s < steps; ++s) {
      const int from = sp.path[s], to = sp.path[s + 1];
      const double bearing = w.bearing(from, to);
      const vocab::Turn turn = quantize_turn(bearing - heading);
      heading = bearing;
      const int dir_tok = vocab::direction_token(turn, static_cast<int>(rng.index(2)));
      const auto& objs = w.node(to).objects;
      int landmark = objs[rng.index(objs.size())];
      if (w.split == Split::seen && rng.bernoulli(c.rho_language)) {
        const int preferred = vocab::correlated_object(dir_tok, c.objects);
        if (std::find(objs.begin(), objs.end(), preferred) != objs.end()) landmark = preferred;
      }
      if (rng.bernoulli(c.filler_prob))
        e.tokens.push_back(vocab::filler_base(c.objects) + static_cast<int>(rng.index(vocab::filler_count)));
      e.tokens.push_back(dir_tok);
      e.tokens.push_back(vocab::landmark_token(landmark));
      e.step_directions.push_back(dir_tok);
      e.step_landmarks.push_back(vocab::landmark_token(landmark));
    }
    return e;
  }
  throw EpisodeError("no endpoint pair with " + std::to_string(c.min_path) + ".." + std::to_string(c.max_path) +
                     " steps after " + std::to_string(max_retries) + " attempts");
}

// ---------------------------------------------------------------------------
// Observations

/// Embedding tables shared by every world with the same perception seed.
struct Perception {
  Tensor rooms;    // R x d
  Tensor objects;  // O x d

  explicit Perception(const WorldConfig& c) {
    Rng rng(c.perception_seed);
    rooms = rng.normal_tensor(c.rooms, c.feature_dim, 1.0);
    objects = rng.normal_tensor(c.objects, c.feature_dim, 1.0);
  }
};

struct Candidate {
  int node = 0;
  double sin_theta = 0.0;
  double cos_theta = 1.0;
  bool navigable = true;
  std::vector<double> feature;
};

struct ObjectView {
  int class_id = 0;
  int candidate = 0;  // index into Observation::candidates
  std::vector<double> feature;
};

struct Observation {
  int node = 0;
  std::vector<double> here;  // feature of the current node itself
  std::vector<Candidate> candidates;
  std::vector<ObjectView> objects;
};

/// Noise-free image feature of a node: room embedding plus a weighted mean of
/// its object embeddings.
inline std::vector<double> clean_node_feature(const NavWorld& w, const Perception& p, int id) {
  const Node& n = w.node(id);
  const std::size_t d = static_cast<std::size_t>(w.config.feature_dim);
  std::vector<double> f(d);
  for (std::size_t j = 0; j < d; ++j) f[j] = p.rooms(n.room, j);
  const double mix = w.config.object_mix / static_cast<double>(n.objects.size());
  for (int o : n.objects)
    for (std::size_t j = 0; j < d; ++j) f[j] += mix * p.objects(o, j);
  return f;
}

inline std::vector<double> clean_object_feature(const Perception& p, int cls) {
  std::vector<double> f(p.objects.cols());
  for (std::size_t j = 0; j < f.size(); ++j) f[j] = p.objects(cls, j);
  return f;
}

/// Direction encodings are relative to `heading`: a neighbor straight ahead
/// has (sin, cos) = (0, 1). `noise` may be null for noise-free features.
inline Observation observe(const NavWorld& w, const Perception& p, int node, double heading, Rng* noise) {
  w.node(node);
  auto jitter = [&](std::vector<double> f, double sd) {
    if (noise && sd > 0.0)
      for (double& v : f) v += noise->normal() * sd;
    return f;
  };
  Observation o;
  o.node = node;
  o.here = jitter(clean_node_feature(w, p, node), w.config.image_noise);
  for (const auto& [nb, len] : w.adjacency[node]) {
    const double theta = wrap_angle(w.bearing(node, nb) - heading);
    Candidate c;
    c.node = nb;
    c.sin_theta = std::sin(theta);
    c.cos_theta = std::cos(theta);
    c.feature = jitter(clean_node_feature(w, p, nb), w.config.image_noise);
    const int ci = static_cast<int>(o.candidates.size());
    o.candidates.push_back(std::move(c));
    for (int cls : w.node(nb).objects)
      o.objects.push_back({cls, ci, jitter(clean_object_feature(p, cls), w.config.object_noise)});
  }
  if (o.candidates.empty()) throw std::logic_error("node " + std::to_string(node) + " has no neighbors");
  return o;
}

// ---------------------------------------------------------------------------
// Event records for co-occurrence statistics

inline std::vector<stats::EventRecord> node_events(const NavWorld& w) {
  std::vector<stats::EventRecord> out;
  for (const auto& n : w.nodes) {
    stats::EventRecord r;
    r.id = "w" + std::to_string(w.seed) + "-n" + std::to_string(n.id);
    r.vars["room"] = "r" + std::to_string(n.room);
    for (int o = 0; o < w.config.objects; ++o)
      r.vars["obj" + std::to_string(o)] = std::binary_search(n.objects.begin(), n.objects.end(), o) ? "1" : "0";
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<stats::EventRecord> instruction_events(const Episode& e, int objects) {
  std::vector<stats::EventRecord> out;
  for (std::size_t s = 0; s < e.step_directions.size(); ++s) {
    stats::EventRecord r;
    r.id = e.id + "-s" + std::to_string(s);
    r.vars["direction"] = vocab::name(e.step_directions[s], objects);
    r.vars["turn"] = vocab::name(vocab::direction_token(vocab::turn_of(e.step_directions[s]), 0), objects);
    r.vars["landmark"] = vocab::name(e.step_landmarks[s], objects);
    out.push_back(std::move(r));
  }
  return out;
}

inline stats::Schema node_event_schema(const WorldConfig& c) {
  stats::Schema s;
  std::vector<std::string> rooms;
  for (int r = 0; r < c.rooms; ++r) rooms.push_back("r" + std::to_string(r));
  s.add_variable("room", rooms);
  for (int o = 0; o < c.objects; ++o) s.add_variable("obj" + std::to_string(o), {"0", "1"});
  return s;
}

inline stats::Schema instruction_event_schema(const WorldConfig& c) {
  stats::Schema s;
  std::vector<std::string> dirs, turns, lms;
  for (int t = 0; t < vocab::direction_count; ++t) dirs.push_back(vocab::name(vocab::direction_base + t, c.objects));
  for (int t = 0; t < 4; ++t) turns.push_back(vocab::name(vocab::direction_token(vocab::Turn(t), 0), c.objects));
  for (int o = 0; o < c.objects; ++o) lms.push_back(vocab::name(vocab::landmark_token(o), c.objects));
  s.add_variable("direction", dirs);
  s.add_variable("turn", turns);
  s.add_variable("landmark", lms);
  return s;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const NavWorld& w) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : w.nodes)
    nodes.push_back({{"id", n.id}, {"x", n.x}, {"y", n.y}, {"room", n.room}, {"objects", n.objects}});
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : w.edges) edges.push_back({{"a", e.a}, {"b", e.b}, {"length", e.length}});
  return {{"seed", w.seed}, {"split", to_string(w.split)}, {"config", to_json(w.config)},
          {"nodes", nodes}, {"edges", edges}};
}

inline NavWorld world_from_json(const nlohmann::json& j) {
  NavWorld w;
  w.seed = j.at("seed");
  w.split = split_from_string(j.at("split"));
  w.config = world_config_from_json(j.at("config"));
  for (const auto& jn : j.at("nodes")) {
    Node n;
    n.id = jn.at("id");
    n.x = jn.at("x");
    n.y = jn.at("y");
    n.room = jn.at("room");
    n.objects = jn.at("objects").get<std::vector<int>>();
    if (n.id != static_cast<int>(w.nodes.size())) throw std::invalid_argument("node ids must be dense and ordered");
    w.nodes.push_back(std::move(n));
  }
  for (const auto& je : j.at("edges")) w.edges.push_back({je.at("a"), je.at("b"), je.at("length")});
  for (const auto& e : w.edges)
    if (e.a < 0 || e.b < 0 || e.a >= static_cast<int>(w.nodes.size()) || e.b >= static_cast<int>(w.nodes.size()))
      throw std::invalid_argument("edge references unknown node");
  w.rebuild_adjacency();
  return w;
}

inline nlohmann::json to_json(const Episode& e) {
  return {{"id", e.id},
          {"world_seed", e.world_seed},
          {"seed", e.seed},
          {"tokens", e.tokens},
          {"path", e.path},
          {"goal", e.goal},
          {"start_heading", e.start_heading},
          {"success_radius", e.success_radius},
          {"step_directions", e.step_directions},
          {"step_landmarks", e.step_landmarks}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode e;
  e.id = j.at("id");
  e.world_seed = j.at("world_seed");
  e.seed = j.at("seed");
  e.tokens = j.at("tokens").get<std::vector<int>>();
  e.path = j.at("path").get<std::vector<int>>();
  e.goal = j.at("goal");
  e.start_heading = j.at("start_heading");
  e.success_radius = j.at("success_radius");
  e.step_directions = j.at("step_directions").get<std::vector<int>>();
  e.step_landmarks = j.at("step_landmarks").get<std::vector<int>>();
  return e;
}

}  // namespace causalvln::nav
