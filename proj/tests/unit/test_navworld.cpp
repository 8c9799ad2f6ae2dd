#include <gtest/gtest.h>

#include <set>

#include "causalvln/navworld.hpp"

using namespace causalvln;
using namespace causalvln::nav;

namespace {

NavWorld line_world(const std::vector<double>& xs) {
  NavWorld w;
  w.config.objects = 4;
  w.config.rooms = 2;
  w.config.min_path = static_cast<int>(xs.size()) - 1;
  w.config.max_path = static_cast<int>(xs.size()) - 1;
  for (std::size_t i = 0; i < xs.size(); ++i) w.nodes.push_back({static_cast<int>(i), xs[i], 0.0, 0, {0, 1}});
  for (std::size_t i = 0; i + 1 < xs.size(); ++i)
    w.edges.push_back({static_cast<int>(i), static_cast<int>(i + 1), xs[i + 1] - xs[i]});
  w.rebuild_adjacency();
  return w;
}

bool is_connected(const NavWorld& w) {
  for (std::size_t b = 0; b < w.size(); ++b)
    if (!std::isfinite(distances_from(w, 0)[b])) return false;
  return true;
}

}  // namespace

TEST(Config, Validation) {
  WorldConfig c;
  EXPECT_NO_THROW(c.validate());
  c.rho_vision = 1.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.rho_language = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.rooms = 0;
  EXPECT_THROW(generate_world(c, 1, Split::seen), ConfigError);
  c = {};
  c.nodes = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(World, StructuralInvariants) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    WorldConfig c;
    c.nodes = 4 + static_cast<int>(seed % 30);
    NavWorld w = generate_world(c, seed, seed % 2 ? Split::seen : Split::unseen);
    ASSERT_EQ(w.size(), static_cast<std::size_t>(c.nodes));
    EXPECT_TRUE(is_connected(w));
    for (const auto& e : w.edges)
      EXPECT_DOUBLE_EQ(e.length, std::hypot(w.nodes[e.a].x - w.nodes[e.b].x, w.nodes[e.a].y - w.nodes[e.b].y));
    for (const auto& n : w.nodes) {
      EXPECT_EQ(n.objects.size(), static_cast<std::size_t>(c.objects_per_node));
      EXPECT_EQ(std::set<int>(n.objects.begin(), n.objects.end()).size(), n.objects.size());
    }
  }
}

TEST(World, DeterministicSerialization) {
  WorldConfig c;
  EXPECT_EQ(to_json(generate_world(c, 7, Split::seen)).dump(), to_json(generate_world(c, 7, Split::seen)).dump());
  EXPECT_NE(to_json(generate_world(c, 7, Split::seen)).dump(), to_json(generate_world(c, 8, Split::seen)).dump());
}

TEST(World, JsonRoundTrip) {
  NavWorld w = generate_world(WorldConfig{}, 3, Split::unseen);
  NavWorld back = world_from_json(nlohmann::json::parse(to_json(w).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(w).dump());
  EXPECT_EQ(back.adjacency, w.adjacency);
}

TEST(World, ZeroRhoMatchesUnseenTables) {
  WorldConfig c;
  c.rho_vision = 0.0;
  for (int r = 0; r < c.rooms; ++r) EXPECT_EQ(object_weights(c, Split::seen, r), object_weights(c, Split::unseen, r));
  c.rho_vision = 0.5;
  EXPECT_NE(object_weights(c, Split::seen, 0), object_weights(c, Split::unseen, 0));
}

TEST(World, FullRhoAlwaysPlacesSignatureObjects) {
  WorldConfig c;
  c.rho_vision = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    NavWorld w = generate_world(c, seed, Split::seen);
    for (const auto& n : w.nodes)
      for (int s : signature_objects(c, n.room))
        EXPECT_TRUE(std::binary_search(n.objects.begin(), n.objects.end(), s));
  }
}

TEST(Geodesic, BasicExamples) {
  NavWorld w = line_world({0.0, 1.0, 3.0});
  EXPECT_EQ(geodesic(w, 1, 1), 0.0);
  EXPECT_EQ(geodesic(w, 0, 2), 3.0);
  EXPECT_EQ(shortest_path(w, 0, 2).path, (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(geodesic(w, 0, 9), std::out_of_range);
}

TEST(Geodesic, DisconnectedPairErrors) {
  NavWorld w = line_world({0.0, 1.0, 2.0});
  w.edges.pop_back();
  w.rebuild_adjacency();
  EXPECT_THROW(geodesic(w, 0, 2), std::runtime_error);
}

TEST(Geodesic, SymmetricAndTriangleOnRandomWorlds) {
  Rng rng(77);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    WorldConfig c;
    c.nodes = 6 + static_cast<int>(seed % 20);
    NavWorld w = generate_world(c, 1000 + seed, Split::seen);
    GeodesicTable g(w);
    for (int trial = 0; trial < 10; ++trial) {
      const int a = static_cast<int>(rng.index(w.size())), b = static_cast<int>(rng.index(w.size())),
                m = static_cast<int>(rng.index(w.size()));
      EXPECT_EQ(g(a, b), g(b, a));
      EXPECT_LE(g(a, b), g(a, m) + g(m, b) + 1e-12);
      EXPECT_DOUBLE_EQ(g(a, b), geodesic(w, a, b));
    }
  }
}

TEST(Episode, PathIsGeodesicAndWellFormed) {
  WorldConfig c;
  for (std::uint64_t ws = 0; ws < 10; ++ws) {
    NavWorld w = generate_world(c, ws, Split::seen);
    for (std::uint64_t es = 0; es < 20; ++es) {
      Episode e = generate_episode(w, es);
      const int steps = static_cast<int>(e.path.size()) - 1;
      EXPECT_GE(steps, c.min_path);
      EXPECT_LE(steps, c.max_path);
      double len = 0.0;
      for (int s = 0; s < steps; ++s) {
        ASSERT_TRUE(w.adjacent(e.path[s], e.path[s + 1]));
        len += w.edge_length(e.path[s], e.path[s + 1]);
      }
      EXPECT_NEAR(len, geodesic(w, e.path.front(), e.path.back()), 1e-12);
      EXPECT_EQ(e.goal, e.path.back());
      EXPECT_GT(e.success_radius, 0.0);
      EXPECT_EQ(e.tokens.front(), vocab::cls);
      EXPECT_EQ(e.step_directions.size(), static_cast<std::size_t>(steps));
      for (std::size_t s = 0; s < e.step_landmarks.size(); ++s) {
        const auto& objs = w.node(e.path[s + 1]).objects;
        EXPECT_TRUE(std::binary_search(objs.begin(), objs.end(), e.step_landmarks[s] - vocab::landmark_base));
      }
    }
  }
}

TEST(Episode, DeterministicForSeed) {
  NavWorld w = generate_world(WorldConfig{}, 5, Split::seen);
  EXPECT_EQ(to_json(generate_episode(w, 42)).dump(), to_json(generate_episode(w, 42)).dump());
  auto e = generate_episode(w, 42);
  EXPECT_EQ(to_json(episode_from_json(to_json(e))).dump(), to_json(e).dump());
}

TEST(Episode, StraightCorridorIsAllForward) {
  NavWorld w = line_world({0.0, 1.0, 2.0, 3.0});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Episode e = generate_episode(w, seed);
    for (int tok : e.step_directions) EXPECT_EQ(vocab::turn_of(tok), vocab::forward);
  }
}

TEST(Episode, UnsatisfiableLengthErrors) {
  NavWorld w = line_world({0.0, 1.0, 2.0});
  w.config.min_path = 5;
  w.config.max_path = 6;
  EXPECT_THROW(generate_episode(w, 1, 50), EpisodeError);
}

TEST(Episode, TurnQuantization) {
  const double pi = std::numbers::pi;
  EXPECT_EQ(quantize_turn(0.1), vocab::forward);
  EXPECT_EQ(quantize_turn(pi / 2), vocab::left);
  EXPECT_EQ(quantize_turn(-pi / 2), vocab::right);
  EXPECT_EQ(quantize_turn(pi), vocab::back);
  EXPECT_EQ(quantize_turn(2 * pi - 0.1), vocab::forward);
}

TEST(Episode, LanguageBiasDial) {
  // P(correlated landmark | direction word) rises with rho_language; at zero
  // it matches the unconditional landmark rate.
  auto rate = [](double rho) {
    WorldConfig c;
    c.rho_language = rho;
    std::vector<stats::EventRecord> recs;
    for (std::uint64_t ws = 0; ws < 20; ++ws) {
      NavWorld w = generate_world(c, ws, Split::seen);
      for (std::uint64_t es = 0; es < 100; ++es) {
        auto r = instruction_events(generate_episode(w, es), c.objects);
        recs.insert(recs.end(), r.begin(), r.end());
      }
    }
    auto table = stats::ingest(instruction_event_schema(c), recs);
    const std::string dir = vocab::name(vocab::direction_token(vocab::forward, 0), c.objects);
    const std::string lm = vocab::name(
        vocab::landmark_token(vocab::correlated_object(vocab::direction_token(vocab::forward, 0), c.objects)), c.objects);
    const double cond = stats::observational(table, {{"landmark", lm}}, {{"direction", dir}});
    const double marginal = static_cast<double>(table.count({{"landmark", lm}})) / static_cast<double>(table.total());
    return std::pair{cond, marginal};
  };
  auto [c0, m0] = rate(0.0);
  auto [c8, m8] = rate(0.8);
  EXPECT_NEAR(c0, m0, 0.03);
  EXPECT_GT(c8, c0 + 0.05);
  (void)m8;
}

TEST(Observe, DirectionEncodingAndShapes) {
  NavWorld w = line_world({0.0, 1.0, 2.0});
  w.config.feature_dim = 4;
  Perception p(w.config);
  Observation o = observe(w, p, 1, 0.0, nullptr);
  ASSERT_EQ(o.candidates.size(), 2u);
  const Candidate& east = o.candidates[1];
  EXPECT_EQ(east.node, 2);
  EXPECT_NEAR(east.sin_theta, 0.0, 1e-15);
  EXPECT_NEAR(east.cos_theta, 1.0, 1e-15);
  EXPECT_NEAR(o.candidates[0].cos_theta, -1.0, 1e-15);
  for (const auto& c : o.candidates) EXPECT_NEAR(std::hypot(c.sin_theta, c.cos_theta), 1.0, 1e-15);
  EXPECT_EQ(o.objects.size(), 4u);
  EXPECT_THROW(observe(w, p, 5, 0.0, nullptr), std::out_of_range);
}

TEST(Observe, NoiseSemantics) {
  NavWorld w = line_world({0.0, 1.0, 2.0});
  w.config.feature_dim = 8;
  Perception p(w.config);
  // Nodes 0 and 2 share room and objects.
  Observation clean = observe(w, p, 1, 0.0, nullptr);
  EXPECT_EQ(clean.candidates[0].feature, clean.candidates[1].feature);
  Rng noise(1);
  Observation a = observe(w, p, 1, 0.0, &noise), b = observe(w, p, 1, 0.0, &noise);
  EXPECT_NE(a.candidates[0].feature, b.candidates[0].feature);
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_EQ(a.objects[i].class_id, b.objects[i].class_id);
    EXPECT_NE(a.objects[i].feature, b.objects[i].feature);
  }
}

TEST(Events, FullVisionBiasGivesCertainSignature) {
  WorldConfig c;
  c.rho_vision = 1.0;
  std::vector<stats::EventRecord> recs;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto r = node_events(generate_world(c, s, Split::seen));
    recs.insert(recs.end(), r.begin(), r.end());
  }
  auto table = stats::ingest(node_event_schema(c), recs);
  for (int room = 0; room < c.rooms; ++room) {
    const std::string rn = "r" + std::to_string(room);
    if (table.count({{"room", rn}}) == 0) continue;
    for (int s : signature_objects(c, room))
      EXPECT_EQ(stats::observational(table, {{"obj" + std::to_string(s), "1"}}, {{"room", rn}}), 1.0);
  }
}

TEST(Events, HandBuiltWorldReproducesCountFixture) {
  // Ten nodes: room plays Z, object 0 plays X, object 1 plays Y.
  const std::vector<std::tuple<int, int, int, int>> cells = {{0, 1, 1, 3}, {0, 1, 0, 1}, {0, 0, 1, 1}, {0, 0, 0, 1},
                                                             {1, 1, 0, 1}, {1, 0, 1, 1}, {1, 0, 0, 2}};
  NavWorld w;
  w.config.rooms = 2;
  w.config.objects = 3;
  for (const auto& [z, x, y, n] : cells)
    for (int i = 0; i < n; ++i) {
      Node node{static_cast<int>(w.nodes.size()), 0.0, 0.0, z, {}};
      if (x) node.objects.push_back(0);
      if (y) node.objects.push_back(1);
      node.objects.push_back(2);
      w.nodes.push_back(node);
    }
  ASSERT_EQ(w.nodes.size(), 10u);
  auto table = stats::ingest(node_event_schema(w.config), node_events(w));
  EXPECT_NEAR(stats::observational(table, {{"obj1", "1"}}, {{"obj0", "1"}}), 0.60, 1e-15);
  EXPECT_NEAR(stats::interventional(table, {{"obj1", "1"}}, {{"obj0", "1"}}, "room").probability, 0.45, 1e-15);
}

TEST(Events, ConfoundingDialIsMonotone) {
  // Signature pair of room 0 under stratification by room.
  auto delta = [](double rho) {
    WorldConfig c;
    c.rho_vision = rho;
    std::vector<stats::EventRecord> recs;
    for (std::uint64_t s = 0; recs.size() < 10000; ++s) {
      auto r = node_events(generate_world(c, 500 + s, Split::seen));
      recs.insert(recs.end(), r.begin(), r.end());
    }
    auto table = stats::ingest(node_event_schema(c), recs);
    auto rows = stats::shift_report(table, {{{{"obj0", "1"}}, {{"obj1", "1"}}}}, "room");
    return std::abs(rows.at(0).delta);
  };
  const double d0 = delta(0.0), d5 = delta(0.5), d1 = delta(1.0);
  EXPECT_LE(d0, 0.02);
  EXPECT_LE(d0, d5);
  EXPECT_LE(d5, d1);
}
