#pragma once

// Hand-built worlds, dictionaries and configurations shared by the unit tests
// and the acceptance harness.

#include <cmath>
#include <vector>

#include "causalvln/agent.hpp"

namespace causalvln::testing {

inline dict::ConfounderDictionary make_dict(const std::vector<std::vector<double>>& means,
                                          const std::vector<double>& priors,
                                          dict::Family f = dict::Family::object) {
  std::vector<dict::Entry> entries;
  for (std::size_t k = 0; k < means.size(); ++k) entries.push_back({static_cast<int>(k), means[k], 1, priors[k]});
  return dict::ConfounderDictionary(f, means.empty() ? 2 : means[0].size(), entries);
}

inline ibrl::Type1Layer identity_type1(std::size_t d) {
  ibrl::Type1Layer l;
  l.W_z = Parameter(Tensor::identity(d));
  l.W_x = Parameter(Tensor::identity(d));
  return l;
}

inline ibrl::Type2Layer identity_type2(std::size_t d) {
  ibrl::Type2Layer l;
  l.W_q = Parameter(Tensor::identity(d));
  l.W_k = Parameter(Tensor::identity(d));
  l.W_v = Parameter(Tensor::identity(d));
  l.W_x = Parameter(Tensor::identity(d));
  return l;
}

// 0 -(4)- 1 -(6)- 2, plus a 0 -(1)- 3 spur and a 1 -(1)- 4 spur.
inline nav::NavWorld line_world() {
  nav::NavWorld w;
  w.nodes = {{0, 0, 0, 0, {0}}, {1, 4, 0, 0, {0}}, {2, 10, 0, 0, {0}}, {3, 0, 1, 0, {0}}, {4, 4, 1, 0, {0}}};
  w.edges = {{0, 1, 4.0}, {1, 2, 6.0}, {0, 3, 1.0}, {1, 4, 1.0}};
  w.rebuild_adjacency();
  return w;
}

inline nav::Episode line_episode(double radius = 0.5) {
  nav::Episode e;
  e.id = "fx";
  e.path = {0, 1, 2};
  e.goal = 2;
  e.success_radius = radius;
  return e;
}

// Node 0 at the origin with neighbors 1 (east) and 2 (north); 1 and 2 are
// also joined so every node has two candidates.
inline nav::NavWorld fork_world(int objects = 4, int dim = 4) {
  nav::NavWorld w;
  w.config.objects = objects;
  w.config.rooms = 2;
  w.config.feature_dim = dim;
  w.config.objects_per_node = 2;
  w.config.min_path = 1;
  w.config.max_path = 2;
  w.config.nodes = 4;
  w.nodes = {{0, 0, 0, 0, {0, 1}}, {1, 1, 0, 1, {1, 2}}, {2, 0, 1, 1, {2, 3}}};
  w.edges = {{0, 1, 1.0}, {0, 2, 1.0}, {1, 2, std::sqrt(2.0)}};
  w.rebuild_adjacency();
  return w;
}

inline nav::Episode fork_episode(std::vector<int> path) {
  nav::Episode e;
  e.id = "fork";
  e.path = path;
  e.goal = path.back();
  e.success_radius = 0.25;
  e.start_heading = 0.0;
  e.tokens = {nav::vocab::cls};
  for (std::size_t s = 1; s < path.size(); ++s) {
    e.tokens.push_back(nav::vocab::direction_token(nav::vocab::left, 0));
    e.tokens.push_back(nav::vocab::landmark_token(2));
  }
  return e;
}

inline agent::AgentConfig tiny_config(int objects = 4, std::size_t dim = 4) {
  agent::AgentConfig c;
  c.d_h = 8;
  c.d_m = dim;
  c.objects = objects;
  c.n_lang = 1;
  c.n_vis = 1;
  c.n_cross = 1;
  c.max_len = 16;
  c.max_steps = 4;
  return c;
}

inline dict::ConfounderDictionary family_dict(dict::Family f, int k, std::size_t dim, Rng& rng,
                                             int first_class = 0) {
  std::vector<dict::Entry> entries;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    dict::Entry e{first_class + i, {}, static_cast<std::uint64_t>(1 + rng.index(5)), 0.0};
    for (std::size_t j = 0; j < dim; ++j) e.mean.push_back(rng.normal());
    total += static_cast<double>(e.count);
    entries.push_back(std::move(e));
  }
  for (auto& e : entries) e.prior = static_cast<double>(e.count) / total;
  return dict::ConfounderDictionary(f, dim, std::move(entries));
}

inline void give_dictionaries(agent::Agent& a, Rng& rng) {
  const auto& c = a.config();
  a.dicts.object = family_dict(dict::Family::object, 3, c.d_m, rng);
  a.dicts.room = family_dict(dict::Family::room, 2, c.d_m, rng);
  a.dicts.direction = family_dict(dict::Family::direction, 3, c.d_h, rng, nav::vocab::direction_base);
  a.dicts.landmark = family_dict(dict::Family::landmark, 4, c.d_h, rng, nav::vocab::landmark_base);
}

inline nav::Observation two_candidate_observation(Rng& rng, std::size_t dim) {
  nav::Observation o;
  o.node = 0;
  for (std::size_t j = 0; j < dim; ++j) o.here.push_back(rng.normal());
  for (int c = 0; c < 2; ++c) {
    nav::Candidate cand;
    cand.node = c + 1;
    const double th = c == 0 ? -0.5 : 1.2;
    cand.sin_theta = std::sin(th);
    cand.cos_theta = std::cos(th);
    for (std::size_t j = 0; j < dim; ++j) cand.feature.push_back(rng.normal());
    o.candidates.push_back(cand);
    for (int k = 0; k < 2; ++k) {
      nav::ObjectView v{static_cast<int>(rng.index(4)), c, {}};
      for (std::size_t j = 0; j < dim; ++j) v.feature.push_back(rng.normal());
      o.objects.push_back(v);
    }
  }
  return o;
}

inline nav::Observation swap_candidates(const nav::Observation& o) {
  nav::Observation s = o;
  std::swap(s.candidates[0], s.candidates[1]);
  s.objects.clear();
  for (int c : {1, 0})
    for (auto v : o.objects)
      if (v.candidate == c) {
        v.candidate = 1 - c;
        s.objects.push_back(v);
      }
  return s;
}

inline agent::RunConfig tiny_run(std::uint64_t seed = 3) {
  agent::RunConfig r;
  r.seed = seed;
  r.world.nodes = 9;
  r.world.rooms = 3;
  r.world.objects = 6;
  r.world.feature_dim = 8;
  r.world.min_path = 2;
  r.world.max_path = 3;
  r.agent.d_h = 16;
  r.agent.d_m = 8;
  r.agent.objects = 6;
  r.agent.n_lang = 1;
  r.agent.n_cross = 1;
  r.agent.max_len = 16;
  r.agent.max_steps = 5;
  r.train.iterations = 6;
  r.train.batch = 2;
  r.train.val_every = 3;
  r.train.val_episodes = 3;
  r.train.test_episodes = 3;
  r.train.train_worlds = 2;
  r.train.val_worlds = 1;
  r.train.test_worlds = 1;
  r.train.dict_episodes = 6;
  r.train.policy.mode = dict::UpdateMode::precomputed;
  return r;
}

}  // namespace causalvln::testing
