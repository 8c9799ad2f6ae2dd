#pragma once

// The navigation agent: backdoor causal encoders for instructions and
// observations, global/local cross-modal fusion with a recurrent memory
// vector, and the blended decision head.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalvln/agent/blocks.hpp"
#include "causalvln/confounder_dict.hpp"
#include "causalvln/intervention.hpp"
#include "causalvln/navworld.hpp"

namespace causalvln::agent {

/// splitmix64 finalizer; derives independent stream seeds from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct AgentConfig {
  std::size_t d_h = 64;
  std::size_t d_m = 32;  // must equal the world's feature_dim
  std::size_t n_lang = 2;
  std::size_t n_vis = 1;
  std::size_t n_cross = 2;
  std::size_t heads = 1;  // heads of type-2 intervention layers
  std::size_t ffn_mult = 2;
  std::size_t max_len = 64;
  std::size_t max_steps = 10;
  int objects = 16;  // object classes, fixes the vocabulary
  ibrl::LayerKind lang_kind = ibrl::LayerKind::type2;
  ibrl::LayerKind vis_kind = ibrl::LayerKind::type1;
  bool instr = true;
  bool obj = true;
  bool room = true;

  bool lang_intervenes() const { return instr && lang_kind != ibrl::LayerKind::off; }
  ibrl::LayerKind room_kind() const { return room ? vis_kind : ibrl::LayerKind::off; }
  ibrl::LayerKind obj_kind() const { return obj ? vis_kind : ibrl::LayerKind::off; }

  /// Depths of the full-scale model (language 9, vision 2, cross-modal 4).
  static AgentConfig full_scale() {
    AgentConfig c;
    c.n_lang = 9;
    c.n_vis = 2;
    c.n_cross = 4;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw nav::ConfigError("agent config: " + m); };
    if (d_h == 0 || d_m == 0) fail("dimensions must be positive");
    if (n_lang == 0 || n_vis == 0 || n_cross == 0) fail("layer counts must be positive");
    if (heads == 0 || d_h % heads != 0) fail("heads must divide d_h");
    if (ffn_mult == 0) fail("ffn_mult must be positive");
    if (max_len < 2) fail("max_len must be at least 2");
    if (objects < 1) fail("objects must be positive");
  }
};

inline nlohmann::json to_json(const AgentConfig& c) {
  return {{"d_h", c.d_h},
          {"d_m", c.d_m},
          {"n_lang", c.n_lang},
          {"n_vis", c.n_vis},
          {"n_cross", c.n_cross},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"max_len", c.max_len},
          {"max_steps", c.max_steps},
          {"objects", c.objects},
          {"lang_kind", ibrl::to_string(c.lang_kind)},
          {"vis_kind", ibrl::to_string(c.vis_kind)},
          {"instr", c.instr},
          {"obj", c.obj},
          {"room", c.room}};
}

inline AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c;
  c.d_h = j.at("d_h");
  c.d_m = j.at("d_m");
  c.n_lang = j.at("n_lang");
  c.n_vis = j.at("n_vis");
  c.n_cross = j.at("n_cross");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.max_len = j.at("max_len");
  c.max_steps = j.at("max_steps");
  c.objects = j.at("objects");
  c.lang_kind = ibrl::layer_kind_from_string(j.at("lang_kind"));
  c.vis_kind = ibrl::layer_kind_from_string(j.at("vis_kind"));
  c.instr = j.at("instr");
  c.obj = j.at("obj");
  c.room = j.at("room");
  return c;
}

/// The four confounder dictionaries: object and room entries hold raw
/// visual features (d_m), direction and landmark entries hold contextual
/// token features (d_h).
struct Dictionaries {
  dict::ConfounderDictionary object;
  dict::ConfounderDictionary room;
  dict::ConfounderDictionary direction;
  dict::ConfounderDictionary landmark;

  bool operator==(const Dictionaries&) const = default;
};

inline nlohmann::json to_json(const Dictionaries& d) {
  nlohmann::json j = nlohmann::json::object();
  auto put = [&](const char* k, const dict::ConfounderDictionary& x) {
    if (!x.empty()) j[k] = dict::to_json(x);
  };
  put("object", d.object);
  put("room", d.room);
  put("direction", d.direction);
  put("landmark", d.landmark);
  return j;
}

inline Dictionaries dictionaries_from_json(const nlohmann::json& j) {
  Dictionaries d;
  auto get = [&](const char* k, dict::ConfounderDictionary& x) {
    if (j.contains(k)) x = dict::dictionary_from_json(j.at(k));
  };
  get("object", d.object);
  get("room", d.room);
  get("direction", d.direction);
  get("landmark", d.landmark);
  return d;
}

inline Tensor row_tensor(const std::vector<double>& v) { return Tensor::row_vector(v); }

// ---------------------------------------------------------------------------
// Language

struct LanguageOutput {
  Var e;      // contextual features E_w, L x d_h
  Var q;      // gated causal features Q_w, L x d_h
  Var omega;  // gate, L x 1 (invalid when the intervention is bypassed)
};

struct LinguisticEncoder {
  Parameter tok_emb;
  Parameter pos_emb;
  LayerNorm emb_ln;
  std::vector<EncoderLayer> layers;
  ibrl::GatedDualIntervention gate;
  bool intervene = true;

  LinguisticEncoder() = default;
  LinguisticEncoder(const AgentConfig& c, Rng& rng, Rng& ibrl_rng)
      : tok_emb(rng.normal_tensor(static_cast<std::size_t>(nav::vocab::size(c.objects)), c.d_h, 1.0)),
        pos_emb(rng.normal_tensor(c.max_len, c.d_h, 1.0)),
        emb_ln(c.d_h),
        gate(c.lang_intervenes() ? c.lang_kind : ibrl::LayerKind::off, c.d_h, ibrl_rng, fan_in_sd(c.d_h),
             c.heads),
        intervene(c.lang_intervenes()) {
    for (std::size_t i = 0; i < c.n_lang; ++i) layers.emplace_back(c.d_h, c.ffn_mult * c.d_h, rng);
  }

  void check_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw std::invalid_argument("empty instruction");
    if (tokens.size() > pos_emb.value.rows())
      throw std::invalid_argument("instruction of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                                  std::to_string(pos_emb.value.rows()));
    for (int tok : tokens)
      if (tok < 0 || static_cast<std::size_t>(tok) >= tok_emb.value.rows())
        throw std::out_of_range("token " + std::to_string(tok) + " outside the vocabulary");
  }

  /// E_w: embeddings plus positions through the self-attention stack.
  Var context(Tape& t, const std::vector<int>& tokens) {
    check_tokens(tokens);
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    std::vector<std::size_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    Var x = emb_ln(t, add(gather_rows(t.param(tok_emb), ids), gather_rows(t.param(pos_emb), pos)));
    for (auto& l : layers) x = l.forward(t, x);
    return x;
  }

  LanguageOutput encode(Tape& t, const std::vector<int>& tokens, const ibrl::DictVars* zd,
                        const ibrl::DictVars* zl) {
    Var e = context(t, tokens);
    if (!intervene) return {e, e, Var{}};
    if (!zd || !zl) throw std::invalid_argument("language intervention needs direction and landmark dictionaries");
    auto g = gate.forward(t, e, *zd, *zl);
    return {e, g.q, g.omega};
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".tok", &tok_emb);
    out.emplace_back(prefix + ".pos", &pos_emb);
    emb_ln.collect(out, prefix + ".emb_ln");
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layer" + std::to_string(i));
    if (intervene) gate.collect(out, prefix + ".ibrl");
  }
};

// ---------------------------------------------------------------------------
// Vision

struct VisualEncoder {
  Parameter W_dir;    // (sin, cos) -> d_m
  Parameter nav_emb;  // navigable type, 2 x d_m
  Parameter cls_emb;  // object class, O x d_m
  Parameter W_loc;    // owning candidate's (sin, cos) -> d_m
  ibrl::InterventionLayer room_layer;
  ibrl::InterventionLayer obj_layer;
  std::vector<EncoderLayer> img_layers;
  std::vector<EncoderLayer> obj_layers;
  CrossLayer align;

  VisualEncoder() = default;
  VisualEncoder(const AgentConfig& c, Rng& rng, Rng& room_rng, Rng& obj_rng, Rng& input_rng)
      : W_dir(rng.normal_tensor(2, c.d_m, 1.0)),
        nav_emb(rng.normal_tensor(2, c.d_m, 1.0)),
        cls_emb(rng.normal_tensor(static_cast<std::size_t>(c.objects), c.d_m, 1.0)),
        W_loc(rng.normal_tensor(2, c.d_m, 1.0)),
        room_layer(c.room_kind(), c.d_m, c.d_h, room_rng, fan_in_sd(c.d_m), c.heads),
        obj_layer(c.obj_kind(), c.d_m, c.d_h, obj_rng, fan_in_sd(c.d_m), c.heads) {
    // The input projections sit on the path shared with the baseline, so
    // they are drawn from one stream regardless of the layer kind.
    room_layer.input_weight() = Parameter(input_rng.normal_tensor(c.d_m, c.d_h, fan_in_sd(c.d_m)));
    obj_layer.input_weight() = Parameter(input_rng.normal_tensor(c.d_m, c.d_h, fan_in_sd(c.d_m)));
    for (std::size_t i = 0; i < c.n_vis; ++i) img_layers.emplace_back(c.d_h, c.ffn_mult * c.d_h, rng);
    for (std::size_t i = 0; i < c.n_vis; ++i) obj_layers.emplace_back(c.d_h, c.ffn_mult * c.d_h, rng);
    align = CrossLayer(c.d_h, c.ffn_mult * c.d_h, rng, false);
  }

  /// E_v: candidate image features plus direction and navigability.
  Var image_embedding(Tape& t, const nav::Observation& obs) {
    const std::size_t n = obs.candidates.size(), d = W_dir.value.cols();
    Tensor feat(n, d), dir(n, 2);
    std::vector<std::size_t> navigable(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = obs.candidates[i];
      if (c.feature.size() != d) throw DimensionError("candidate feature width differs from d_m");
      for (std::size_t j = 0; j < d; ++j) feat(i, j) = c.feature[j];
      dir(i, 0) = c.sin_theta;
      dir(i, 1) = c.cos_theta;
      navigable[i] = c.navigable ? 1 : 0;
    }
    return add(add(t.constant(std::move(feat)), matmul(t.constant(std::move(dir)), t.param(W_dir))),
               gather_rows(t.param(nav_emb), navigable));
  }

  /// E_o: object features plus class embedding and location.
  Var object_embedding(Tape& t, const nav::Observation& obs) {
    const std::size_t m = obs.objects.size(), d = W_dir.value.cols();
    Tensor feat(m, d), loc(m, 2);
    std::vector<std::size_t> cls(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& o = obs.objects[i];
      if (o.feature.size() != d) throw DimensionError("object feature width differs from d_m");
      if (o.candidate < 0 || static_cast<std::size_t>(o.candidate) >= obs.candidates.size())
        throw std::out_of_range("object refers to an unknown candidate");
      for (std::size_t j = 0; j < d; ++j) feat(i, j) = o.feature[j];
      loc(i, 0) = obs.candidates[o.candidate].sin_theta;
      loc(i, 1) = obs.candidates[o.candidate].cos_theta;
      cls[i] = static_cast<std::size_t>(o.class_id);
    }
    return add(add(t.constant(std::move(feat)), gather_rows(t.param(cls_emb), cls)),
               matmul(t.constant(std::move(loc)), t.param(W_loc)));
  }

  /// Q_{v,o}: candidates x d_h.
  Var encode(Tape& t, const nav::Observation& obs, const ibrl::DictVars* room, const ibrl::DictVars* object) {
    if (obs.candidates.empty()) throw std::invalid_argument("observation has no candidates");
    Var qv = room_layer.forward(t, image_embedding(t, obs), room);
    for (auto& l : img_layers) qv = l.forward(t, qv);
    if (obs.objects.empty()) return qv;
    Var qo = obj_layer.forward(t, object_embedding(t, obs), object);
    for (auto& l : obj_layers) qo = l.forward(t, qo);
    return align.forward(t, qv, align.cross.project(t, qo));
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".dir", &W_dir);
    out.emplace_back(prefix + ".nav", &nav_emb);
    out.emplace_back(prefix + ".cls", &cls_emb);
    out.emplace_back(prefix + ".loc", &W_loc);
    room_layer.collect(out, prefix + ".ibrl_room");
    obj_layer.collect(out, prefix + ".ibrl_obj");
    for (std::size_t i = 0; i < img_layers.size(); ++i) img_layers[i].collect(out, prefix + ".img" + std::to_string(i));
    for (std::size_t i = 0; i < obj_layers.size(); ++i) obj_layers[i].collect(out, prefix + ".obj" + std::to_string(i));
    align.collect(out, prefix + ".align");
  }
};

// ---------------------------------------------------------------------------
// Fusion

struct FusionState {
  std::vector<Var> visited;  // a_i plus step embedding, one per step
  Var memory;                // R_{t-1}, 1 x d_h
  std::size_t t = 0;         // steps fused so far
};

struct FuseOutput {
  Var f_l;  // local branch output, (C + 2) x d_h
  Var f_g;  // global branch output, (t + 2) x d_h
  Var c_g;
  Var c_l;
  Var r;        // R_t
  Var a;        // a_t
  Var weights;  // GAA weights over candidates, 1 x C
};

struct Fusion {
  Parameter W_a;  // d_h x 1
  Parameter b_a;  // 1 x 1
  Parameter cls_g;
  Parameter cls_l;
  Parameter W_here;    // d_m x d_h
  Parameter step_emb;  // (max_steps + 1) x d_h
  std::vector<CrossLayer> local;
  std::vector<CrossLayer> global;
  Dense mem;
  LayerNorm mem_ln;

  Fusion() = default;
  Fusion(const AgentConfig& c, Rng& rng)
      : W_a(rng.normal_tensor(c.d_h, 1, fan_in_sd(c.d_h))),
        b_a(Tensor(1, 1, 0.0)),
        cls_g(rng.normal_tensor(1, c.d_h, 1.0)),
        cls_l(rng.normal_tensor(1, c.d_h, 1.0)),
        W_here(rng.normal_tensor(c.d_m, c.d_h, fan_in_sd(c.d_m))),
        step_emb(rng.normal_tensor(c.max_steps + 1, c.d_h, 1.0)),
        mem(3 * c.d_h, c.d_h, rng),
        mem_ln(c.d_h) {
    for (std::size_t i = 0; i < c.n_cross; ++i) local.emplace_back(c.d_h, c.ffn_mult * c.d_h, rng);
    for (std::size_t i = 0; i < c.n_cross; ++i) global.emplace_back(c.d_h, c.ffn_mult * c.d_h, rng);
  }

  FusionState initial_state(Tape& t) const { return {{}, t.constant(Tensor(1, cls_g.value.cols(), 0.0)), 0}; }

  /// Keys and values of Q_w for every cross layer of one branch.
  std::vector<KeyValue> text_keys(Tape& t, Var q_w, bool local_branch) {
    std::vector<KeyValue> kv;
    for (auto& l : local_branch ? local : global) kv.push_back(l.cross.project(t, q_w));
    return kv;
  }

  /// A = softmax over candidates of tanh(Q W_a + b_a); a = A Q.
  std::pair<Var, Var> aggregate(Tape& t, Var q_vo) {
    Var scores = tanh(add_row(matmul(q_vo, t.param(W_a)), t.param(b_a)));
    Var w = softmax_rows(transpose(scores));
    return {matmul(w, q_vo), w};
  }

  FuseOutput step(Tape& t, FusionState& s, Var q_vo, Var here, Var c_w, const std::vector<KeyValue>& local_kv,
                  const std::vector<KeyValue>& global_kv) {
    auto [a, w] = aggregate(t, q_vo);
    const std::size_t step_row = std::min(s.t, step_emb.value.rows() - 1);
    s.visited.push_back(add(a, row(t.param(step_emb), step_row)));
    s.t += 1;

    std::vector<Var> gg{t.param(cls_g)};
    gg.insert(gg.end(), s.visited.begin(), s.visited.end());
    gg.push_back(s.memory);
    Var fg = concat_rows(gg);
    Var fl = concat_rows({add(t.param(cls_l), matmul(here, t.param(W_here))), q_vo, s.memory});
    for (std::size_t i = 0; i < global.size(); ++i) fg = global[i].forward(t, fg, global_kv[i]);
    for (std::size_t i = 0; i < local.size(); ++i) fl = local[i].forward(t, fl, local_kv[i]);

    FuseOutput o;
    o.f_g = fg;
    o.f_l = fl;
    o.c_g = row(fg, 0);
    o.c_l = row(fl, 0);
    o.r = mem_ln(t, mem(t, concat_cols({o.c_g, o.c_l, c_w})));
    o.a = a;
    o.weights = w;
    s.memory = o.r;
    return o;
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".W_a", &W_a);
    out.emplace_back(prefix + ".b_a", &b_a);
    out.emplace_back(prefix + ".cls_g", &cls_g);
    out.emplace_back(prefix + ".cls_l", &cls_l);
    out.emplace_back(prefix + ".W_here", &W_here);
    out.emplace_back(prefix + ".step", &step_emb);
    for (std::size_t i = 0; i < local.size(); ++i) local[i].collect(out, prefix + ".local" + std::to_string(i));
    for (std::size_t i = 0; i < global.size(); ++i) global[i].collect(out, prefix + ".global" + std::to_string(i));
    mem.collect(out, prefix + ".mem");
    mem_ln.collect(out, prefix + ".mem_ln");
  }
};

// ---------------------------------------------------------------------------
// Decision

struct ActionDistribution {
  Var logits;  // 1 x n, before masking
  Var probs;   // 1 x n, masked entries exactly 0
};

/// y = softmax(M(sigma D_g + (1 - sigma) D_l)).
inline ActionDistribution decide(Var d_g, Var d_l, Var sigma, const Mask& mask) {
  if (d_g.cols() == 0 || d_g.rows() != 1) throw std::invalid_argument("decide: empty global action space");
  if (d_l.rows() != 1 || d_l.cols() != d_g.cols())
    throw DimensionError("decide: local scores " + d_l.value().shape_string() + " vs global " +
                         d_g.value().shape_string());
  if (sigma.rows() != 1 || sigma.cols() != 1) throw DimensionError("decide: sigma must be a scalar");
  if (mask.size() != d_g.cols()) throw DimensionError("decide: mask length differs from the action space");
  const std::size_t n = d_g.cols();
  Var s = broadcast_cols(sigma, n);
  Var logits = add(mul(s, d_g), mul(one_minus(s), d_l));
  return {logits, softmax_rows(logits, &mask)};
}

struct DecisionHead {
  Dense c1, c2;  // phi_c
  Dense g1, g2;  // phi_g
  Dense l1, l2;  // phi_l

  DecisionHead() = default;
  DecisionHead(const AgentConfig& c, Rng& rng)
      : c1(2 * c.d_h, c.d_h, rng),
        c2(c.d_h, 1, rng),
        g1(c.d_h, c.d_h, rng),
        g2(c.d_h, 1, rng),
        l1(c.d_h, c.d_h, rng),
        l2(c.d_h, 1, rng) {}

  Var sigma(Tape& t, Var c_g, Var c_l) { return sigmoid(c2(t, gelu(c1(t, concat_cols({c_g, c_l}))))); }
  Var global_scores(Tape& t, Var h) { return transpose(g2(t, gelu(g1(t, h)))); }
  Var local_scores(Tape& t, Var h) { return transpose(l2(t, gelu(l1(t, h)))); }

  void collect(ParamList& out, const std::string& prefix) {
    c1.collect(out, prefix + ".c1");
    c2.collect(out, prefix + ".c2");
    g1.collect(out, prefix + ".g1");
    g2.collect(out, prefix + ".g2");
    l1.collect(out, prefix + ".l1");
    l2.collect(out, prefix + ".l2");
  }
};

// ---------------------------------------------------------------------------
// Agent

inline constexpr int stop_action = -1;

/// Per-episode state recorded on one tape.
struct EpisodeContext {
  Tape* tape = nullptr;
  LanguageOutput lang;
  Var c_w;
  std::vector<KeyValue> local_kv;
  std::vector<KeyValue> global_kv;
  std::optional<ibrl::DictVars> room;
  std::optional<ibrl::DictVars> object;
  FusionState fusion;
  std::vector<int> visited;            // nodes in first-visit order
  std::map<int, std::size_t> last_row;  // node -> its latest row in the global sequence
};

struct StepOutput {
  Var q_vo;
  FuseOutput fuse;
  Var sigma;
  Var d_g;
  Var d_l;
  ActionDistribution dist;
  Mask mask;
  std::vector<int> actions;  // global action ids: stop, visited nodes, new candidates
  int index_of(int node) const {
    for (std::size_t i = 0; i < actions.size(); ++i)
      if (actions[i] == node) return static_cast<int>(i);
    return -1;
  }
};

class Agent {
 public:
  Agent() = default;
  Agent(const AgentConfig& c, std::uint64_t seed) : cfg_(c) {
    c.validate();
    Rng lang_rng(derive_seed(seed, 1)), lang_ibrl(derive_seed(seed, 2)), vis_rng(derive_seed(seed, 3)),
        room_rng(derive_seed(seed, 4)), obj_rng(derive_seed(seed, 5)), input_rng(derive_seed(seed, 6)),
        fusion_rng(derive_seed(seed, 7)), head_rng(derive_seed(seed, 8));
    lang = LinguisticEncoder(c, lang_rng, lang_ibrl);
    vis = VisualEncoder(c, vis_rng, room_rng, obj_rng, input_rng);
    fusion = Fusion(c, fusion_rng);
    head = DecisionHead(c, head_rng);
  }

  const AgentConfig& config() const { return cfg_; }

  ParamList parameters() {
    ParamList out;
    lang.collect(out, "lang");
    vis.collect(out, "vis");
    fusion.collect(out, "fusion");
    head.collect(out, "head");
    return out;
  }

  std::vector<Parameter*> parameter_ptrs() {
    std::vector<Parameter*> out;
    for (auto& [name, p] : parameters()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, p] : parameters()) n += p->value.size();
    return n;
  }

  EpisodeContext begin(Tape& t, const std::vector<int>& tokens) {
    EpisodeContext ctx;
    ctx.tape = &t;
    std::optional<ibrl::DictVars> zd, zl;
    if (lang.intervene) {
      zd = dict_vars(t, dicts.direction, "direction");
      zl = dict_vars(t, dicts.landmark, "landmark");
    }
    ctx.lang = lang.encode(t, tokens, zd ? &*zd : nullptr, zl ? &*zl : nullptr);
    ctx.c_w = row(ctx.lang.q, 0);
    ctx.local_kv = fusion.text_keys(t, ctx.lang.q, true);
    ctx.global_kv = fusion.text_keys(t, ctx.lang.q, false);
    if (cfg_.room_kind() != ibrl::LayerKind::off) ctx.room = dict_vars(t, dicts.room, "room");
    if (cfg_.obj_kind() != ibrl::LayerKind::off) ctx.object = dict_vars(t, dicts.object, "object");
    ctx.fusion = fusion.initial_state(t);
    return ctx;
  }

  StepOutput step(EpisodeContext& ctx, const nav::Observation& obs) {
    Tape& t = *ctx.tape;
    StepOutput o;
    o.q_vo = vis.encode(t, obs, ctx.room ? &*ctx.room : nullptr, ctx.object ? &*ctx.object : nullptr);
    Var here = t.constant(row_tensor(obs.here));
    o.fuse = fusion.step(t, ctx.fusion, o.q_vo, here, ctx.c_w, ctx.local_kv, ctx.global_kv);
    if (!ctx.last_row.count(obs.node)) ctx.visited.push_back(obs.node);
    ctx.last_row[obs.node] = ctx.fusion.t;
    o.sigma = head.sigma(t, o.fuse.c_g, o.fuse.c_l);

    // Global action space: stop, visited nodes, then unvisited candidates.
    std::map<int, std::size_t> cand_index;
    for (std::size_t j = 0; j < obs.candidates.size(); ++j) cand_index[obs.candidates[j].node] = j;
    o.actions.push_back(stop_action);
    std::vector<Var> rows;
    for (int v : ctx.visited) {
      o.actions.push_back(v);
      rows.push_back(row(o.fuse.f_g, ctx.last_row.at(v)));
    }
    Var g_cls = row(o.fuse.f_g, 0);
    for (std::size_t j = 0; j < obs.candidates.size(); ++j) {
      const int n = obs.candidates[j].node;
      if (ctx.last_row.count(n)) continue;
      o.actions.push_back(n);
      rows.push_back(add(g_cls, row(o.q_vo, j)));
    }

    // Local scores cover stop and the current candidates; they are scattered
    // into global ids, with zeros where the local branch has no entry.
    const std::size_t c = obs.candidates.size();
    Var local = head.local_scores(t, slice_rows(o.fuse.f_l, 0, c + 1));
    Var padded = concat_cols({local, t.constant(Tensor(1, 1, 0.0))});
    std::vector<std::size_t> scatter{0};
    o.mask.assign(o.actions.size(), false);
    o.mask[0] = true;
    for (std::size_t k = 1; k < o.actions.size(); ++k) {
      auto it = cand_index.find(o.actions[k]);
      scatter.push_back(it == cand_index.end() ? c + 1 : it->second + 1);
      o.mask[k] = it != cand_index.end();
    }
    o.d_l = gather_cols(padded, scatter);
    o.d_g = concat_cols({slice_cols(local, 0, 1), head.global_scores(t, concat_rows(rows))});
    o.dist = decide(o.d_g, o.d_l, o.sigma, o.mask);
    return o;
  }

  Dictionaries dicts;
  LinguisticEncoder lang;
  VisualEncoder vis;
  Fusion fusion;
  DecisionHead head;

 private:
  static ibrl::DictVars dict_vars(Tape& t, const dict::ConfounderDictionary& d, const char* what) {
    if (d.empty()) throw std::invalid_argument(std::string("agent needs a ") + what + " dictionary");
    return ibrl::dict_vars(t, d);
  }

  AgentConfig cfg_;
};

}  // namespace causalvln::agent
