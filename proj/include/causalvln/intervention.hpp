#pragma once

// Backdoor intervention layers: a prior-weighted dictionary expectation
// (type 1), attention over dictionary entries (type 2), and the gated fusion
// of two interventions used on instruction features.

#include <cmath>
#include <string>
#include <variant>

#include "causalvln/confounder_dict.hpp"
#include "causalvln/diffcore.hpp"

namespace causalvln::ibrl {

enum class LayerKind { type1, type2, off };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::type1: return "type1";
    case LayerKind::type2: return "type2";
    case LayerKind::off: return "off";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::type1, LayerKind::type2, LayerKind::off})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown intervention layer '" + s + "'");
}

/// Dictionary means (K x d_m) and priors (1 x K) recorded as tape constants.
struct DictVars {
  Var means;
  Var priors;
};

inline DictVars dict_vars(Tape& t, const dict::ConfounderDictionary& d) {
  return {t.constant(d.means()), t.constant(d.priors())};
}

namespace detail {

inline void check_dict(const DictVars& z, std::size_t d_m) {
  if (z.means.cols() != d_m)
    throw DimensionError("dictionary dimension " + std::to_string(z.means.cols()) + " differs from layer input " +
                         std::to_string(d_m));
  if (z.priors.rows() != 1 || z.priors.cols() != z.means.rows())
    throw DimensionError("dictionary priors do not match its entries");
}

}  // namespace detail

/// out = X W_x + broadcast((p^T Z) W_z)
struct Type1Layer {
  Parameter W_z;
  Parameter W_x;

  Type1Layer() = default;
  Type1Layer(std::size_t d_m, std::size_t d_h, Rng& rng, double stddev)
      : W_z(rng.normal_tensor(d_m, d_h, stddev)), W_x(rng.normal_tensor(d_m, d_h, stddev)) {}

  std::size_t d_m() const { return W_x.value.rows(); }

  /// The input-independent intervention term, 1 x d_h.
  Var expectation(Tape& t, const DictVars& z) {
    detail::check_dict(z, d_m());
    return matmul(matmul(z.priors, z.means), t.param(W_z));
  }

  Var forward(Tape& t, Var X, const DictVars& z) {
    Var ez = expectation(t, z);
    return add(matmul(X, t.param(W_x)), broadcast_rows(ez, X.rows()));
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".W_z", &W_z);
    out.emplace_back(prefix + ".W_x", &W_x);
  }
};

/// out = X W_x + softmax((X W_q)(Z W_k)^T / sqrt(d_k)) (Z W_v), optionally
/// split into heads along the projection width.
struct Type2Layer {
  Parameter W_q;
  Parameter W_k;
  Parameter W_v;
  Parameter W_x;
  std::size_t heads = 1;

  Type2Layer() = default;
  Type2Layer(std::size_t d_m, std::size_t d_h, Rng& rng, double stddev, std::size_t num_heads = 1)
      : W_q(rng.normal_tensor(d_m, d_h, stddev)),
        W_k(rng.normal_tensor(d_m, d_h, stddev)),
        W_v(rng.normal_tensor(d_m, d_h, stddev)),
        W_x(rng.normal_tensor(d_m, d_h, stddev)),
        heads(num_heads) {
    if (num_heads == 0 || d_h % num_heads != 0)
      throw std::invalid_argument("head count must divide the projection width");
  }

  std::size_t d_m() const { return W_x.value.rows(); }
  std::size_t d_k() const { return W_q.value.cols() / heads; }

  /// The attention term E_z2, L x d_h.
  Var attend(Tape& t, Var X, const DictVars& z) {
    detail::check_dict(z, d_m());
    Var q = matmul(X, t.param(W_q));
    Var k = matmul(z.means, t.param(W_k));
    Var v = matmul(z.means, t.param(W_v));
    if (heads == 1) return attention(q, k, v);
    const std::size_t dk = d_k();
    const std::size_t dv = W_v.value.cols() / heads;
    std::vector<Var> parts;
    for (std::size_t h = 0; h < heads; ++h)
      parts.push_back(attention(slice_cols(q, h * dk, (h + 1) * dk), slice_cols(k, h * dk, (h + 1) * dk),
                                slice_cols(v, h * dv, (h + 1) * dv)));
    return concat_cols(parts);
  }

  Var forward(Tape& t, Var X, const DictVars& z) { return add(matmul(X, t.param(W_x)), attend(t, X, z)); }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".W_q", &W_q);
    out.emplace_back(prefix + ".W_k", &W_k);
    out.emplace_back(prefix + ".W_v", &W_v);
    out.emplace_back(prefix + ".W_x", &W_x);
  }
};

/// One intervention slot. `off` keeps only the X W_x path so that parameter
/// counts line up with the intervened variants.
class InterventionLayer {
 public:
  InterventionLayer() = default;
  InterventionLayer(LayerKind kind, std::size_t d_m, std::size_t d_h, Rng& rng, double stddev,
                    std::size_t heads = 1)
      : kind_(kind) {
    switch (kind) {
      case LayerKind::type1: layer_ = Type1Layer(d_m, d_h, rng, stddev); break;
      case LayerKind::type2: layer_ = Type2Layer(d_m, d_h, rng, stddev, heads); break;
      case LayerKind::off: layer_ = Parameter(rng.normal_tensor(d_m, d_h, stddev)); break;
    }
  }

  LayerKind kind() const { return kind_; }

  Var forward(Tape& t, Var X, const DictVars* z) {
    if (auto* w = std::get_if<Parameter>(&layer_)) return matmul(X, t.param(*w));
    if (!z) throw std::invalid_argument("intervention layer needs a dictionary");
    if (auto* l1 = std::get_if<Type1Layer>(&layer_)) return l1->forward(t, X, *z);
    return std::get<Type2Layer>(layer_).forward(t, X, *z);
  }

  Parameter& input_weight() {
    if (auto* w = std::get_if<Parameter>(&layer_)) return *w;
    if (auto* l1 = std::get_if<Type1Layer>(&layer_)) return l1->W_x;
    return std::get<Type2Layer>(layer_).W_x;
  }

  void collect(ParamList& out, const std::string& prefix) {
    if (auto* w = std::get_if<Parameter>(&layer_)) out.emplace_back(prefix + ".W_x", w);
    else if (auto* l1 = std::get_if<Type1Layer>(&layer_)) l1->collect(out, prefix);
    else std::get<Type2Layer>(layer_).collect(out, prefix);
  }

  Type1Layer* type1() { return std::get_if<Type1Layer>(&layer_); }
  Type2Layer* type2() { return std::get_if<Type2Layer>(&layer_); }

 private:
  LayerKind kind_ = LayerKind::off;
  std::variant<Parameter, Type1Layer, Type2Layer> layer_;
};

struct GateOutput {
  Var u;      // summed interventions, L x d_h
  Var omega;  // per-row gate, L x 1
  Var q;      // fused output, L x d_h
};

/// Two interventions on the same features (direction and landmark
/// dictionaries), summed, then mixed with the raw features by a sigmoid gate.
/// The gate bias is a scalar so that the gate is one value per row.
struct GatedDualIntervention {
  InterventionLayer layer_d;
  InterventionLayer layer_l;
  Parameter W_gq;
  Parameter W_ge;
  Parameter b_g;

  GatedDualIntervention() = default;
  GatedDualIntervention(LayerKind kind, std::size_t d_h, Rng& rng, double stddev, std::size_t heads = 1)
      : layer_d(kind, d_h, d_h, rng, stddev, heads),
        layer_l(kind, d_h, d_h, rng, stddev, heads),
        W_gq(rng.normal_tensor(d_h, 1, stddev)),
        W_ge(rng.normal_tensor(d_h, 1, stddev)),
        b_g(Tensor(1, 1, 0.0)) {}

  Var dual(Tape& t, Var E, const DictVars& zd, const DictVars& zl) {
    return add(layer_d.forward(t, E, &zd), layer_l.forward(t, E, &zl));
  }

  GateOutput gate(Tape& t, Var U, Var E) {
    if (U.rows() != E.rows() || U.cols() != E.cols())
      throw DimensionError("gate inputs differ in shape: " + U.value().shape_string() + " vs " +
                           E.value().shape_string());
    Var pre = add_row(add(matmul(U, t.param(W_gq)), matmul(E, t.param(W_ge))), t.param(b_g));
    Var omega = sigmoid(pre);
    Var w = broadcast_cols(omega, U.cols());
    Var q = add(mul(w, U), mul(one_minus(w), E));
    return {U, omega, q};
  }

  GateOutput forward(Tape& t, Var E, const DictVars& zd, const DictVars& zl) { return gate(t, dual(t, E, zd, zl), E); }

  void collect(ParamList& out, const std::string& prefix) {
    layer_d.collect(out, prefix + ".direction");
    layer_l.collect(out, prefix + ".landmark");
    out.emplace_back(prefix + ".gate.W_q", &W_gq);
    out.emplace_back(prefix + ".gate.W_e", &W_ge);
    out.emplace_back(prefix + ".gate.b", &b_g);
  }
};

}  // namespace causalvln::ibrl
