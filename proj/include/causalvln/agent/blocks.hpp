#pragma once

// Transformer pieces shared by the encoders and the cross-modal stacks.
// Every block is post-norm and single-head.

#include <cmath>
#include <string>
#include <vector>

#include "causalvln/diffcore.hpp"

namespace causalvln::agent {

inline double fan_in_sd(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

struct Dense {
  Parameter W;
  Parameter b;

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng)
      : W(rng.normal_tensor(in, out, fan_in_sd(in))), b(Tensor(1, out, 0.0)) {}

  Var operator()(Tape& t, Var x) { return add_row(matmul(x, t.param(W)), t.param(b)); }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".W", &W);
    out.emplace_back(prefix + ".b", &b);
  }
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(Tensor(1, d, 1.0)), bias(Tensor(1, d, 0.0)) {}

  Var operator()(Tape& t, Var x) { return layer_norm(x, t.param(gain), t.param(bias)); }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".gain", &gain);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

/// Keys and values of an attended sequence, computed once and reused by
/// every query against it.
struct KeyValue {
  Var k;
  Var v;
};

/// LN(X + attention(X W_q, Y W_k, Y W_v) W_o)
struct AttnBlock {
  Parameter W_q;
  Parameter W_k;
  Parameter W_v;
  Parameter W_o;
  LayerNorm ln;

  AttnBlock() = default;
  AttnBlock(std::size_t d, Rng& rng)
      : W_q(rng.normal_tensor(d, d, fan_in_sd(d))),
        W_k(rng.normal_tensor(d, d, fan_in_sd(d))),
        W_v(rng.normal_tensor(d, d, fan_in_sd(d))),
        W_o(rng.normal_tensor(d, d, fan_in_sd(d))),
        ln(d) {}

  KeyValue project(Tape& t, Var Y) { return {matmul(Y, t.param(W_k)), matmul(Y, t.param(W_v))}; }

  Var forward(Tape& t, Var X, const KeyValue& kv) {
    Var a = attention(matmul(X, t.param(W_q)), kv.k, kv.v);
    return ln(t, add(X, matmul(a, t.param(W_o))));
  }

  Var self(Tape& t, Var X) { return forward(t, X, project(t, X)); }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".W_q", &W_q);
    out.emplace_back(prefix + ".W_k", &W_k);
    out.emplace_back(prefix + ".W_v", &W_v);
    out.emplace_back(prefix + ".W_o", &W_o);
    ln.collect(out, prefix + ".ln");
  }
};

/// LN(X + GELU(X W_1 + b_1) W_2 + b_2)
struct FfnBlock {
  Dense up;
  Dense down;
  LayerNorm ln;

  FfnBlock() = default;
  FfnBlock(std::size_t d, std::size_t hidden, Rng& rng) : up(d, hidden, rng), down(hidden, d, rng), ln(d) {}

  Var forward(Tape& t, Var X) { return ln(t, add(X, down(t, gelu(up(t, X))))); }

  void collect(ParamList& out, const std::string& prefix) {
    up.collect(out, prefix + ".up");
    down.collect(out, prefix + ".down");
    ln.collect(out, prefix + ".ln");
  }
};

/// Self-attention followed by a feed-forward block.
struct EncoderLayer {
  AttnBlock attn;
  FfnBlock ffn;

  EncoderLayer() = default;
  EncoderLayer(std::size_t d, std::size_t hidden, Rng& rng) : attn(d, rng), ffn(d, hidden, rng) {}

  Var forward(Tape& t, Var X) { return ffn.forward(t, attn.self(t, X)); }

  void collect(ParamList& out, const std::string& prefix) {
    attn.collect(out, prefix + ".attn");
    ffn.collect(out, prefix + ".ffn");
  }
};

/// Cross-attention to another sequence, then self-attention and a
/// feed-forward block. `with_self` = false drops the self-attention part.
struct CrossLayer {
  AttnBlock cross;
  AttnBlock self_attn;
  FfnBlock ffn;
  bool with_self = true;

  CrossLayer() = default;
  CrossLayer(std::size_t d, std::size_t hidden, Rng& rng, bool self = true)
      : cross(d, rng), ffn(d, hidden, rng), with_self(self) {
    if (self) self_attn = AttnBlock(d, rng);
  }

  Var forward(Tape& t, Var X, const KeyValue& kv) {
    Var h = cross.forward(t, X, kv);
    if (with_self) h = self_attn.self(t, h);
    return ffn.forward(t, h);
  }

  void collect(ParamList& out, const std::string& prefix) {
    cross.collect(out, prefix + ".cross");
    if (with_self) self_attn.collect(out, prefix + ".self");
    ffn.collect(out, prefix + ".ffn");
  }
};

}  // namespace causalvln::agent
