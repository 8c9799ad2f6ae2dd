#pragma once

#include <cmath>
#include <span>

#include "causalvln/diffcore/tape.hpp"

namespace causalvln {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  /// Full-scale fine-tuning setting from the reference VLN setup.
  static AdamWConfig full_scale() { return AdamWConfig{5e-5, 0.9, 0.999, 1e-8, 0.01}; }
};

/// Decoupled weight decay followed by a bias-corrected adaptive-moment update.
/// Throws NumericError before touching any parameter if a gradient is not finite.
inline void adamw_step(std::span<Parameter* const> params, const AdamWConfig& cfg) {
  for (const Parameter* p : params)
    if (!p->grad.all_finite()) throw NumericError("adamw_step: non-finite gradient, step aborted");

  for (Parameter* p : params) {
    p->steps += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->steps));
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    auto w = p->value.data();
    auto g = p->grad.data();
    auto m = p->first_moment.data();
    auto v = p->second_moment.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace causalvln
