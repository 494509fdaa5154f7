// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>

#include "xasr/error.hpp"
#include "xasr/params.hpp"
#include "xasr/tensor.hpp"

namespace xasr {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. State is keyed by parameter name; a step with
/// all-zero gradients leaves parameters bit-identical.
template <typename T>
class AdamT {
 public:
  explicit AdamT(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps_taken() const { return t_; }

  void step(ParameterSetT<T>& params,
            const std::unordered_map<std::string, TensorT<T>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, entry] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) throw UsageError("optimizer_step: missing gradient for " + name);
      const TensorT<T>& g = git->second;
      if (!g.same_shape(entry.tensor)) {
        throw DimensionError("optimizer_step: gradient shape mismatch for " + name);
      }
      auto& m = state_m_.try_emplace(name, TensorT<T>(g.shape())).first->second;
      auto& v = state_v_.try_emplace(name, TensorT<T>(g.shape())).first->second;
      T* p = entry.tensor.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        p[i] = static_cast<T>(static_cast<double>(p[i]) -
                              cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, TensorT<T>> state_m_;
  std::map<std::string, TensorT<T>> state_v_;
};

using Adam = AdamT<float>;

}  // namespace xasr
