#pragma once
// AdamW with decoupled weight decay and optional per-element learning-rate
// multipliers. The multiplier map is keyed by parameter name; absent entries
// mean multiplier 1 everywhere, which reproduces plain AdamW exactly.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dppn/tensor.hpp"

namespace dppn {

// Ordered named parameter list. Order is the serialization and update order.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

using LrMultipliers = std::map<std::string, std::vector<float>>;

class AdamW {
 public:
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;

  int64_t step_count() const { return t_; }

  // One optimizer step over all parameters. A parameter with no gradient
  // buffer is a contract violation: every step must follow a backward.
  void step(ParamMap& params, const LrMultipliers* mults = nullptr) {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t_));
    for (auto& [name, p] : params) {
      if (!p.has_grad())
        throw std::logic_error("AdamW::step: parameter '" + name + "' has no gradient");
      auto& st = state_[name];
      const size_t n = p.values().size();
      if (st.m.size() != n) {
        st.m.assign(n, 0.0f);
        st.v.assign(n, 0.0f);
      }
      const float* mult = nullptr;
      if (mults) {
        auto it = mults->find(name);
        if (it != mults->end()) {
          if (it->second.size() != n)
            throw std::invalid_argument("AdamW::step: multiplier size mismatch for '" + name + "'");
          mult = it->second.data();
        }
      }
      float* w = p.data();
      const float* g = p.grad();
      for (size_t i = 0; i < n; ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0f - beta1) * g[i];
        st.v[i] = beta2 * st.v[i] + (1.0f - beta2) * g[i] * g[i];
        const float mhat = st.m[i] / bc1;
        const float vhat = st.v[i] / bc2;
        const float lr_i = lr * (mult ? mult[i] : 1.0f);
        w[i] -= lr_i * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
      }
    }
  }

  void zero_grad(ParamMap& params) {
    for (auto& [name, p] : params) {
      (void)name;
      p.zero_grad();
    }
  }

 private:
  struct State {
    std::vector<float> m, v;
  };
  std::map<std::string, State> state_;
  int64_t t_ = 0;
};

}  // namespace dppn
