#pragma once
// Structure-completion prior: a two-layer perceptron that reconstructs full
// m x m routing patterns from partially masked ones. It is trained post hoc
// on patterns harvested from correctly predicted source samples, then blended
// into the agreement signal during early transfer epochs. The random-weights
// control keeps its initialization forever, isolating the regularization
// effect of blending in *any* smooth prior from the structural content a
// trained prior carries.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <cblas.h>

#include "dppn/model.hpp"
#include "dppn/optim.hpp"
#include "dppn/rng.hpp"
#include "dppn/tape.hpp"

namespace dppn {

class CompletionNet {
 public:
  CompletionNet(int m, uint64_t seed) : m_(m) {
    const int n = m * m;
    auto wn = [&](const std::string& name, Shape shape) {
      RngStream r = RngStream::from(seed, "cmp." + name);
      Tensor t = Tensor::zeros(shape, true);
      for (auto& x : t.values()) x = r.normal() * 0.02f;
      params_.emplace_back(name, t);
    };
    wn("cmp.w1", {n, n});
    params_.emplace_back("cmp.b1", Tensor::zeros({n}, true));
    wn("cmp.w2", {n, n});
    params_.emplace_back("cmp.b2", Tensor::zeros({n}, true));
  }

  int m() const { return m_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  // Inference: sigmoid MLP over the flattened pattern, then each row of the
  // m x m output renormalized to unit sum so the blend keeps the agreement
  // signal's scale. No tape involved; this path never trains.
  std::vector<float> complete(const std::vector<float>& patterns, int B) const {
    const int n = m_ * m_;
    if (static_cast<int>(patterns.size()) != B * n)
      throw std::invalid_argument("complete: pattern buffer size mismatch");
    std::vector<float> h(static_cast<size_t>(B) * n);
    gemm(patterns.data(), params_[0].second, B, h.data());
    add_bias_relu(h, params_[1].second, B, true);
    std::vector<float> out(static_cast<size_t>(B) * n);
    gemm(h.data(), params_[2].second, B, out.data());
    add_bias_relu(out, params_[3].second, B, false);
    for (auto& x : out) x = 1.0f / (1.0f + std::exp(-x));
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < m_; ++i) {
        float* row = out.data() + static_cast<size_t>(b) * n + static_cast<size_t>(i) * m_;
        float s = 0.0f;
        for (int j = 0; j < m_; ++j) s += row[j];
        if (s > 0.0f) {
          for (int j = 0; j < m_; ++j) row[j] /= s;
        } else {
          // Float sigmoid underflows to exactly zero below roughly -103, so an
          // all-underflowed row has nothing to renormalize; hand back uniform.
          for (int j = 0; j < m_; ++j) row[j] = 1.0f / static_cast<float>(m_);
        }
      }
    return out;
  }

  // Masked-reconstruction training: zero a random fraction of each pattern's
  // entries, regress the sigmoid output onto the unmasked original (MSE).
  void train(const std::vector<float>& patterns, int epochs, int batch_size, float mask_fraction,
             uint64_t seed) {
    const int n = m_ * m_;
    const int count = static_cast<int>(patterns.size()) / n;
    if (count == 0) throw std::invalid_argument("train: no patterns");
    AdamW opt;
    opt.lr = 1e-3f;
    opt.weight_decay = 0.0f;
    RngStream rng = RngStream::from(seed, "cmp.train");
    std::vector<int> order(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
    for (int e = 0; e < epochs; ++e) {
      rng.shuffle(order);
      for (int start = 0; start + batch_size <= count; start += batch_size) {
        Tensor x = Tensor::zeros({batch_size, n});
        Tensor target = Tensor::zeros({batch_size, n});
        for (int b = 0; b < batch_size; ++b) {
          const float* src = patterns.data() + static_cast<size_t>(order[static_cast<size_t>(start + b)]) * n;
          float* xd = x.data() + static_cast<int64_t>(b) * n;
          float* td = target.data() + static_cast<int64_t>(b) * n;
          for (int i = 0; i < n; ++i) {
            td[i] = src[i];
            xd[i] = rng.next_float() < mask_fraction ? 0.0f : src[i];
          }
        }
        Tape tape;
        Tensor h = tape.relu(tape.add_bias(tape.matmul(x, params_[0].second), params_[1].second));
        Tensor pred = tape.sigmoid(tape.add_bias(tape.matmul(h, params_[2].second), params_[3].second));
        Tensor diff = tape.add(pred, tape.scale(target, -1.0f));
        Tensor loss = tape.mean_all(tape.mul(diff, diff));
        opt.zero_grad(params_);
        tape.backward(loss);
        opt.step(params_);
      }
    }
  }

 private:
  void gemm(const float* x, const Tensor& w, int B, float* out) const {
    const int n = m_ * m_;
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, B, n, n, 1.0f, x, n, w.data(), n, 0.0f,
                out, n);
  }
  static void add_bias_relu(std::vector<float>& h, const Tensor& b, int B, bool relu) {
    const int n = static_cast<int>(b.numel());
    for (int r = 0; r < B; ++r) {
      float* row = h.data() + static_cast<size_t>(r) * n;
      for (int i = 0; i < n; ++i) {
        row[i] += b.data()[i];
        if (relu && row[i] < 0.0f) row[i] = 0.0f;
      }
    }
  }

  int m_;
  ParamMap params_;
};

// Blend strength schedule: alpha0 at transfer epoch 0, linearly to zero by
// `decay_epochs`, zero afterwards.
inline float completion_alpha_at(float alpha0, int epoch, int decay_epochs) {
  const float f = 1.0f - static_cast<float>(epoch) / static_cast<float>(decay_epochs);
  return alpha0 * (f > 0.0f ? f : 0.0f);
}

inline CompletionContext make_completion_context(std::shared_ptr<const CompletionNet> net, float alpha,
                                                 bool use_extrinsic) {
  CompletionContext ctx;
  ctx.alpha = alpha;
  ctx.use_extrinsic = use_extrinsic;
  ctx.complete_batch = [net = std::move(net)](const std::vector<float>& patterns, int B) {
    return net->complete(patterns, B);
  };
  return ctx;
}

}  // namespace dppn
