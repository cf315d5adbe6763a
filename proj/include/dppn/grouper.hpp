#pragma once
// Slot groupers: the trainable linear grouper and the frozen random-Fourier
// groupers. The Fourier tables are a pure function of (fourier_seed, shape
// parameters): two independently trained models built from the same seed
// carry bit-identical tables, which is exactly the property the transfer
// experiments lean on.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dppn/rng.hpp"

namespace dppn {

enum class FourierKind { position_only, token_position };

// Precomputed soft-assignment rows. Rows are post-softmax, so lookups are
// plain copies in the forward path.
class FourierTables {
 public:
  // sigma scales the Gaussian projection; temperature matches the learned
  // grouper's softmax temperature.
  FourierTables(FourierKind kind, uint64_t fourier_seed, int m, int seq_len, int vocab,
                float sigma = 1.0f, float temperature = 1.0f)
      : kind_(kind), m_(m), seq_len_(seq_len), vocab_(vocab) {
    // One-hot features select single rows of W, so the projection variance is
    // w_std itself; no fan-in normalization, or the shared per-slot bias phase
    // would swamp the per-feature variation and every row would agree.
    const float w_std = sigma;
    const float inv_scale = 1.0f / (std::sqrt(static_cast<float>(m)) * temperature);
    for (int view = 0; view < 2; ++view) {
      RngStream r = RngStream::from(
          fourier_seed, std::string(kind == FourierKind::position_only ? "fourier.pos.v" : "fourier.tokpos.v") +
                            static_cast<char>('1' + view));
      // One-hot inputs select single rows of W, so the projection reduces to
      // per-index offsets: pos-only uses W[pos], token+position W[tok]+W[pos].
      std::vector<float> w_tok(static_cast<size_t>(vocab) * m);
      std::vector<float> w_pos(static_cast<size_t>(seq_len) * m);
      std::vector<float> bias(static_cast<size_t>(m));
      if (kind == FourierKind::token_position)
        for (auto& x : w_tok) x = r.normal() * w_std;
      for (auto& x : w_pos) x = r.normal() * w_std;
      for (auto& x : bias) x = r.next_float() * 6.28318530717958647692f;

      auto softmax_into = [&](std::vector<float>& dst, size_t off, const float* tok_row) {
        float mx = -1e30f;
        for (int a = 0; a < m; ++a) {
          const float arg = (tok_row ? tok_row[a] : 0.0f) + bias[static_cast<size_t>(a)];
          dst[off + static_cast<size_t>(a)] = std::cos(arg) * inv_scale;
          mx = std::max(mx, dst[off + static_cast<size_t>(a)]);
        }
        float sum = 0.0f;
        for (int a = 0; a < m; ++a) {
          float& v = dst[off + static_cast<size_t>(a)];
          v = std::exp(v - mx);
          sum += v;
        }
        for (int a = 0; a < m; ++a) dst[off + static_cast<size_t>(a)] /= sum;
      };

      if (kind == FourierKind::position_only) {
        auto& q = q_[view];
        q.resize(static_cast<size_t>(seq_len) * m);
        std::vector<float> arg(static_cast<size_t>(m));
        for (int i = 0; i < seq_len; ++i) {
          for (int a = 0; a < m; ++a) arg[static_cast<size_t>(a)] = w_pos[static_cast<size_t>(i) * m + a];
          softmax_into(q, static_cast<size_t>(i) * m, arg.data());
        }
      } else {
        auto& q = q_[view];
        q.resize(static_cast<size_t>(vocab) * seq_len * m);
        std::vector<float> arg(static_cast<size_t>(m));
        for (int t = 0; t < vocab; ++t)
          for (int i = 0; i < seq_len; ++i) {
            for (int a = 0; a < m; ++a)
              arg[static_cast<size_t>(a)] =
                  w_tok[static_cast<size_t>(t) * m + a] + w_pos[static_cast<size_t>(i) * m + a];
            softmax_into(q, (static_cast<size_t>(t) * seq_len + i) * m, arg.data());
          }
      }
    }
  }

  FourierKind kind() const { return kind_; }
  int m() const { return m_; }

  // Q row for (view, token, position); token ignored by the position-only
  // kind. token is 0-based here.
  const float* row(int view, int token0, int pos) const {
    if (kind_ == FourierKind::position_only) return q_[view].data() + static_cast<size_t>(pos) * m_;
    return q_[view].data() + (static_cast<size_t>(token0) * seq_len_ + pos) * m_;
  }

 private:
  FourierKind kind_;
  int m_, seq_len_, vocab_;
  std::vector<float> q_[2];
};

}  // namespace dppn
