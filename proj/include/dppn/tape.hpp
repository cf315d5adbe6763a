#pragma once
// Tape-based reverse-mode autodiff over whole-tensor ops. Ops execute eagerly
// (BLAS for matmuls) and push a backward closure; Tape::backward replays the
// closures in reverse and then clears the tape. One Tape per training run;
// there is no shared mutable global state, so independent runs can coexist.
//
// Shape rules are documented per op. All tensors are float32, row-major.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dppn/fastmath.hpp"
#include "dppn/rng.hpp"
#include "dppn/tensor.hpp"

namespace dppn {

namespace detail {

// Row-major sgemm: C = alpha * op(A) * op(B) + beta * C.
inline void sgemm_rm(bool ta, bool tb, int M, int N, int K, float alpha, const float* A, int lda,
                     const float* B, int ldb, float beta, float* C, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, M, N,
              K, alpha, A, lda, B, ldb, beta, C, ldc);
}

inline void throw_shape(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// Constant 0/1 mask with broadcast strides over (batch, head). Element (b, h,
// i, j) reads bits[(b*stride_b + h*stride_h) * rows * cols + i * cols + j].
struct AttnMask {
  const uint8_t* bits = nullptr;
  int stride_b = 0;  // in units of rows*cols
  int stride_h = 0;
  int rows = 0, cols = 0;
  bool allows(int b, int h, int i, int j) const {
    return bits[static_cast<size_t>(b * stride_b + h * stride_h) * rows * cols + i * cols + j] != 0;
  }
};

class Tape {
 public:
  // ---- mechanics ----------------------------------------------------------

  bool recording() const { return recording_; }
  void set_recording(bool b) { recording_ = b; }

  int64_t backward_count() const { return backward_count_; }
  size_t node_count() const { return nodes_.size(); }

  // Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = 1, replays all
  // recorded closures in reverse, then clears the tape. A second call without
  // new forward ops is a contract violation.
  void backward(Tensor loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (nodes_.empty()) throw std::logic_error("backward: tape is empty (no forward since last backward)");
    loss.grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
    ++backward_count_;
  }

  // Drops recorded nodes without running them (used between no-grad evals).
  void discard() { nodes_.clear(); }

  // ---- linear algebra -----------------------------------------------------

  // matmul(a, b, ta, tb): batched matrix product over the last two axes.
  //   - If b is 2-D and ta is false, a's leading axes fold into rows:
  //     [*, M, K] x [K, N] -> [*, M, N] in one gemm.
  //   - Otherwise a and b share identical leading axes and slices multiply
  //     pairwise: [L.., M, K] x [L.., K, N] -> [L.., M, N].
  // Transpose flags apply to the trailing two axes of the operand.
  Tensor matmul(Tensor a, Tensor b, bool ta = false, bool tb = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) detail::throw_shape("matmul", sa, sb);

    if (sb.size() == 2 && !ta) {
      int K = sa.back();
      int M = static_cast<int>(a.numel() / K);
      int bk = tb ? sb[1] : sb[0];
      int N = tb ? sb[0] : sb[1];
      if (K != bk) detail::throw_shape("matmul", sa, sb);
      Shape out_shape(sa.begin(), sa.end() - 1);
      out_shape.push_back(N);
      Tensor out = Tensor::uninit(out_shape);
      detail::sgemm_rm(false, tb, M, N, K, 1.0f, a.data(), K, b.data(), sb[1], 0.0f, out.data(), N);
      record2(a, b, out, [a, b, out, M, N, K, tb]() mutable {
        const float* dC = out.grad();
        if (a.requires_grad()) {
          // dA = dC * op(B)^T
          detail::sgemm_rm(false, !tb, M, K, N, 1.0f, dC, N, b.data(), b.shape()[1], 1.0f, a.grad(), K);
        }
        if (b.requires_grad()) {
          if (!tb)  // dB = A^T * dC
            detail::sgemm_rm(true, false, K, N, M, 1.0f, a.data(), K, dC, N, 1.0f, b.grad(), N);
          else  // C = A*B^T: dB = dC^T * A
            detail::sgemm_rm(true, false, N, K, M, 1.0f, dC, N, a.data(), K, 1.0f, b.grad(), K);
        }
      });
      return out;
    }

    // Batched: identical leading axes.
    if (sa.size() != sb.size()) detail::throw_shape("matmul", sa, sb);
    for (size_t i = 0; i + 2 < sa.size(); ++i)
      if (sa[i] != sb[i]) detail::throw_shape("matmul", sa, sb);
    int ar = sa[sa.size() - 2], ac = sa.back();
    int br = sb[sb.size() - 2], bc = sb.back();
    int M = ta ? ac : ar, Ka = ta ? ar : ac;
    int Kb = tb ? bc : br, N = tb ? br : bc;
    if (Ka != Kb) detail::throw_shape("matmul", sa, sb);
    int K = Ka;
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor out = Tensor::uninit(out_shape);
    const int64_t astep = static_cast<int64_t>(ar) * ac, bstep = static_cast<int64_t>(br) * bc,
                  cstep = static_cast<int64_t>(M) * N;
    for (int64_t l = 0; l < batch; ++l)
      detail::sgemm_rm(ta, tb, M, N, K, 1.0f, a.data() + l * astep, ac, b.data() + l * bstep, bc,
                       0.0f, out.data() + l * cstep, N);
    record2(a, b, out, [a, b, out, batch, astep, bstep, cstep, M, N, K, ta, tb, ac, bc]() mutable {
      for (int64_t l = 0; l < batch; ++l) {
        const float* dC = out.grad() + l * cstep;
        const float* A = a.data() + l * astep;
        const float* B = b.data() + l * bstep;
        if (a.requires_grad()) {
          float* dA = a.grad() + l * astep;
          if (!ta)
            detail::sgemm_rm(false, !tb, M, K, N, 1.0f, dC, N, B, bc, 1.0f, dA, ac);
          else  // A used transposed: dA^T = ... -> dA = op(B) * dC^T arrangement
            detail::sgemm_rm(tb, true, K, M, N, 1.0f, B, bc, dC, N, 1.0f, dA, ac);
        }
        if (b.requires_grad()) {
          float* dB = b.grad() + l * bstep;
          if (!tb)
            detail::sgemm_rm(!ta, false, K, N, M, 1.0f, A, ac, dC, N, 1.0f, dB, bc);
          else
            detail::sgemm_rm(true, ta, N, K, M, 1.0f, dC, N, A, ac, 1.0f, dB, bc);
        }
      }
    });
    return out;
  }

  // ---- elementwise (same shape) -------------------------------------------

  Tensor add(Tensor a, Tensor b) {
    check_same(a, b, "add");
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    record2(a, b, out, [a, b, out, n]() mutable {
      if (a.requires_grad()) axpy(n, out.grad(), a.grad());
      if (b.requires_grad()) axpy(n, out.grad(), b.grad());
    });
    return out;
  }

  Tensor sub(Tensor a, Tensor b) {
    check_same(a, b, "sub");
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    record2(a, b, out, [a, b, out, n]() mutable {
      if (a.requires_grad()) axpy(n, out.grad(), a.grad());
      if (b.requires_grad()) {
        float* g = b.grad();
        const float* d = out.grad();
        for (int64_t i = 0; i < n; ++i) g[i] -= d[i];
      }
    });
    return out;
  }

  Tensor mul(Tensor a, Tensor b) {
    check_same(a, b, "mul");
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    record2(a, b, out, [a, b, out, n]() mutable {
      const float* d = out.grad();
      if (a.requires_grad()) {
        float* g = a.grad();
        const float* bv = b.data();
        for (int64_t i = 0; i < n; ++i) g[i] += d[i] * bv[i];
      }
      if (b.requires_grad()) {
        float* g = b.grad();
        const float* av = a.data();
        for (int64_t i = 0; i < n; ++i) g[i] += d[i] * av[i];
      }
    });
    return out;
  }

  Tensor scale(Tensor a, float c) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    record1(a, out, [a, out, c, n]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      for (int64_t i = 0; i < n; ++i) g[i] += d[i] * c;
    });
    return out;
  }

  Tensor add_const(Tensor a, float c) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
    record1(a, out, [a, out, n]() mutable { axpy(n, out.grad(), a.grad()); });
    return out;
  }

  Tensor relu(Tensor a) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0f ? a.data()[i] : 0.0f;
    record1(a, out, [a, out, n]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float* v = a.data();
      for (int64_t i = 0; i < n; ++i) g[i] += v[i] > 0.0f ? d[i] : 0.0f;
    });
    return out;
  }

  Tensor sigmoid(Tensor a) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = 1.0f / (1.0f + fast_exp(-a.data()[i]));
    record1(a, out, [a, out, n]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float* y = out.data();
      for (int64_t i = 0; i < n; ++i) g[i] += d[i] * y[i] * (1.0f - y[i]);
    });
    return out;
  }

  // Elementwise sqrt. Inputs must be non-negative; gradient at exact 0 is
  // defined as 0 to keep the geometric-mean path finite.
  Tensor sqrt_op(Tensor a) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::sqrt(a.data()[i]);
    record1(a, out, [a, out, n]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float* y = out.data();
      for (int64_t i = 0; i < n; ++i) g[i] += y[i] > 0.0f ? d[i] * 0.5f / y[i] : 0.0f;
    });
    return out;
  }

  Tensor log_op(Tensor a) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = fast_log(a.data()[i]);
    record1(a, out, [a, out, n]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float* v = a.data();
      for (int64_t i = 0; i < n; ++i) g[i] += d[i] / v[i];
    });
    return out;
  }

  Tensor cos_op(Tensor a) {
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = std::cos(a.data()[i]);
    record1(a, out, [a, out, n]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float* v = a.data();
      for (int64_t i = 0; i < n; ++i) g[i] -= d[i] * std::sin(v[i]);
    });
    return out;
  }

  // ---- broadcasts ---------------------------------------------------------

  // a [*, D] + b [D].
  Tensor add_bias(Tensor a, Tensor b) {
    if (b.ndim() != 1 || a.shape().back() != b.dim(0)) detail::throw_shape("add_bias", a.shape(), b.shape());
    Tensor out = Tensor::uninit(a.shape());
    const int64_t n = a.numel();
    const int D = b.dim(0);
    const int64_t rows = n / D;
    {
      const float* av = a.data();
      const float* bv = b.data();
      float* ov = out.data();
      for (int64_t r = 0; r < rows; ++r, av += D, ov += D)
        for (int j = 0; j < D; ++j) ov[j] = av[j] + bv[j];
    }
    record2(a, b, out, [a, b, out, n, D, rows]() mutable {
      const float* d = out.grad();
      if (a.requires_grad()) axpy(n, d, a.grad());
      if (b.requires_grad()) {
        float* g = b.grad();
        const float* dr = d;
        for (int64_t r = 0; r < rows; ++r, dr += D)
          for (int j = 0; j < D; ++j) g[j] += dr[j];
      }
    });
    return out;
  }

  // h [B, ...] scaled per leading index by s [B].
  Tensor mul_rows(Tensor h, Tensor s) {
    if (s.ndim() != 1 || h.dim(0) != s.dim(0)) detail::throw_shape("mul_rows", h.shape(), s.shape());
    Tensor out = Tensor::uninit(h.shape());
    const int B = h.dim(0);
    const int64_t stride = h.numel() / B;
    for (int b = 0; b < B; ++b) {
      const float sv = s.data()[b];
      for (int64_t i = 0; i < stride; ++i) out.data()[b * stride + i] = h.data()[b * stride + i] * sv;
    }
    record2(h, s, out, [h, s, out, B, stride]() mutable {
      const float* d = out.grad();
      if (h.requires_grad()) {
        float* g = h.grad();
        for (int b = 0; b < B; ++b) {
          const float sv = s.data()[b];
          for (int64_t i = 0; i < stride; ++i) g[b * stride + i] += d[b * stride + i] * sv;
        }
      }
      if (s.requires_grad()) {
        float* g = s.grad();
        for (int b = 0; b < B; ++b) {
          float acc = 0.0f;
          for (int64_t i = 0; i < stride; ++i) acc += d[b * stride + i] * h.data()[b * stride + i];
          g[b] += acc;
        }
      }
    });
    return out;
  }

  // h [B, N, D] scaled per token by g [B, N, 1].
  Tensor mul_gate(Tensor h, Tensor g) {
    if (g.ndim() != 3 || g.dim(2) != 1 || g.dim(0) != h.dim(0) || g.dim(1) != h.dim(1))
      detail::throw_shape("mul_gate", h.shape(), g.shape());
    Tensor out = Tensor::uninit(h.shape());
    const int64_t rows = static_cast<int64_t>(h.dim(0)) * h.dim(1);
    const int D = h.dim(2);
    for (int64_t r = 0; r < rows; ++r) {
      const float gv = g.data()[r];
      for (int c = 0; c < D; ++c) out.data()[r * D + c] = h.data()[r * D + c] * gv;
    }
    record2(h, g, out, [h, g, out, rows, D]() mutable {
      const float* d = out.grad();
      if (h.requires_grad()) {
        float* gh = h.grad();
        for (int64_t r = 0; r < rows; ++r) {
          const float gv = g.data()[r];
          for (int c = 0; c < D; ++c) gh[r * D + c] += d[r * D + c] * gv;
        }
      }
      if (g.requires_grad()) {
        float* gg = g.grad();
        for (int64_t r = 0; r < rows; ++r) {
          float acc = 0.0f;
          for (int c = 0; c < D; ++c) acc += d[r * D + c] * h.data()[r * D + c];
          gg[r] += acc;
        }
      }
    });
    return out;
  }

  // scores [B, H, N, N] + m [B, N, N] broadcast over heads.
  Tensor add_headwise(Tensor scores, Tensor m) {
    if (scores.ndim() != 4 || m.ndim() != 3 || scores.dim(0) != m.dim(0) ||
        scores.dim(2) != m.dim(1) || scores.dim(3) != m.dim(2))
      detail::throw_shape("add_headwise", scores.shape(), m.shape());
    Tensor out = Tensor::uninit(scores.shape());
    const int B = scores.dim(0), H = scores.dim(1);
    const int64_t NN = static_cast<int64_t>(scores.dim(2)) * scores.dim(3);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const float* sv = scores.data() + (static_cast<int64_t>(b) * H + h) * NN;
        const float* mv = m.data() + b * NN;
        float* ov = out.data() + (static_cast<int64_t>(b) * H + h) * NN;
        for (int64_t i = 0; i < NN; ++i) ov[i] = sv[i] + mv[i];
      }
    record2(scores, m, out, [scores, m, out, B, H, NN]() mutable {
      if (scores.requires_grad()) axpy(out.numel(), out.grad(), scores.grad());
      if (m.requires_grad()) {
        float* g = m.grad();
        for (int b = 0; b < B; ++b)
          for (int h = 0; h < H; ++h) {
            const float* d = out.grad() + (static_cast<int64_t>(b) * H + h) * NN;
            for (int64_t i = 0; i < NN; ++i) g[b * NN + i] += d[i];
          }
      }
    });
    return out;
  }

  // scores [B, H, N, C] + bias [B, C], broadcast over heads and query rows
  // (a per-key attention bias).
  Tensor add_key_bias(Tensor scores, Tensor bias) {
    if (scores.ndim() != 4 || bias.ndim() != 2 || scores.dim(0) != bias.dim(0) ||
        scores.dim(3) != bias.dim(1))
      detail::throw_shape("add_key_bias", scores.shape(), bias.shape());
    const int B = scores.dim(0), H = scores.dim(1), N = scores.dim(2), C = scores.dim(3);
    Tensor out = Tensor::uninit(scores.shape());
    for (int b = 0; b < B; ++b) {
      const float* bv = bias.data() + static_cast<int64_t>(b) * C;
      for (int64_t r = 0; r < static_cast<int64_t>(H) * N; ++r) {
        const float* sv = scores.data() + (static_cast<int64_t>(b) * H * N + r) * C;
        float* ov = out.data() + (static_cast<int64_t>(b) * H * N + r) * C;
        for (int j = 0; j < C; ++j) ov[j] = sv[j] + bv[j];
      }
    }
    record2(scores, bias, out, [scores, bias, out, B, H, N, C]() mutable {
      if (scores.requires_grad()) axpy(out.numel(), out.grad(), scores.grad());
      if (bias.requires_grad()) {
        float* g = bias.grad();
        for (int b = 0; b < B; ++b)
          for (int64_t r = 0; r < static_cast<int64_t>(H) * N; ++r) {
            const float* d = out.grad() + (static_cast<int64_t>(b) * H * N + r) * C;
            for (int j = 0; j < C; ++j) g[static_cast<int64_t>(b) * C + j] += d[j];
          }
      }
    });
    return out;
  }

  // [B, R] -> [B, R*times], each column repeated contiguously (region value
  // fanned out to its tokens).
  Tensor repeat_cols(Tensor a, int times) {
    if (a.ndim() != 2) throw std::invalid_argument("repeat_cols: expected 2-D input");
    const int B = a.dim(0), R = a.dim(1);
    Tensor out = Tensor::uninit({B, R * times});
    for (int b = 0; b < B; ++b)
      for (int r = 0; r < R; ++r) {
        const float v = a.data()[static_cast<int64_t>(b) * R + r];
        float* o = out.data() + (static_cast<int64_t>(b) * R + r) * times;
        for (int t = 0; t < times; ++t) o[t] = v;
      }
    record1(a, out, [a, out, B, R, times]() mutable {
      float* g = a.grad();
      for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r) {
          const float* d = out.grad() + (static_cast<int64_t>(b) * R + r) * times;
          float acc = 0.0f;
          for (int t = 0; t < times; ++t) acc += d[t];
          g[static_cast<int64_t>(b) * R + r] += acc;
        }
    });
    return out;
  }

  // [B] -> [B, N, 1]: one scalar per sample fanned out across positions.
  Tensor expand_scalar_rows(Tensor a, int N) {
    if (a.ndim() != 1) throw std::invalid_argument("expand_scalar_rows: expected 1-D input");
    const int B = a.dim(0);
    Tensor out = Tensor::uninit({B, N, 1});
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) out.data()[static_cast<int64_t>(b) * N + n] = a.data()[b];
    record1(a, out, [a, out, B, N]() mutable {
      float* g = a.grad();
      for (int b = 0; b < B; ++b) {
        const float* d = out.grad() + static_cast<int64_t>(b) * N;
        float acc = 0.0f;
        for (int n = 0; n < N; ++n) acc += d[n];
        g[b] += acc;
      }
    });
    return out;
  }

  // Same data, new shape (numel preserved). Copying keeps every op's buffers
  // independent; the backward is the mirror copy.
  Tensor reshape(Tensor a, Shape s) {
    if (shape_numel(s) != a.numel())
      throw std::invalid_argument("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
    Tensor out = Tensor::uninit(std::move(s));
    std::memcpy(out.data(), a.data(), sizeof(float) * static_cast<size_t>(a.numel()));
    record1(a, out, [a, out]() mutable { axpy(a.numel(), out.grad(), a.grad()); });
    return out;
  }

  // Rows of a [B, D] scaled to unit L2 norm (eps keeps zero rows finite).
  Tensor l2_normalize_rows(Tensor a, float eps = 1e-8f) {
    if (a.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: expected 2-D input");
    const int B = a.dim(0), D = a.dim(1);
    Tensor out = Tensor::uninit({B, D});
    std::vector<float> inv_norm(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const float* x = a.data() + static_cast<int64_t>(b) * D;
      float s = eps;
      for (int d = 0; d < D; ++d) s += x[d] * x[d];
      const float inv = 1.0f / std::sqrt(s);
      inv_norm[static_cast<size_t>(b)] = inv;
      float* o = out.data() + static_cast<int64_t>(b) * D;
      for (int d = 0; d < D; ++d) o[d] = x[d] * inv;
    }
    record1(a, out, [a, out, inv_norm = std::move(inv_norm), B, D]() mutable {
      float* g = a.grad();
      for (int b = 0; b < B; ++b) {
        const float* y = out.data() + static_cast<int64_t>(b) * D;
        const float* d = out.grad() + static_cast<int64_t>(b) * D;
        float dot = 0.0f;
        for (int i = 0; i < D; ++i) dot += d[i] * y[i];
        const float inv = inv_norm[static_cast<size_t>(b)];
        for (int i = 0; i < D; ++i) g[static_cast<int64_t>(b) * D + i] += (d[i] - y[i] * dot) * inv;
      }
    });
    return out;
  }

  // Identity forward; backward scales each (i, j) score gradient by the
  // constant mult[i, j]. This is the hook a field-driven learning-rate
  // schedule uses to speed up or slow down specific position pairs without
  // touching the forward pass.
  Tensor scale_scores_grad(Tensor scores, const std::vector<float>& mult) {
    if (scores.ndim() != 4) throw std::invalid_argument("scale_scores_grad: expected 4-D scores");
    const int B = scores.dim(0), H = scores.dim(1), N = scores.dim(2), C = scores.dim(3);
    if (mult.size() != static_cast<size_t>(N) * C)
      throw std::invalid_argument("scale_scores_grad: multiplier shape mismatch");
    Tensor out = Tensor::uninit(scores.shape());
    std::memcpy(out.data(), scores.data(), sizeof(float) * static_cast<size_t>(scores.numel()));
    record1(scores, out, [scores, out, mult, B, H, N, C]() mutable {
      float* g = scores.grad();
      const int64_t NN = static_cast<int64_t>(N) * C;
      for (int64_t bh = 0; bh < static_cast<int64_t>(B) * H; ++bh) {
        const float* d = out.grad() + bh * NN;
        float* gs = g + bh * NN;
        for (int64_t i = 0; i < NN; ++i) gs[i] += d[i] * mult[static_cast<size_t>(i)];
      }
    });
    return out;
  }

  // ---- softmax family -----------------------------------------------------

  // Softmax over the last axis.
  Tensor softmax_lastdim(Tensor a) {
    Tensor out = Tensor::uninit(a.shape());
    const int C = a.shape().back();
    const int64_t rows = a.numel() / C;
    std::memcpy(out.data(), a.data(), sizeof(float) * a.numel());
    for (int64_t r = 0; r < rows; ++r) softmax_row(out.data() + r * C, C);
    record1(a, out, [a, out, rows, C]() mutable { softmax_backward(a, out, rows, C); });
    return out;
  }

  // Softmax over the last axis with a constant 0/1 mask; masked entries get
  // probability exactly 0 and receive zero gradient. scores is [B, H, N, N].
  Tensor softmax_masked(Tensor scores, const AttnMask& mask) {
    if (scores.ndim() != 4) throw std::invalid_argument("softmax_masked: expected 4-D scores");
    const int B = scores.dim(0), H = scores.dim(1), N = scores.dim(2), C = scores.dim(3);
    Tensor out = Tensor::uninit(scores.shape());
    const float ninf = -std::numeric_limits<float>::infinity();
    // The masks here keep only a small fraction of each row, so the softmax
    // walks the active lanes instead of the full row. Masked lanes contribute
    // exactly +0.0f to the running sum in softmax_row, so skipping them leaves
    // every partial sum bit-identical to the dense computation.
    std::vector<int> act(C);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const uint8_t* mrow =
            mask.bits + static_cast<size_t>(b * mask.stride_b + h * mask.stride_h) * N * C;
        for (int i = 0; i < N; ++i) {
          const float* src = scores.data() + ((static_cast<int64_t>(b) * H + h) * N + i) * C;
          const uint8_t* mi = mrow + static_cast<int64_t>(i) * C;
          float* dst = out.data() + ((static_cast<int64_t>(b) * H + h) * N + i) * C;
          int na = 0;
          float mx = ninf;
          for (int j = 0; j < C; ++j) {
            if (mi[j]) {
              act[na++] = j;
              mx = src[j] > mx ? src[j] : mx;
            } else {
              dst[j] = 0.0f;
            }
          }
          // A fully masked row must emit nothing rather than uniform weights.
          if (na == 0) continue;
          if (!(mx > ninf)) {
            // Every active score is -inf: same uniform fallback softmax_row uses.
            std::fill(dst, dst + C, 1.0f / static_cast<float>(C));
            continue;
          }
          float sum = 0.0f;
          for (int t = 0; t < na; ++t) {
            const float x = src[act[t]];
            const float v = x == ninf ? 0.0f : fast_exp(x - mx);
            dst[act[t]] = v;
            sum += v;
          }
          const float inv = 1.0f / sum;
          for (int t = 0; t < na; ++t) dst[act[t]] *= inv;
        }
      }
    const int64_t rows = static_cast<int64_t>(B) * H * N;
    record1(scores, out, [scores, out, rows, C]() mutable { softmax_backward(scores, out, rows, C); });
    return out;
  }

  // ---- reductions ---------------------------------------------------------

  // [B, N, D] -> [B, D], mean over axis 1.
  Tensor mean_axis1(Tensor a) {
    if (a.ndim() != 3) throw std::invalid_argument("mean_axis1: expected 3-D input");
    const int B = a.dim(0), N = a.dim(1), D = a.dim(2);
    // Accumulates with +=, so this one genuinely needs the zero fill.
    Tensor out = Tensor::zeros({B, D});
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d)
          out.data()[b * D + d] += a.data()[(static_cast<int64_t>(b) * N + n) * D + d];
    const float inv = 1.0f / static_cast<float>(N);
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] *= inv;
    record1(a, out, [a, out, B, N, D, inv]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < D; ++c) g[(static_cast<int64_t>(b) * N + n) * D + c] += d[b * D + c] * inv;
    });
    return out;
  }

  // [B, R, C] -> [B], mean over the trailing matrix.
  Tensor mean_last2(Tensor a) {
    if (a.ndim() != 3) throw std::invalid_argument("mean_last2: expected 3-D input");
    const int B = a.dim(0);
    const int64_t M = a.numel() / B;
    Tensor out = Tensor::uninit({B});
    for (int b = 0; b < B; ++b) {
      float acc = 0.0f;
      for (int64_t i = 0; i < M; ++i) acc += a.data()[b * M + i];
      out.data()[b] = acc / static_cast<float>(M);
    }
    record1(a, out, [a, out, B, M]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float inv = 1.0f / static_cast<float>(M);
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < M; ++i) g[b * M + i] += d[b] * inv;
    });
    return out;
  }

  // Mean of all entries -> scalar [1].
  Tensor mean_all(Tensor a) {
    const int64_t n = a.numel();
    Tensor out = Tensor::uninit({1});
    float acc = 0.0f;
    for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
    out.data()[0] = acc / static_cast<float>(n);
    record1(a, out, [a, out, n]() mutable {
      const float d = out.grad()[0] / static_cast<float>(n);
      float* g = a.grad();
      for (int64_t i = 0; i < n; ++i) g[i] += d;
    });
    return out;
  }

  // Sum of all entries -> scalar [1].
  Tensor sum_all(Tensor a) {
    const int64_t n = a.numel();
    Tensor out = Tensor::uninit({1});
    float acc = 0.0f;
    for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
    out.data()[0] = acc;
    record1(a, out, [a, out, n]() mutable {
      const float d = out.grad()[0];
      float* g = a.grad();
      for (int64_t i = 0; i < n; ++i) g[i] += d;
    });
    return out;
  }

  // ---- structured ops -----------------------------------------------------

  // Rows normalized to sum 1 over the last axis. Rows whose sum is exactly 0
  // become uniform constants and propagate no gradient (degenerate contract).
  Tensor row_normalize(Tensor a) {
    const int C = a.shape().back();
    const int64_t rows = a.numel() / C;
    Tensor out = Tensor::uninit(a.shape());
    std::vector<float> sums(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      float s = 0.0f;
      for (int j = 0; j < C; ++j) s += a.data()[r * C + j];
      sums[static_cast<size_t>(r)] = s;
      if (s > 0.0f) {
        const float inv = 1.0f / s;
        for (int j = 0; j < C; ++j) out.data()[r * C + j] = a.data()[r * C + j] * inv;
      } else {
        for (int j = 0; j < C; ++j) out.data()[r * C + j] = 1.0f / static_cast<float>(C);
      }
    }
    record1(a, out, [a, out, rows, C, sums = std::move(sums)]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      const float* y = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        const float s = sums[static_cast<size_t>(r)];
        if (s <= 0.0f) continue;
        float dot = 0.0f;
        for (int j = 0; j < C; ++j) dot += d[r * C + j] * y[r * C + j];
        const float inv = 1.0f / s;
        for (int j = 0; j < C; ++j) g[r * C + j] += (d[r * C + j] - dot) * inv;
      }
    });
    return out;
  }

  // Token embedding lookup: E [V, D] gathered by ids [B*N] -> [B, N, D].
  Tensor embedding(Tensor E, const std::vector<int>& ids, int B, int N) {
    const int D = E.dim(1);
    Tensor out = Tensor::uninit({B, N, D});
    for (size_t t = 0; t < ids.size(); ++t)
      std::memcpy(out.data() + t * D, E.data() + static_cast<int64_t>(ids[t]) * D, sizeof(float) * D);
    record1(E, out, [E, out, ids, D]() mutable {
      float* g = E.grad();
      const float* d = out.grad();
      for (size_t t = 0; t < ids.size(); ++t) {
        float* dst = g + static_cast<int64_t>(ids[t]) * D;
        const float* src = d + t * D;
        for (int c = 0; c < D; ++c) dst[c] += src[c];
      }
    });
    return out;
  }

  // h [B, N, D] + P [N, D] broadcast over the batch.
  Tensor add_position(Tensor h, Tensor P) {
    if (P.ndim() != 2 || h.dim(1) != P.dim(0) || h.dim(2) != P.dim(1))
      detail::throw_shape("add_position", h.shape(), P.shape());
    Tensor out = Tensor::uninit(h.shape());
    const int B = h.dim(0);
    const int64_t ND = static_cast<int64_t>(h.dim(1)) * h.dim(2);
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < ND; ++i) out.data()[b * ND + i] = h.data()[b * ND + i] + P.data()[i];
    record2(h, P, out, [h, P, out, B, ND]() mutable {
      const float* d = out.grad();
      if (h.requires_grad()) axpy(out.numel(), d, h.grad());
      if (P.requires_grad()) {
        float* g = P.grad();
        for (int b = 0; b < B; ++b)
          for (int64_t i = 0; i < ND; ++i) g[i] += d[b * ND + i];
      }
    });
    return out;
  }

  // Concatenate along the last axis. All inputs share leading axes.
  Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    int D = 0;
    for (const auto& p : parts) D += p.shape().back();
    Shape out_shape = parts[0].shape();
    const int64_t rows = parts[0].numel() / parts[0].shape().back();
    out_shape.back() = D;
    Tensor out = Tensor::uninit(out_shape);
    int off = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().back();
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * D + off, p.data() + r * pc, sizeof(float) * pc);
      off += pc;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (recording_ && any) {
      out.set_requires_grad(true);
      std::vector<Tensor> held = parts;  // non-const copy for the closure
      nodes_.push_back([parts = std::move(held), out, rows, D]() mutable {
        int off2 = 0;
        for (auto& p : parts) {
          const int pc = p.shape().back();
          if (p.requires_grad()) {
            float* g = p.grad();
            for (int64_t r = 0; r < rows; ++r)
              for (int c = 0; c < pc; ++c) g[r * pc + c] += out.grad()[r * D + off2 + c];
          }
          off2 += pc;
        }
      });
    }
    return out;
  }

  // qkv [B, N, 3D] -> three head-split tensors [B, H, N, D/H].
  void split_qkv(Tensor qkv, int H, Tensor& q, Tensor& k, Tensor& v) {
    const int B = qkv.dim(0), N = qkv.dim(1), D3 = qkv.dim(2);
    const int D = D3 / 3, dh = D / H;
    Tensor outs[3];
    for (int part = 0; part < 3; ++part) {
      outs[part] = Tensor::uninit({B, H, N, dh});
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
          for (int n = 0; n < N; ++n)
            std::memcpy(outs[part].data() + (((static_cast<int64_t>(b) * H + h) * N + n) * dh),
                        qkv.data() + ((static_cast<int64_t>(b) * N + n) * D3 + part * D + h * dh),
                        sizeof(float) * dh);
      Tensor out = outs[part];
      record1(qkv, out, [qkv, out, B, H, N, dh, D3, D, part]() mutable {
        float* g = qkv.grad();
        const float* d = out.grad();
        for (int b = 0; b < B; ++b)
          for (int h = 0; h < H; ++h)
            for (int n = 0; n < N; ++n) {
              float* dst = g + (static_cast<int64_t>(b) * N + n) * D3 + part * D + h * dh;
              const float* src = d + ((static_cast<int64_t>(b) * H + h) * N + n) * dh;
              for (int c = 0; c < dh; ++c) dst[c] += src[c];
            }
      });
    }
    q = outs[0];
    k = outs[1];
    v = outs[2];
  }

  // [B, H, N, dh] -> [B, N, H*dh].
  Tensor merge_heads(Tensor x) {
    const int B = x.dim(0), H = x.dim(1), N = x.dim(2), dh = x.dim(3);
    Tensor out = Tensor::uninit({B, N, H * dh});
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int n = 0; n < N; ++n)
          std::memcpy(out.data() + ((static_cast<int64_t>(b) * N + n) * H * dh + h * dh),
                      x.data() + ((static_cast<int64_t>(b) * H + h) * N + n) * dh, sizeof(float) * dh);
    record1(x, out, [x, out, B, H, N, dh]() mutable {
      float* g = x.grad();
      const float* d = out.grad();
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
          for (int n = 0; n < N; ++n) {
            float* dst = g + ((static_cast<int64_t>(b) * H + h) * N + n) * dh;
            const float* src = d + (static_cast<int64_t>(b) * N + n) * H * dh + h * dh;
            for (int c = 0; c < dh; ++c) dst[c] += src[c];
          }
    });
    return out;
  }

  // LayerNorm over the last axis with learned gain/bias, eps 1e-5.
  Tensor layer_norm(Tensor a, Tensor gamma, Tensor beta) {
    const int D = a.shape().back();
    const int64_t rows = a.numel() / D;
    Tensor out = Tensor::uninit(a.shape());
    std::vector<float> rstd(static_cast<size_t>(rows)), mean(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      const float* x = a.data() + r * D;
      float mu = 0.0f;
      for (int j = 0; j < D; ++j) mu += x[j];
      mu /= static_cast<float>(D);
      float var = 0.0f;
      for (int j = 0; j < D; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<float>(D);
      const float rs = 1.0f / std::sqrt(var + 1e-5f);
      mean[static_cast<size_t>(r)] = mu;
      rstd[static_cast<size_t>(r)] = rs;
      float* y = out.data() + r * D;
      for (int j = 0; j < D; ++j) y[j] = (x[j] - mu) * rs * gamma.data()[j] + beta.data()[j];
    }
    bool any = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (recording_ && any) {
      out.set_requires_grad(true);
      nodes_.push_back([a, gamma, beta, out, rows, D, mean = std::move(mean),
                        rstd = std::move(rstd)]() mutable {
        for (int64_t r = 0; r < rows; ++r) {
          const float* x = a.data() + r * D;
          const float* d = out.grad() + r * D;
          const float mu = mean[static_cast<size_t>(r)], rs = rstd[static_cast<size_t>(r)];
          if (gamma.requires_grad() || beta.requires_grad()) {
            float* gg = gamma.grad();
            float* gb = beta.grad();
            for (int j = 0; j < D; ++j) {
              gg[j] += d[j] * (x[j] - mu) * rs;
              gb[j] += d[j];
            }
          }
          if (a.requires_grad()) {
            float* g = a.grad();
            float sum_d = 0.0f, sum_dx = 0.0f;
            for (int j = 0; j < D; ++j) {
              const float dj = d[j] * gamma.data()[j];
              sum_d += dj;
              sum_dx += dj * (x[j] - mu);
            }
            const float invD = 1.0f / static_cast<float>(D);
            for (int j = 0; j < D; ++j) {
              const float dj = d[j] * gamma.data()[j];
              g[j + r * D] += rs * (dj - sum_d * invD - (x[j] - mu) * rs * rs * sum_dx * invD);
            }
          }
        }
      });
    }
    return out;
  }

  // Inverted dropout with a seeded stream; identity when keep == 1.
  Tensor dropout(Tensor a, float p, RngStream& rng) {
    if (p <= 0.0f) return a;
    const int64_t n = a.numel();
    Tensor out = Tensor::uninit(a.shape());
    auto keep = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
    const float scale = 1.0f / (1.0f - p);
    for (int64_t i = 0; i < n; ++i) {
      const bool k = rng.next_float() >= p;
      (*keep)[static_cast<size_t>(i)] = k;
      out.data()[i] = k ? a.data()[i] * scale : 0.0f;
    }
    record1(a, out, [a, out, keep, n, scale]() mutable {
      float* g = a.grad();
      const float* d = out.grad();
      for (int64_t i = 0; i < n; ++i)
        if ((*keep)[static_cast<size_t>(i)]) g[i] += d[i] * scale;
    });
    return out;
  }

  // Mean cross-entropy over the batch from raw logits [B, C]. Stores softmax
  // probabilities in `probs_out` (plain buffer) when requested.
  Tensor cross_entropy_mean(Tensor logits, const std::vector<int>& labels,
                            std::vector<float>* probs_out = nullptr) {
    const int B = logits.dim(0), C = logits.dim(1);
    auto probs = std::make_shared<std::vector<float>>(logits.values());
    for (int b = 0; b < B; ++b) softmax_row(probs->data() + static_cast<int64_t>(b) * C, C);
    float loss = 0.0f;
    for (int b = 0; b < B; ++b) {
      float p = (*probs)[static_cast<int64_t>(b) * C + labels[static_cast<size_t>(b)]];
      loss -= std::log(p > 1e-12f ? p : 1e-12f);
    }
    Tensor out = Tensor::uninit({1});
    out.data()[0] = loss / static_cast<float>(B);
    if (probs_out) *probs_out = *probs;
    record1(logits, out, [logits, out, probs, labels, B, C]() mutable {
      float* g = logits.grad();
      const float d = out.grad()[0] / static_cast<float>(B);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const float onehot = c == labels[static_cast<size_t>(b)] ? 1.0f : 0.0f;
          g[static_cast<int64_t>(b) * C + c] += d * ((*probs)[static_cast<int64_t>(b) * C + c] - onehot);
        }
    });
    return out;
  }

 private:
  static void axpy(int64_t n, const float* src, float* dst) {
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  static void softmax_backward(Tensor& a, Tensor& out, int64_t rows, int C) {
    float* g = a.grad();
    const float* d = out.grad();
    const float* y = out.data();
    for (int64_t r = 0; r < rows; ++r) {
      float dot = 0.0f;
      for (int j = 0; j < C; ++j) dot += d[r * C + j] * y[r * C + j];
      for (int j = 0; j < C; ++j) g[r * C + j] += y[r * C + j] * (d[r * C + j] - dot);
    }
  }

  void check_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) detail::throw_shape(op, a.shape(), b.shape());
  }

  template <typename F>
  void record1(Tensor& a, Tensor& out, F&& f) {
    if (recording_ && a.requires_grad()) {
      out.set_requires_grad(true);
      nodes_.emplace_back(std::forward<F>(f));
    }
  }

  template <typename F>
  void record2(Tensor& a, Tensor& b, Tensor& out, F&& f) {
    if (recording_ && (a.requires_grad() || b.requires_grad())) {
      out.set_requires_grad(true);
      nodes_.emplace_back(std::forward<F>(f));
    }
  }

  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
  int64_t backward_count_ = 0;
};

// Per-row top-k selection mask over the last axis of `values` ([..., R, C]).
// Ties break toward the lower column index; selection is not differentiable
// and the result is a plain 0/1 buffer. k is clamped to C.
inline std::vector<uint8_t> topk_row_mask(const Tensor& values, int k) {
  const int C = values.shape().back();
  const int64_t rows = values.numel() / C;
  if (k > C) k = C;
  std::vector<uint8_t> mask(static_cast<size_t>(values.numel()), 0);
  if (k <= 0) return mask;
  std::vector<float> scratch(static_cast<size_t>(C));
  for (int64_t r = 0; r < rows; ++r) {
    const float* v = values.data() + r * C;
    uint8_t* mr = mask.data() + r * C;
    if (k == C) {
      std::fill(mr, mr + C, uint8_t(1));
      continue;
    }
    // Everything strictly above the k-th value is in; the budget left over
    // goes to threshold-valued entries in index order, so ties resolve the
    // same way a stable full sort would.
    scratch.assign(v, v + C);
    std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end(),
                     std::greater<float>());
    const float thr = scratch[static_cast<size_t>(k - 1)];
    int taken = 0;
    for (int j = 0; j < C; ++j)
      if (v[j] > thr) {
        mr[j] = 1;
        ++taken;
      }
    for (int j = 0; j < C && taken < k; ++j)
      if (v[j] == thr && !mr[j]) {
        mr[j] = 1;
        ++taken;
      }
  }
  return mask;
}

}  // namespace dppn
