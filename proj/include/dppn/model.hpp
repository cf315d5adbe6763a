#pragma once
// Model variants on one spine:
//
//   dppn_*       embeddings -> dual grouping -> support -> agreement ->
//                field-biased routing -> sparse token mask -> two-lane fused
//                attention -> residual stack -> pooled classifier
//   transformer  dense attention + FFN, parameter-matched to the dppn stack
//   random_sparse  transformer with a frozen random 32-per-row mask
//   dppn_metalr  transformer forward; the field only rescales attention-score
//                gradients (a per-position-pair learning-rate schedule)
//   dppn_completion_*  dppn forward over fixed groupers plus an agreement
//                blend from a completion prior during early transfer epochs
//
// The decomposition variant lives in its own header; build_model there
// dispatches every variant.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <cblas.h>

#include "dppn/grouper.hpp"
#include "dppn/optim.hpp"
#include "dppn/pheromone.hpp"
#include "dppn/rng.hpp"
#include "dppn/tape.hpp"
#include "dppn/tensor.hpp"

namespace dppn {

enum class Variant {
  dppn_learned,
  dppn_fourier_tokpos,
  dppn_fourier_pos,
  transformer,
  random_sparse,
  decomposition,
  dppn_metalr,
  dppn_completion_learnedA,
  dppn_completion_extrinsicP,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::dppn_learned: return "dppn_learned";
    case Variant::dppn_fourier_tokpos: return "dppn_fourier_tokpos";
    case Variant::dppn_fourier_pos: return "dppn_fourier_pos";
    case Variant::transformer: return "transformer";
    case Variant::random_sparse: return "random_sparse";
    case Variant::decomposition: return "decomposition";
    case Variant::dppn_metalr: return "dppn_metalr";
    case Variant::dppn_completion_learnedA: return "dppn_completion_learnedA";
    case Variant::dppn_completion_extrinsicP: return "dppn_completion_extrinsicP";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::dppn_learned, Variant::dppn_fourier_tokpos, Variant::dppn_fourier_pos,
                    Variant::transformer, Variant::random_sparse, Variant::decomposition,
                    Variant::dppn_metalr, Variant::dppn_completion_learnedA,
                    Variant::dppn_completion_extrinsicP})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant: " + s);
}

// Routed forward path (slot machinery active)?
inline bool variant_routes(Variant v) {
  switch (v) {
    case Variant::dppn_learned:
    case Variant::dppn_fourier_tokpos:
    case Variant::dppn_fourier_pos:
    case Variant::dppn_completion_learnedA:
    case Variant::dppn_completion_extrinsicP:
      return true;
    default:
      return false;
  }
}

struct ModelConfig {
  Variant variant = Variant::dppn_learned;
  int d = 64;
  int heads = 4;
  int layers = 3;
  int m = 32;               // slot count per view
  int topk_mask = 32;       // fast-lane nonzeros per token row
  int window = 16;          // slow-lane local attention width
  int vocab = 32;
  int seq_len = 128;
  int n_classes = 2;
  float grouper_temperature = 1.0f;
  float gumbel_scale = 0.5f;      // gamma
  float route_alpha = 1.0f;       // field-term weight in routing
  float route_beta = 1.0f;        // agreement-term weight in routing
  float dropout = 0.1f;
  float lr = 3e-4f;
  float weight_decay = 0.01f;
  float metalr_lambda = 1.0f;
  uint64_t fourier_seed = 1729;
  float fourier_sigma = 1.0f;
  float completion_alpha = 0.3f;
  int completion_decay_epochs = 20;
  // Decomposition-only knobs (see decomposition header).
  int regions = 8;
  int clusters = 32;
  int strategies = 8;
  float centroid_momentum = 0.99f;
  float match_temperature = 0.1f;
};

inline constexpr float kEps = 1e-6f;  // agreement / routing / mask-bias epsilon

struct Batch {
  int B = 0, N = 0;
  std::vector<int> tokens;  // B*N, ids in [1, vocab]
  std::vector<int> labels;  // B, in [0, n_classes)
};

// Completion hook handed into forward during early transfer epochs. The
// callable maps B flattened m*m input patterns to B completed patterns
// (already normalized for blending); the model only does the alpha-blend.
struct CompletionContext {
  float alpha = 0.0f;
  bool use_extrinsic = false;  // feed token-equality patterns instead of A
  std::function<std::vector<float>(const std::vector<float>&, int)> complete_batch;
};

struct ForwardOptions {
  bool training = false;
  float phase = 1.0f;  // epoch / total_epochs, drives the fusion gate ramp
  const PheromoneField* field = nullptr;
  const CompletionContext* completion = nullptr;
  bool capture_diag = false;
};

struct LayerDiag {
  std::vector<float> A, p, M;    // first sample of the batch
  std::vector<float> Q1, Q2;     // first sample's slot assignments, N x m
  float mu = 0.0f, gate_mean = 0.0f;
};

struct RoutingCapture {
  int B = 0;
  int rows = 0, cols = 0;        // field coordinates (m x m, or clusters x strategies)
  std::vector<float> route;      // B*rows*cols preference weights for the deposit
  std::vector<LayerDiag> diag;   // one per layer when requested
};

struct ForwardResult {
  Tensor loss;    // scalar
  Tensor logits;  // [B, n_classes]
  std::vector<uint8_t> correct;
  RoutingCapture routing;
};

struct ModelBase {
  virtual ~ModelBase() = default;
  virtual ForwardResult forward(Tape& tape, const Batch& batch, const ForwardOptions& opts) = 0;
  virtual ParamMap& params() = 0;
  virtual const ModelConfig& config() const = 0;
  // Post-optimizer bookkeeping (non-gradient state such as k-means centroids).
  virtual void post_step(const ForwardResult&) {}
  // Fresh re-initialization of every trainable weight; non-gradient state
  // owned by the model (fixed tables, frozen masks) is preserved.
  virtual void reset_weights(uint64_t seed) = 0;
};

inline int64_t param_count(const ParamMap& params) {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Reference implementations of the routing algebra on plain buffers. These
// are the oracles the taped path is checked against, and what the worked
// numeric examples evaluate.

inline std::vector<float> route_probs_dense(const std::vector<float>& A, const std::vector<float>& tau,
                                            int m, float alpha, float beta, float eps = kEps) {
  std::vector<float> p(static_cast<size_t>(m) * m);
  for (int a = 0; a < m; ++a) {
    double mx = -1e300;
    std::vector<double> logit(static_cast<size_t>(m));
    for (int b = 0; b < m; ++b) {
      logit[static_cast<size_t>(b)] =
          alpha * std::log(static_cast<double>(tau[static_cast<size_t>(a) * m + b])) +
          beta * std::log(static_cast<double>(A[static_cast<size_t>(a) * m + b]) + eps);
      mx = std::max(mx, logit[static_cast<size_t>(b)]);
    }
    double sum = 0.0;
    for (int b = 0; b < m; ++b) sum += std::exp(logit[static_cast<size_t>(b)] - mx);
    for (int b = 0; b < m; ++b)
      p[static_cast<size_t>(a) * m + b] = static_cast<float>(std::exp(logit[static_cast<size_t>(b)] - mx) / sum);
  }
  return p;
}

inline std::vector<float> project_mask_dense(const std::vector<float>& Q1, const std::vector<float>& p,
                                             const std::vector<float>& Q2, int N, int m) {
  std::vector<float> M(static_cast<size_t>(N) * N, 0.0f);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
          acc += static_cast<double>(Q1[static_cast<size_t>(i) * m + a]) * p[static_cast<size_t>(a) * m + b] *
                 Q2[static_cast<size_t>(j) * m + b];
      M[static_cast<size_t>(i) * N + j] = static_cast<float>(acc);
    }
  return M;
}

// Position-pair gradient multipliers for the meta-LR variant:
//   mult(i,j) = 1 + lambda * [Q1 (tau - mean(tau)) Q2^T](i,j)
// written so a constant field yields exactly 1 everywhere (every product term
// is exactly zero before summation).
inline std::vector<float> metalr_multipliers(const FourierTables& tables, const PheromoneField& field,
                                             float lambda, int N) {
  const int m = field.rows();
  // Mean in double: for a constant field the division is exact, the centered
  // values are exactly zero, and the multipliers come out exactly 1.
  double mean_acc = 0.0;
  for (float t : field.values()) mean_acc += t;
  const float mean = static_cast<float>(mean_acc / static_cast<double>(field.values().size()));
  std::vector<float> centered(field.values().size());
  for (size_t i = 0; i < centered.size(); ++i) centered[i] = field.values()[i] - mean;

  std::vector<float> q1(static_cast<size_t>(N) * m), q2(static_cast<size_t>(N) * m);
  for (int i = 0; i < N; ++i) {
    std::memcpy(q1.data() + static_cast<size_t>(i) * m, tables.row(0, 0, i), sizeof(float) * static_cast<size_t>(m));
    std::memcpy(q2.data() + static_cast<size_t>(i) * m, tables.row(1, 0, i), sizeof(float) * static_cast<size_t>(m));
  }
  std::vector<float> tmp(static_cast<size_t>(N) * m);  // Q1 * centered
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, N, m, m, 1.0f, q1.data(), m, centered.data(),
              m, 0.0f, tmp.data(), m);
  std::vector<float> mult(static_cast<size_t>(N) * N);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, N, N, m, lambda, tmp.data(), m, q2.data(), m,
              0.0f, mult.data(), N);
  for (auto& x : mult) x += 1.0f;
  return mult;
}

// ---------------------------------------------------------------------------

class Model : public ModelBase {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg_.variant == Variant::decomposition)
      throw std::invalid_argument("Model: decomposition variant has its own class");
    if (cfg_.d % cfg_.heads != 0) throw std::invalid_argument("Model: d must divide into heads");
    if (variant_routes(cfg_.variant) && cfg_.variant != Variant::dppn_learned) {
      const FourierKind kind = cfg_.variant == Variant::dppn_fourier_tokpos
                                   ? FourierKind::token_position
                                   : FourierKind::position_only;
      fourier_ = std::make_unique<FourierTables>(kind, cfg_.fourier_seed, cfg_.m, cfg_.seq_len,
                                                 cfg_.vocab, cfg_.fourier_sigma,
                                                 cfg_.grouper_temperature);
    }
    if (cfg_.variant == Variant::dppn_metalr)
      fourier_ = std::make_unique<FourierTables>(FourierKind::position_only, cfg_.fourier_seed, cfg_.m,
                                                 cfg_.seq_len, cfg_.vocab, cfg_.fourier_sigma,
                                                 cfg_.grouper_temperature);
    build_band_mask();
    reset_weights(seed);
    if (cfg_.variant == Variant::random_sparse) build_random_mask(seed);
  }

  const ModelConfig& config() const override { return cfg_; }
  ParamMap& params() override { return params_; }
  const FourierTables* fourier_tables() const { return fourier_.get(); }

  // Per-token hard view-1 slot assignment at the first layer, eval mode and
  // noise-free. This is the coordinate snapshot cross-run alignment compares.
  std::vector<int> hard_assignments(const Batch& batch) {
    if (!variant_routes(cfg_.variant) && cfg_.variant != Variant::dppn_metalr)
      throw std::invalid_argument("hard_assignments: variant has no slot grouper");
    check_batch(batch);
    Tape tape;
    tape.set_recording(false);
    Tensor h = embed(tape, batch);
    Tensor x = tape.layer_norm(h, param("L0.ln1.g"), param("L0.ln1.b"));
    ForwardOptions opts;
    auto [Q1, Q2] = group(tape, 0, x, batch, opts);
    (void)Q2;
    std::vector<int> out(batch.tokens.size());
    for (size_t r = 0; r < out.size(); ++r) {
      const float* row = Q1.data() + static_cast<int64_t>(r) * cfg_.m;
      int arg = 0;
      for (int a = 1; a < cfg_.m; ++a)
        if (row[a] > row[arg]) arg = a;
      out[r] = arg;
    }
    return out;
  }

  void reset_weights(uint64_t seed) override {
    params_.clear();
    init_seed_ = seed;
    rng_ = RngStream::from(seed, "runtime");
    const int d = cfg_.d, m = cfg_.m;
    auto wn = [&](const std::string& name, Shape shape, float std_dev = 0.02f) {
      RngStream r = RngStream::from(init_seed_, "init." + name);
      Tensor t = Tensor::zeros(shape, true);
      for (auto& x : t.values()) x = r.normal() * std_dev;
      params_.emplace_back(name, t);
      return t;
    };
    auto zeros = [&](const std::string& name, Shape shape) {
      Tensor t = Tensor::zeros(shape, true);
      params_.emplace_back(name, t);
      return t;
    };
    auto ones = [&](const std::string& name, Shape shape) {
      Tensor t = Tensor::full(shape, 1.0f, true);
      params_.emplace_back(name, t);
      return t;
    };

    wn("embed.tok", {cfg_.vocab, d});
    wn("embed.pos", {cfg_.seq_len, d});
    const bool routed = variant_routes(cfg_.variant);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string L = "L" + std::to_string(l) + ".";
      ones(L + "ln1.g", {d});
      zeros(L + "ln1.b", {d});
      wn(L + "attn.wqkv", {d, 3 * d});
      zeros(L + "attn.bqkv", {3 * d});
      wn(L + "attn.wo", {d, d});
      zeros(L + "attn.bo", {d});
      if (routed) {
        if (cfg_.variant == Variant::dppn_learned) {
          wn(L + "grp.w1", {d, m});
          wn(L + "grp.w2", {d, m});
        }
        wn(L + "sup.wk", {d, d});
        wn(L + "agree.w", {d, 1});
        wn(L + "gate.w", {2 * d + 1, 1});
        zeros(L + "gate.b", {1});
      } else {
        ones(L + "ln2.g", {d});
        zeros(L + "ln2.b", {d});
        wn(L + "ffn.w1", {d, d});
        zeros(L + "ffn.b1", {d});
        wn(L + "ffn.w2", {d, d});
        zeros(L + "ffn.b2", {d});
      }
    }
    ones("final.ln.g", {d});
    zeros("final.ln.b", {d});
    wn("head.w", {d, cfg_.n_classes});
    zeros("head.b", {cfg_.n_classes});
  }

  ForwardResult forward(Tape& tape, const Batch& batch, const ForwardOptions& opts) override {
    check_batch(batch);
    if (variant_routes(cfg_.variant))
      return forward_routed(tape, batch, opts);
    return forward_baseline(tape, batch, opts);
  }

  // Token-equality patterns through the fixed view-1 grouper, one m x m
  // matrix per sample, max-normalized:  P = Q^T E Q  with E(i,j) = 1 iff
  // token_i == token_j. No trainable weight enters, so P survives a full
  // weight reset bit-exactly.
  std::vector<float> extrinsic_patterns(const Batch& batch) const {
    if (!fourier_) throw std::logic_error("extrinsic_patterns: variant has no fixed grouper");
    const int N = batch.N, m = cfg_.m;
    std::vector<float> out(static_cast<size_t>(batch.B) * m * m, 0.0f);
    std::vector<float> qe(static_cast<size_t>(N) * m);
    for (int b = 0; b < batch.B; ++b) {
      const int* toks = batch.tokens.data() + static_cast<size_t>(b) * N;
      // qe(i, :) = sum_j [tok_j == tok_i] * Q(j, :)
      std::memset(qe.data(), 0, sizeof(float) * qe.size());
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
          if (toks[i] != toks[j]) continue;
          const float* qr = fourier_->row(0, toks[j] - 1, j);
          float* dst = qe.data() + static_cast<size_t>(i) * m;
          for (int a = 0; a < m; ++a) dst[a] += qr[a];
        }
      float* P = out.data() + static_cast<size_t>(b) * m * m;
      for (int i = 0; i < N; ++i) {
        const float* qi = fourier_->row(0, toks[i] - 1, i);
        const float* ei = qe.data() + static_cast<size_t>(i) * m;
        for (int a = 0; a < m; ++a)
          for (int c = 0; c < m; ++c) P[static_cast<size_t>(a) * m + c] += qi[a] * ei[c];
      }
      float mx = 0.0f;
      for (int i = 0; i < m * m; ++i) mx = std::max(mx, P[i]);
      if (mx > 0.0f)
        for (int i = 0; i < m * m; ++i) P[i] /= mx;
    }
    return out;
  }

  // Frozen per-head attention mask of the random_sparse baseline, [H, N, N].
  const std::vector<uint8_t>& random_mask() const { return rs_bits_; }

 private:
  Tensor param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw std::logic_error("missing parameter " + name);
  }

  void check_batch(const Batch& batch) const {
    if (batch.N != cfg_.seq_len) throw std::invalid_argument("forward: sequence length mismatch");
    if (static_cast<int>(batch.tokens.size()) != batch.B * batch.N ||
        static_cast<int>(batch.labels.size()) != batch.B)
      throw std::invalid_argument("forward: batch buffers inconsistent");
    for (int t : batch.tokens)
      if (t < 1 || t > cfg_.vocab) throw std::invalid_argument("forward: token id out of range");
  }

  void build_band_mask() {
    const int N = cfg_.seq_len, half = cfg_.window / 2;
    band_bits_.assign(static_cast<size_t>(N) * N, 0);
    for (int i = 0; i < N; ++i)
      for (int j = std::max(0, i - half); j <= std::min(N - 1, i + half); ++j)
        band_bits_[static_cast<size_t>(i) * N + j] = 1;
  }

  void build_random_mask(uint64_t seed) {
    const int N = cfg_.seq_len, H = cfg_.heads, k = cfg_.topk_mask;
    RngStream r = RngStream::from(seed, "rsmask");
    rs_bits_.assign(static_cast<size_t>(H) * N * N, 0);
    std::vector<int> cols(static_cast<size_t>(N));
    for (int h = 0; h < H; ++h)
      for (int i = 0; i < N; ++i) {
        for (int j = 0; j < N; ++j) cols[static_cast<size_t>(j)] = j;
        r.shuffle(cols);
        for (int j = 0; j < k; ++j)
          rs_bits_[(static_cast<size_t>(h) * N + i) * N + cols[static_cast<size_t>(j)]] = 1;
      }
  }

  Tensor embed(Tape& tape, const Batch& batch) {
    std::vector<int> ids(batch.tokens.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = batch.tokens[i] - 1;
    Tensor h = tape.embedding(param("embed.tok"), ids, batch.B, batch.N);
    return tape.add_position(h, param("embed.pos"));
  }

  // Dual soft grouping for layer l. Fourier tables are constants; the learned
  // grouper is a linear map with optional Gumbel exploration noise.
  std::pair<Tensor, Tensor> group(Tape& tape, int l, Tensor x, const Batch& batch,
                                  const ForwardOptions& opts) {
    if (cfg_.variant == Variant::dppn_learned) {
      const std::string L = "L" + std::to_string(l) + ".";
      Tensor qs[2];
      for (int view = 0; view < 2; ++view) {
        Tensor logits = tape.scale(tape.matmul(x, param(L + (view == 0 ? "grp.w1" : "grp.w2"))),
                                   1.0f / cfg_.grouper_temperature);
        if (opts.training && cfg_.gumbel_scale != 0.0f) {
          Tensor noise = Tensor::uninit(logits.shape());
          for (auto& v : noise.values()) v = cfg_.gumbel_scale * rng_.gumbel();
          logits = tape.add(logits, noise);
        }
        qs[view] = tape.softmax_lastdim(logits);
      }
      return {qs[0], qs[1]};
    }
    // Fixed tables: copy rows per (token, position).
    Tensor qs[2];
    for (int view = 0; view < 2; ++view) {
      Tensor q = Tensor::uninit({batch.B, batch.N, cfg_.m});
      for (int b = 0; b < batch.B; ++b)
        for (int i = 0; i < batch.N; ++i)
          std::memcpy(q.data() + (static_cast<int64_t>(b) * batch.N + i) * cfg_.m,
                      fourier_->row(view, batch.tokens[static_cast<size_t>(b) * batch.N + i] - 1, i),
                      sizeof(float) * static_cast<size_t>(cfg_.m));
      qs[view] = q;
    }
    return {qs[0], qs[1]};
  }

  // Support matrix for one view: S = (Q^T x)(Q^T W_K x)^T, ReLU, rows to 1.
  Tensor support(Tape& tape, Tensor Q, Tensor x, Tensor kx) {
    Tensor s = tape.matmul(Q, x, true, false);
    Tensor k = tape.matmul(Q, kx, true, false);
    return tape.row_normalize(tape.relu(tape.matmul(s, k, false, true)));
  }

  ForwardResult forward_routed(Tape& tape, const Batch& batch, const ForwardOptions& opts) {
    if (!opts.field) throw std::invalid_argument("forward: routed variant needs a pheromone field");
    if (opts.field->rows() != cfg_.m || opts.field->cols() != cfg_.m)
      throw std::invalid_argument("forward: field shape mismatch");
    const int B = batch.B, N = batch.N, m = cfg_.m, d = cfg_.d, H = cfg_.heads;
    const int dh = d / H;
    ForwardResult res;
    res.routing.B = B;
    res.routing.rows = m;
    res.routing.cols = m;
    res.routing.route.assign(static_cast<size_t>(B) * m * m, 0.0f);

    // Field term of the routing logits, constant within the forward pass.
    Tensor alpha_log_tau = Tensor::uninit({m, m});
    for (int i = 0; i < m * m; ++i)
      alpha_log_tau.data()[i] = cfg_.route_alpha * std::log(opts.field->values()[static_cast<size_t>(i)]);

    // The fusion gate ramps in over training: silent for the first fifth,
    // then linear to full strength.
    const float phase_factor = std::max(0.0f, (opts.phase - 0.2f) / 0.8f);

    // Completion patterns from token identity are layer-independent; compute
    // once and let every layer's blend reuse them.
    std::vector<float> completed_extrinsic;
    const CompletionContext* comp = opts.completion;
    if (comp && comp->alpha > 0.0f && comp->use_extrinsic)
      completed_extrinsic = comp->complete_batch(extrinsic_patterns(batch), B);

    Tensor h = embed(tape, batch);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string L = "L" + std::to_string(l) + ".";
      Tensor x = tape.layer_norm(h, param(L + "ln1.g"), param(L + "ln1.b"));
      auto [Q1, Q2] = group(tape, l, x, batch, opts);

      Tensor kx = tape.matmul(x, param(L + "sup.wk"));
      Tensor S1 = support(tape, Q1, x, kx);
      Tensor S2 = support(tape, Q2, x, kx);

      // Confidence-weighted agreement between the two views.
      Tensor hbar = tape.mean_axis1(x);
      Tensor mu = tape.reshape(tape.sigmoid(tape.matmul(hbar, param(L + "agree.w"))), {B});
      Tensor geo = tape.sqrt_op(tape.mul(tape.add_const(S1, kEps), tape.add_const(S2, kEps)));
      Tensor ari = tape.scale(tape.add(S1, S2), 0.5f);
      Tensor one_minus_mu = tape.add_const(tape.scale(mu, -1.0f), 1.0f);
      Tensor A = tape.add(tape.mul_rows(geo, mu), tape.mul_rows(ari, one_minus_mu));

      // Completion blend (transfer-time only; alpha fades to 0 by epoch 20).
      if (comp && comp->alpha > 0.0f) {
        std::vector<float> completed = comp->use_extrinsic
                                           ? completed_extrinsic
                                           : comp->complete_batch(A.values(), B);
        Tensor C = Tensor::uninit({B, m, m});
        for (int64_t i = 0; i < C.numel(); ++i)
          C.data()[i] = comp->alpha * completed[static_cast<size_t>(i)];
        A = tape.add(tape.scale(A, 1.0f - comp->alpha), C);
      }

      // Field-biased routing over slots.
      Tensor route_logits = tape.add_position(
          tape.scale(tape.log_op(tape.add_const(A, kEps)), cfg_.route_beta), alpha_log_tau);
      Tensor p = tape.softmax_lastdim(route_logits);
      for (int64_t i = 0; i < p.numel(); ++i)
        res.routing.route[static_cast<size_t>(i)] += p.data()[i] / static_cast<float>(cfg_.layers);

      // Slot routing projected to a token-pair preference map.
      Tensor M = tape.matmul(tape.matmul(Q1, p), Q2, false, true);
      std::vector<uint8_t> fast_bits = topk_row_mask(M, cfg_.topk_mask);
      AttnMask fast_mask{fast_bits.data(), 1, 0, N, N};

      Tensor qkv = tape.add_bias(tape.matmul(x, param(L + "attn.wqkv")), param(L + "attn.bqkv"));
      Tensor q, k, v;
      tape.split_qkv(qkv, H, q, k, v);
      Tensor scores = tape.scale(tape.matmul(q, k, false, true), 1.0f / std::sqrt(static_cast<float>(dh)));

      // Fast lane: sparse mask plus a preference bias so the routing weights
      // shape attention inside the mask (and receive gradient through it).
      Tensor bias = tape.log_op(tape.add_const(M, kEps));
      Tensor probs_fast = tape.softmax_masked(tape.add_headwise(scores, bias), fast_mask);
      Tensor ctx_fast = tape.merge_heads(tape.matmul(probs_fast, v));

      // Slow lane: plain local-window attention over the same projections.
      AttnMask band{band_bits_.data(), 0, 0, N, N};
      Tensor probs_slow = tape.softmax_masked(scores, band);
      Tensor ctx_slow = tape.merge_heads(tape.matmul(probs_slow, v));

      Tensor Abar = tape.expand_scalar_rows(tape.mean_last2(A), N);
      Tensor gate_in = tape.concat_lastdim({ctx_fast, ctx_slow, Abar});
      Tensor g_raw = tape.sigmoid(tape.add_bias(tape.matmul(gate_in, param(L + "gate.w")), param(L + "gate.b")));
      Tensor g = tape.scale(g_raw, phase_factor);
      Tensor one_minus_g = tape.add_const(tape.scale(g, -1.0f), 1.0f);
      Tensor blended = tape.add(tape.mul_gate(ctx_fast, g), tape.mul_gate(ctx_slow, one_minus_g));

      Tensor out = tape.add_bias(tape.matmul(blended, param(L + "attn.wo")), param(L + "attn.bo"));
      if (opts.training && cfg_.dropout > 0.0f) out = tape.dropout(out, cfg_.dropout, rng_);
      h = tape.add(h, out);

      if (opts.capture_diag) {
        LayerDiag diag;
        diag.A.assign(A.data(), A.data() + m * m);
        diag.p.assign(p.data(), p.data() + m * m);
        diag.M.assign(M.data(), M.data() + static_cast<int64_t>(N) * N);
        diag.Q1.assign(Q1.data(), Q1.data() + static_cast<int64_t>(N) * m);
        diag.Q2.assign(Q2.data(), Q2.data() + static_cast<int64_t>(N) * m);
        diag.mu = mu.data()[0];
        float gm = 0.0f;
        for (int i = 0; i < N; ++i) gm += g.data()[i];
        diag.gate_mean = gm / static_cast<float>(N);
        res.routing.diag.push_back(std::move(diag));
      }
    }
    finish(tape, batch, h, res);
    return res;
  }

  ForwardResult forward_baseline(Tape& tape, const Batch& batch, const ForwardOptions& opts) {
    const int N = batch.N, d = cfg_.d, H = cfg_.heads;
    const int dh = d / H;
    ForwardResult res;

    // Field-driven gradient multipliers (meta-LR only). The forward values
    // are untouched; only backward flow through the scores is rescaled.
    std::vector<float> mult;
    if (cfg_.variant == Variant::dppn_metalr && opts.field) {
      if (opts.field->rows() != cfg_.m || opts.field->cols() != cfg_.m)
        throw std::invalid_argument("forward: field shape mismatch");
      float mn = opts.field->values()[0], mx = mn;
      for (float t : opts.field->values()) {
        mn = std::min(mn, t);
        mx = std::max(mx, t);
      }
      if (mx > mn)  // constant field multiplies by exactly 1; skip the op
        mult = metalr_multipliers(*fourier_, *opts.field, cfg_.metalr_lambda, N);
    }

    Tensor h = embed(tape, batch);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string L = "L" + std::to_string(l) + ".";
      Tensor x = tape.layer_norm(h, param(L + "ln1.g"), param(L + "ln1.b"));
      Tensor qkv = tape.add_bias(tape.matmul(x, param(L + "attn.wqkv")), param(L + "attn.bqkv"));
      Tensor q, k, v;
      tape.split_qkv(qkv, H, q, k, v);
      Tensor scores = tape.scale(tape.matmul(q, k, false, true), 1.0f / std::sqrt(static_cast<float>(dh)));
      if (!mult.empty()) scores = tape.scale_scores_grad(scores, mult);
      Tensor probs;
      if (cfg_.variant == Variant::random_sparse) {
        AttnMask rs{rs_bits_.data(), 0, 1, N, N};
        probs = tape.softmax_masked(scores, rs);
      } else {
        probs = tape.softmax_lastdim(scores);
      }
      Tensor ctx = tape.merge_heads(tape.matmul(probs, v));
      Tensor out = tape.add_bias(tape.matmul(ctx, param(L + "attn.wo")), param(L + "attn.bo"));
      if (opts.training && cfg_.dropout > 0.0f) out = tape.dropout(out, cfg_.dropout, rng_);
      h = tape.add(h, out);

      Tensor x2 = tape.layer_norm(h, param(L + "ln2.g"), param(L + "ln2.b"));
      Tensor f1 = tape.relu(tape.add_bias(tape.matmul(x2, param(L + "ffn.w1")), param(L + "ffn.b1")));
      Tensor f2 = tape.add_bias(tape.matmul(f1, param(L + "ffn.w2")), param(L + "ffn.b2"));
      if (opts.training && cfg_.dropout > 0.0f) f2 = tape.dropout(f2, cfg_.dropout, rng_);
      h = tape.add(h, f2);
    }
    finish(tape, batch, h, res);
    return res;
  }

  void finish(Tape& tape, const Batch& batch, Tensor h, ForwardResult& res) {
    Tensor x = tape.layer_norm(h, param("final.ln.g"), param("final.ln.b"));
    Tensor pooled = tape.mean_axis1(x);
    res.logits = tape.add_bias(tape.matmul(pooled, param("head.w")), param("head.b"));
    res.loss = tape.cross_entropy_mean(res.logits, batch.labels);
    res.correct.resize(static_cast<size_t>(batch.B));
    for (int b = 0; b < batch.B; ++b) {
      const float* row = res.logits.data() + static_cast<int64_t>(b) * cfg_.n_classes;
      int arg = 0;
      for (int c = 1; c < cfg_.n_classes; ++c)
        if (row[c] > row[arg]) arg = c;
      res.correct[static_cast<size_t>(b)] = arg == batch.labels[static_cast<size_t>(b)] ? 1 : 0;
    }
  }

  ModelConfig cfg_;
  ParamMap params_;
  uint64_t init_seed_ = 0;
  RngStream rng_ = RngStream(0);
  std::unique_ptr<FourierTables> fourier_;
  std::vector<uint8_t> band_bits_;
  std::vector<uint8_t> rs_bits_;
};

}  // namespace dppn
