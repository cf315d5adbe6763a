#pragma once
// Region/cluster/strategy model: instead of learned slot groupers, the input
// is cut into R fixed contiguous regions, each region is embedded by a small
// encoder, and the pooled profile is matched against K online-k-means
// centroids. The pheromone field lives over (cluster, strategy) pairs; the
// selected strategy mixture turns into a per-token key bias on an otherwise
// ordinary transformer stack. Region boundaries and strategy templates are
// structural constants; the centroids follow the learned embedding geometry
// via an EMA and are therefore re-drawn on a weight reset along with the
// weights they summarize.

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dppn/model.hpp"
#include "dppn/pheromone.hpp"
#include "dppn/rng.hpp"
#include "dppn/tape.hpp"
#include "dppn/tensor.hpp"

namespace dppn {

class DecompositionModel : public ModelBase {
 public:
  DecompositionModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg_.variant != Variant::decomposition)
      throw std::invalid_argument("DecompositionModel: wrong variant");
    if (cfg_.seq_len % cfg_.regions != 0)
      throw std::invalid_argument("DecompositionModel: seq_len not divisible by region count");
    if (cfg_.d % cfg_.heads != 0) throw std::invalid_argument("DecompositionModel: d must divide into heads");
    reset_weights(seed);
  }

  const ModelConfig& config() const override { return cfg_; }
  ParamMap& params() override { return params_; }
  const std::vector<float>& centroids() const { return centroids_; }

  void reset_weights(uint64_t seed) override {
    params_.clear();
    init_seed_ = seed;
    rng_ = RngStream::from(seed, "runtime");
    const int d = cfg_.d;
    auto wn = [&](const std::string& name, Shape shape, float std_dev = 0.02f) {
      RngStream r = RngStream::from(init_seed_, "init." + name);
      Tensor t = Tensor::zeros(shape, true);
      for (auto& x : t.values()) x = r.normal() * std_dev;
      params_.emplace_back(name, t);
    };
    auto zeros = [&](const std::string& name, Shape shape) {
      params_.emplace_back(name, Tensor::zeros(shape, true));
    };
    auto ones = [&](const std::string& name, Shape shape) {
      params_.emplace_back(name, Tensor::full(shape, 1.0f, true));
    };
    wn("embed.tok", {cfg_.vocab, d});
    wn("embed.pos", {cfg_.seq_len, d});
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string L = "L" + std::to_string(l) + ".";
      ones(L + "ln1.g", {d});
      zeros(L + "ln1.b", {d});
      wn(L + "attn.wqkv", {d, 3 * d});
      zeros(L + "attn.bqkv", {3 * d});
      wn(L + "attn.wo", {d, d});
      zeros(L + "attn.bo", {d});
      ones(L + "ln2.g", {d});
      zeros(L + "ln2.b", {d});
      wn(L + "ffn.w1", {d, d});
      zeros(L + "ffn.b1", {d});
      wn(L + "ffn.w2", {d, d});
      zeros(L + "ffn.b2", {d});
    }
    wn("dec.enc.w1", {d, d / 2});
    zeros("dec.enc.b1", {d / 2});
    wn("dec.enc.w2", {d / 2, d});
    zeros("dec.enc.b2", {d});
    wn("dec.strat.v", {d, cfg_.strategies});
    ones("final.ln.g", {d});
    zeros("final.ln.b", {d});
    wn("head.w", {d, cfg_.n_classes});
    zeros("head.b", {cfg_.n_classes});

    // Unit-length random centroids; k-means state starts fresh with the
    // weights whose geometry it tracks.
    RngStream cr = RngStream::from(init_seed_, "centroids");
    centroids_.assign(static_cast<size_t>(cfg_.clusters) * d, 0.0f);
    for (int k = 0; k < cfg_.clusters; ++k) {
      float* c = centroids_.data() + static_cast<size_t>(k) * d;
      float norm = 0.0f;
      for (int j = 0; j < d; ++j) {
        c[j] = cr.normal();
        norm += c[j] * c[j];
      }
      norm = std::sqrt(norm);
      for (int j = 0; j < d; ++j) c[j] /= norm;
    }
    pending_z_.clear();
    pending_assign_.clear();
  }

  ForwardResult forward(Tape& tape, const Batch& batch, const ForwardOptions& opts) override {
    if (batch.N != cfg_.seq_len) throw std::invalid_argument("forward: sequence length mismatch");
    if (!opts.field) throw std::invalid_argument("forward: decomposition variant needs a pheromone field");
    if (opts.field->rows() != cfg_.clusters || opts.field->cols() != cfg_.strategies)
      throw std::invalid_argument("forward: field shape mismatch");
    for (int t : batch.tokens)
      if (t < 1 || t > cfg_.vocab) throw std::invalid_argument("forward: token id out of range");

    const int B = batch.B, N = batch.N, d = cfg_.d, H = cfg_.heads;
    const int R = cfg_.regions, K = cfg_.clusters, S = cfg_.strategies;
    const int dh = d / H;
    ForwardResult res;
    res.routing.B = B;
    res.routing.rows = K;
    res.routing.cols = S;

    std::vector<int> ids(batch.tokens.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = batch.tokens[i] - 1;
    Tensor h = tape.add_position(tape.embedding(param("embed.tok"), ids, B, N), param("embed.pos"));

    // Region profile: mean-pool each contiguous block of the input embedding,
    // push it through the encoder, pool over regions, and compare on the
    // sphere against the centroid bank.
    Tensor regions = region_means(tape, h, R);  // [B, R, d]
    Tensor enc = tape.add_bias(
        tape.matmul(tape.relu(tape.add_bias(tape.matmul(regions, param("dec.enc.w1")), param("dec.enc.b1"))),
                    param("dec.enc.w2")),
        param("dec.enc.b2"));
    Tensor zbar = tape.mean_axis1(enc);                 // [B, d]
    Tensor zhat = tape.l2_normalize_rows(zbar);         // [B, d]
    Tensor cent = Tensor::from({K, d}, std::vector<float>(centroids_));
    Tensor sim = tape.matmul(zhat, cent, false, true);  // [B, K] cosine similarity
    Tensor c = tape.softmax_lastdim(tape.scale(sim, 1.0f / cfg_.match_temperature));

    // Strategy mixture: field affinity through the cluster profile plus a
    // learned per-strategy score of the pooled embedding.
    Tensor tau = Tensor::from({K, S}, std::vector<float>(opts.field->values()));
    Tensor field_term = tape.scale(tape.log_op(tape.matmul(c, tau)), cfg_.route_alpha);
    Tensor learned_term = tape.scale(
        tape.log_op(tape.add_const(tape.sigmoid(tape.matmul(zbar, param("dec.strat.v"))), kEps)),
        cfg_.route_beta);
    Tensor p_strat = tape.softmax_lastdim(tape.add(field_term, learned_term));  // [B, S]

    // One-hot strategy templates over regions (strategy s favors region s),
    // expanded to a per-token key bias shared by all layers.
    Tensor templates = Tensor::zeros({S, R});
    for (int s = 0; s < S; ++s) templates.data()[static_cast<int64_t>(s) * R + s % R] = 1.0f;
    Tensor prio = tape.matmul(p_strat, templates);                   // [B, R]
    Tensor key_bias = tape.scale(tape.repeat_cols(prio, N / R), kKeyBiasGain);  // [B, N]

    // Deposit preference: joint (cluster, strategy) usage per sample.
    res.routing.route.assign(static_cast<size_t>(B) * K * S, 0.0f);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k)
        for (int s = 0; s < S; ++s)
          res.routing.route[(static_cast<size_t>(b) * K + k) * S + s] =
              c.data()[static_cast<int64_t>(b) * K + k] * p_strat.data()[static_cast<int64_t>(b) * S + s];

    if (opts.training) stash_assignments(zhat, sim, B, d, K);

    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string L = "L" + std::to_string(l) + ".";
      Tensor x = tape.layer_norm(h, param(L + "ln1.g"), param(L + "ln1.b"));
      Tensor qkv = tape.add_bias(tape.matmul(x, param(L + "attn.wqkv")), param(L + "attn.bqkv"));
      Tensor q, k, v;
      tape.split_qkv(qkv, H, q, k, v);
      Tensor scores = tape.scale(tape.matmul(q, k, false, true), 1.0f / std::sqrt(static_cast<float>(dh)));
      Tensor probs = tape.softmax_lastdim(tape.add_key_bias(scores, key_bias));
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

    Tensor xf = tape.layer_norm(h, param("final.ln.g"), param("final.ln.b"));
    Tensor pooled = tape.mean_axis1(xf);
    res.logits = tape.add_bias(tape.matmul(pooled, param("head.w")), param("head.b"));
    res.loss = tape.cross_entropy_mean(res.logits, batch.labels);
    res.correct.resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const float* row = res.logits.data() + static_cast<int64_t>(b) * cfg_.n_classes;
      int arg = 0;
      for (int cls = 1; cls < cfg_.n_classes; ++cls)
        if (row[cls] > row[arg]) arg = cls;
      res.correct[static_cast<size_t>(b)] = arg == batch.labels[static_cast<size_t>(b)] ? 1 : 0;
    }
    return res;
  }

  // EMA k-means over the batch stashed by the last training forward:
  // each hard-assigned centroid moves toward the mean of its samples, then
  // back onto the unit sphere.
  void post_step(const ForwardResult&) override {
    if (pending_assign_.empty()) return;
    const int d = cfg_.d, K = cfg_.clusters;
    const int B = static_cast<int>(pending_assign_.size());
    std::vector<float> sum(static_cast<size_t>(K) * d, 0.0f);
    std::vector<int> count(static_cast<size_t>(K), 0);
    for (int b = 0; b < B; ++b) {
      const int k = pending_assign_[static_cast<size_t>(b)];
      ++count[static_cast<size_t>(k)];
      const float* z = pending_z_.data() + static_cast<size_t>(b) * d;
      float* s = sum.data() + static_cast<size_t>(k) * d;
      for (int j = 0; j < d; ++j) s[j] += z[j];
    }
    const float mom = cfg_.centroid_momentum;
    for (int k = 0; k < K; ++k) {
      if (count[static_cast<size_t>(k)] == 0) continue;
      float* c = centroids_.data() + static_cast<size_t>(k) * d;
      const float inv = 1.0f / static_cast<float>(count[static_cast<size_t>(k)]);
      float norm = 0.0f;
      for (int j = 0; j < d; ++j) {
        c[j] = mom * c[j] + (1.0f - mom) * sum[static_cast<size_t>(k) * d + j] * inv;
        norm += c[j] * c[j];
      }
      norm = std::sqrt(norm);
      if (norm > 0.0f)
        for (int j = 0; j < d; ++j) c[j] /= norm;
    }
    pending_assign_.clear();
    pending_z_.clear();
  }

 private:
  static constexpr float kKeyBiasGain = 2.0f;

  Tensor param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw std::logic_error("missing parameter " + name);
  }

  // [B, N, d] -> [B, R, d] block means. Contiguous rows make each region a
  // flat [len, d] slab, so a reshape puts regions on the batch axis.
  Tensor region_means(Tape& tape, Tensor h, int R) {
    const int B = h.dim(0), N = h.dim(1), d = h.dim(2);
    const int len = N / R;
    Tensor blocks = tape.reshape(h, {B * R, len, d});
    return tape.reshape(tape.mean_axis1(blocks), {B, R, d});
  }

  void stash_assignments(const Tensor& zhat, const Tensor& sim, int B, int d, int K) {
    pending_z_.assign(zhat.data(), zhat.data() + static_cast<int64_t>(B) * d);
    pending_assign_.resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const float* row = sim.data() + static_cast<int64_t>(b) * K;
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[arg]) arg = k;
      pending_assign_[static_cast<size_t>(b)] = arg;
    }
  }

  ModelConfig cfg_;
  ParamMap params_;
  uint64_t init_seed_ = 0;
  RngStream rng_ = RngStream(0);
  std::vector<float> centroids_;  // [K, d], unit rows
  std::vector<float> pending_z_;
  std::vector<int> pending_assign_;
};

inline std::unique_ptr<ModelBase> build_model(const ModelConfig& cfg, uint64_t seed) {
  if (cfg.variant == Variant::decomposition) return std::make_unique<DecompositionModel>(cfg, seed);
  return std::make_unique<Model>(cfg, seed);
}

}  // namespace dppn
