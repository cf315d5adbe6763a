#pragma once
// Persistent slot-transition field with MMAS-style updates. The field is a
// plain float32 statistic: gradients never touch it, and it serializes
// independently of model weights so it can survive a full weight reset.
//
// Update cascade, applied once per optimizer step:
//   1. evaporation   tau <- rho*tau + (1-rho)*tau_min
//   2. deposit       dtau = (1/B) sum_b s_b p(b),  s_b = +1 correct / -1 not
//   3. sparse step   normalize by max|dtau|, add delta*dtau*(tau_max-tau_min)
//                    on the update_topk entries with largest |dtau|
//   4. clamp         [tau_min, tau_max]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

namespace dppn {

struct PheromoneConfig {
  float tau_min = 0.1f;
  float tau_max = 2.0f;
  float rho = 0.8f;          // evaporation retention
  float delta = 0.3f;        // deposit scale
  int update_topk = 128;     // sparse-update budget per step
};

// One sample's contribution to a deposit: the route preference matrix the
// forward pass produced, plus whether the prediction was correct.
struct RoutePreference {
  std::vector<float> p;  // rows*cols, row-stochastic per row
  bool correct = false;
};

struct FieldStats {
  float mean = 0.0f;
  float stddev = 0.0f;  // population
  int high_count = 0;   // entries >= threshold
};

class PheromoneField {
 public:
  PheromoneField(int rows, int cols, PheromoneConfig cfg = {})
      : rows_(rows), cols_(cols), cfg_(cfg) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("PheromoneField: non-positive shape");
    tau_.assign(static_cast<size_t>(rows) * cols, 0.5f * (cfg.tau_min + cfg.tau_max));
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int64_t size() const { return static_cast<int64_t>(rows_) * cols_; }
  const PheromoneConfig& config() const { return cfg_; }
  const std::vector<float>& values() const { return tau_; }
  std::vector<float>& values() { return tau_; }
  float at(int r, int c) const { return tau_[static_cast<size_t>(r) * cols_ + c]; }
  float& at(int r, int c) { return tau_[static_cast<size_t>(r) * cols_ + c]; }

  void clamp() {
    for (auto& t : tau_) t = std::min(cfg_.tau_max, std::max(cfg_.tau_min, t));
  }

  void evaporate() {
    const float keep = cfg_.rho, pull = (1.0f - cfg_.rho) * cfg_.tau_min;
    for (auto& t : tau_) t = keep * t + pull;
    clamp();
  }

  // Accumulated per-sample preferences -> one sparse reinforcement step.
  // Returns false when the deposit was skipped (max|dtau| below guard).
  bool deposit(const std::vector<RoutePreference>& batch) {
    if (batch.empty()) throw std::invalid_argument("deposit: empty batch");
    const size_t n = tau_.size();
    std::vector<double> dtau(n, 0.0);
    for (const auto& rp : batch) {
      if (rp.p.size() != n) throw std::invalid_argument("deposit: preference shape mismatch");
      const double s = rp.correct ? 1.0 : -1.0;
      for (size_t i = 0; i < n; ++i) dtau[i] += s * rp.p[i];
    }
    const double invB = 1.0 / static_cast<double>(batch.size());
    double mx = 0.0;
    for (auto& d : dtau) {
      d *= invB;
      mx = std::max(mx, std::abs(d));
    }
    if (mx < 1e-12) return false;  // guard: nothing meaningful to normalize

    // Top-k entries by |dtau|; ties broken by row-major index for determinism.
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const size_t k = std::min<size_t>(static_cast<size_t>(cfg_.update_topk), n);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int64_t a, int64_t b) {
      const double da = std::abs(dtau[a]), db = std::abs(dtau[b]);
      if (da != db) return da > db;
      return a < b;
    });
    const double scale = cfg_.delta * (cfg_.tau_max - cfg_.tau_min) / mx;
    for (size_t j = 0; j < k; ++j) {
      const int64_t i = idx[j];
      tau_[i] = static_cast<float>(tau_[i] + scale * dtau[i]);
    }
    clamp();
    return true;
  }

  // The full per-optimizer-step cascade. An empty batch is pure evaporation.
  bool step(const std::vector<RoutePreference>& batch) {
    evaporate();
    if (batch.empty()) return false;
    return deposit(batch);
  }

  // Shannon entropy in nats of the field normalized to a distribution.
  double entropy() const {
    double sum = 0.0;
    for (float t : tau_) sum += t;
    if (!(sum > 0.0)) throw std::domain_error("entropy: non-positive field mass");
    double h = 0.0;
    for (float t : tau_) {
      if (t <= 0.0f) continue;
      const double p = t / sum;
      h -= p * std::log(p);
    }
    return h;
  }

  FieldStats stats(float high_threshold = 1.05f) const {
    FieldStats s;
    double sum = 0.0, sum2 = 0.0;
    for (float t : tau_) {
      sum += t;
      sum2 += static_cast<double>(t) * t;
      if (t >= high_threshold) ++s.high_count;
    }
    const double n = static_cast<double>(tau_.size());
    const double mean = sum / n;
    s.mean = static_cast<float>(mean);
    s.stddev = static_cast<float>(std::sqrt(std::max(0.0, sum2 / n - mean * mean)));
    return s;
  }

 private:
  int rows_, cols_;
  PheromoneConfig cfg_;
  std::vector<float> tau_;
};

// ---------------------------------------------------------------------------
// .phero container: magic, u32 header length, JSON header, float32 payload.
// The header carries the update parameters and a crc32 of the payload, so a
// field loaded months later still knows the cascade that produced it.

inline constexpr char kFieldMagic[8] = {'D', 'P', 'P', 'N', 'F', '0', '0', '1'};

inline void save_field(const std::string& path, const PheromoneField& f,
                       const std::string& experiment_id = "") {
  const auto& v = f.values();
  const size_t nbytes = v.size() * sizeof(float);
  nlohmann::json header = {
      {"rows", f.rows()},
      {"cols", f.cols()},
      {"tau_min", f.config().tau_min},
      {"tau_max", f.config().tau_max},
      {"rho", f.config().rho},
      {"delta", f.config().delta},
      {"update_topk", f.config().update_topk},
      {"experiment_id", experiment_id},
      {"crc32", static_cast<uint32_t>(
                    crc32(0, reinterpret_cast<const unsigned char*>(v.data()),
                          static_cast<uInt>(nbytes)))},
  };
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_field: cannot open " + path);
  out.write(kFieldMagic, sizeof(kFieldMagic));
  const uint32_t hlen = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(nbytes));
  if (!out) throw std::runtime_error("save_field: write failed for " + path);
}

// expected_rows/cols of -1 accept any shape; otherwise a mismatch is an error
// (a routing field must not silently load where a strategy field is expected).
inline PheromoneField load_field(const std::string& path, int expected_rows = -1,
                                 int expected_cols = -1, std::string* experiment_id = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_field: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kFieldMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_field: bad magic in " + path);
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1u << 20)) throw std::runtime_error("load_field: bad header in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw std::runtime_error("load_field: unparseable header in " + path);

  const int rows = header.at("rows").get<int>();
  const int cols = header.at("cols").get<int>();
  if ((expected_rows >= 0 && rows != expected_rows) || (expected_cols >= 0 && cols != expected_cols))
    throw std::runtime_error("load_field: shape mismatch in " + path);
  PheromoneConfig cfg;
  cfg.tau_min = header.at("tau_min").get<float>();
  cfg.tau_max = header.at("tau_max").get<float>();
  cfg.rho = header.at("rho").get<float>();
  cfg.delta = header.at("delta").get<float>();
  cfg.update_topk = header.at("update_topk").get<int>();
  if (experiment_id) *experiment_id = header.value("experiment_id", "");

  PheromoneField f(rows, cols, cfg);
  const size_t nbytes = f.values().size() * sizeof(float);
  in.read(reinterpret_cast<char*>(f.values().data()), static_cast<std::streamsize>(nbytes));
  if (!in || in.gcount() != static_cast<std::streamsize>(nbytes))
    throw std::runtime_error("load_field: truncated payload in " + path);
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const unsigned char*>(f.values().data()), static_cast<uInt>(nbytes)));
  if (crc != header.at("crc32").get<uint32_t>())
    throw std::runtime_error("load_field: checksum mismatch in " + path);
  return f;
}

}  // namespace dppn
