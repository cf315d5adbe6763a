#pragma once
// Learning-curve metrics and the small aggregation helpers the report and
// acceptance layers share. AULC is the speed-of-learning summary: the mean
// of per-epoch validation accuracy, i.e. the discrete area under the curve.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace dppn {

inline float aulc(const std::vector<float>& curve) {
  if (curve.empty()) throw std::invalid_argument("aulc: empty curve");
  double s = 0.0;
  for (float a : curve) s += a;
  return static_cast<float>(s / static_cast<double>(curve.size()));
}

// First epoch (1-based) whose validation accuracy reaches the threshold;
// absent when the curve never gets there.
inline std::optional<int> epochs_to(const std::vector<float>& curve, float threshold = 0.70f) {
  for (size_t t = 0; t < curve.size(); ++t)
    if (curve[t] >= threshold) return static_cast<int>(t) + 1;
  return std::nullopt;
}

struct MeanStd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for n < 2
  int n = 0;
};

template <typename T>
inline MeanStd mean_std(const std::vector<T>& xs) {
  MeanStd r;
  r.n = static_cast<int>(xs.size());
  if (r.n == 0) return r;
  double s = 0.0;
  for (T x : xs) s += static_cast<double>(x);
  r.mean = s / r.n;
  if (r.n < 2) return r;
  double ss = 0.0;
  for (T x : xs) ss += (static_cast<double>(x) - r.mean) * (static_cast<double>(x) - r.mean);
  r.sd = std::sqrt(ss / (r.n - 1));
  return r;
}

}  // namespace dppn
