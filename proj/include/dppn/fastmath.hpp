#pragma once
// Branch-free polynomial exp/log used in the softmax and noise hot paths.
// Both are pure float arithmetic, so results are bit-stable across runs.
// Accuracy: ~3e-7 relative on the ranges the model produces; verified against
// the libm references in tests.

#include <cmath>
#include <cstdint>
#include <cstring>

namespace dppn {

// expf replacement. Valid for |x| <= 87; inputs are clamped to that range,
// which maps to the representable float span.
inline float fast_exp(float x) {
  x = x < -87.0f ? -87.0f : (x > 87.0f ? 87.0f : x);
  // exp(x) = 2^k * e^g with k = round(x/ln2). Two-part Cody-Waite reduction
  // keeps g accurate at large |x| where a single multiply would lose bits.
  float k = std::nearbyintf(x * 1.442695040888963f);
  float g = x - k * 0.693359375f;        // ln2 high part, exact in float
  g -= k * -2.12194440e-4f;              // ln2 low part
  // e^g for g in [-0.347, 0.347], minimax coefficients.
  float z = 1.9875691500e-4f;
  z = z * g + 1.3981999507e-3f;
  z = z * g + 8.3334519073e-3f;
  z = z * g + 4.1665795894e-2f;
  z = z * g + 1.6666665459e-1f;
  z = z * g + 5.0000001201e-1f;
  float p = z * g * g + g + 1.0f;
  // Scale by 2^k through the exponent field.
  int32_t ki = static_cast<int32_t>(k);
  int32_t bits = (ki + 127) << 23;
  float s;
  std::memcpy(&s, &bits, sizeof(s));
  return p * s;
}

// logf replacement for strictly positive finite x. x <= 0 returns -inf.
inline float fast_log(float x) {
  if (x <= 0.0f) return -std::numeric_limits<float>::infinity();
  int32_t bits;
  std::memcpy(&bits, &x, sizeof(bits));
  int32_t e = ((bits >> 23) & 0xFF) - 127;
  bits = (bits & 0x007FFFFF) | 0x3F800000;  // mantissa m in [1, 2)
  float m;
  std::memcpy(&m, &bits, sizeof(m));
  if (m > 1.4142135f) {  // renormalize to [sqrt(1/2), sqrt(2))
    m *= 0.5f;
    e += 1;
  }
  float f = m - 1.0f;
  // atanh-form series: log(1+f) = 2 atanh(f / (2 + f)).
  float z = f / (2.0f + f);
  float z2 = z * z;
  float p = 2.0f * z * (1.0f + z2 * (0.33333333333f + z2 * (0.2f + z2 * (0.142857143f + z2 * 0.11111111f))));
  return p + static_cast<float>(e) * 0.6931471805599453f;
}

// In-place softmax over one row. Entries equal to -inf get weight exactly 0;
// if every entry is -inf the row becomes uniform (degenerate-input contract).
inline void softmax_row(float* x, int n) {
  float mx = -std::numeric_limits<float>::infinity();
  for (int i = 0; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  if (!(mx > -std::numeric_limits<float>::infinity())) {
    for (int i = 0; i < n; ++i) x[i] = 1.0f / static_cast<float>(n);
    return;
  }
  float sum = 0.0f;
  for (int i = 0; i < n; ++i) {
    float v = x[i] == -std::numeric_limits<float>::infinity() ? 0.0f : fast_exp(x[i] - mx);
    x[i] = v;
    sum += v;
  }
  float inv = 1.0f / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

}  // namespace dppn
