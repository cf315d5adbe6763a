#pragma once
// Cross-run field analysis: slot alignment between two trained models via
// exact linear assignment over co-assignment counts, field permutation,
// element-wise-minimum distillation, SVD rank reduction, and field-level
// correlation statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <lapacke.h>
#include <nlohmann/json.hpp>

#include "dppn/model.hpp"
#include "dppn/pheromone.hpp"
#include "dppn/taskgen.hpp"

namespace dppn {

// Per-token hard slot choices of one model over a probe set; the common
// probe makes two models' profiles comparable row by row.
struct AssignmentProfile {
  int m = 0;
  std::vector<int> slots;
};

struct AlignmentResult {
  std::vector<int> perm;  // perm[b] = slot of model A matched to slot b of model B
  float correlation_score = 0.0f;
  float chance = 0.0f;
};

inline AssignmentProfile collect_profile(Model& model, const Dataset& probe, int batch_size = 64) {
  AssignmentProfile prof;
  prof.m = model.config().m;
  const int N = probe.seq_len;
  for (int start = 0; start < probe.n; start += batch_size) {
    const int B = std::min(batch_size, probe.n - start);
    Batch batch;
    batch.B = B;
    batch.N = N;
    batch.tokens.resize(static_cast<size_t>(B) * N);
    batch.labels.assign(static_cast<size_t>(B), 0);
    for (int64_t i = 0; i < static_cast<int64_t>(B) * N; ++i)
      batch.tokens[static_cast<size_t>(i)] = probe.tokens[static_cast<size_t>(start) * N + i];
    std::vector<int> rows = model.hard_assignments(batch);
    prof.slots.insert(prof.slots.end(), rows.begin(), rows.end());
  }
  return prof;
}

// Co-assignment count matrix: C(i, j) = number of probe tokens model A put
// in slot i and model B put in slot j.
inline std::vector<double> cross_correlation(const AssignmentProfile& a, const AssignmentProfile& b) {
  if (a.m != b.m) throw std::invalid_argument("cross_correlation: slot count mismatch");
  if (a.slots.size() != b.slots.size())
    throw std::invalid_argument("cross_correlation: probe size mismatch");
  const int m = a.m;
  std::vector<double> C(static_cast<size_t>(m) * m, 0.0);
  for (size_t r = 0; r < a.slots.size(); ++r)
    C[static_cast<size_t>(a.slots[r]) * m + b.slots[r]] += 1.0;
  return C;
}

// Exact maximum-score assignment (shortest augmenting path form of
// Kuhn-Munkres, O(n^3)). Returns row_of_col: column j pairs with row
// row_of_col[j], maximizing the sum of score[row][col] over pairs.
inline std::vector<int> hungarian_max(const std::vector<double>& score, int n) {
  if (static_cast<int>(score.size()) != n * n)
    throw std::invalid_argument("hungarian_max: matrix not square");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur =
            -score[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_of_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j) row_of_col[static_cast<size_t>(j - 1)] = p[static_cast<size_t>(j)] - 1;
  return row_of_col;
}

// Fraction of probe mass the best slot matching explains. 1/m for unrelated
// coordinate systems, 1.0 for identical ones.
inline AlignmentResult align_profiles(const AssignmentProfile& a, const AssignmentProfile& b) {
  const std::vector<double> C = cross_correlation(a, b);
  const int m = a.m;
  AlignmentResult res;
  // Equal-score pairings (e.g. slots neither model ever used) resolve toward
  // the identity, so identical profiles align as the identity map everywhere.
  // The margin sits far below any real count difference (counts are integers).
  std::vector<double> tie = C;
  for (int i = 0; i < m; ++i) tie[static_cast<size_t>(i) * m + i] += 1e-9;
  res.perm = hungarian_max(tie, m);
  double total = 0.0, matched = 0.0;
  for (double c : C) total += c;
  for (int j = 0; j < m; ++j) matched += C[static_cast<size_t>(res.perm[static_cast<size_t>(j)]) * m + j];
  res.correlation_score = total > 0.0 ? static_cast<float>(matched / total) : 0.0f;
  res.chance = 1.0f / static_cast<float>(m);
  return res;
}

// Re-express a field in the partner's coordinates: entry (a, b) moves to
// (perm[a], perm[b]).
inline PheromoneField align_field(const PheromoneField& f, const std::vector<int>& perm) {
  if (f.rows() != f.cols()) throw std::invalid_argument("align_field: field not square");
  const int m = f.rows();
  if (static_cast<int>(perm.size()) != m) throw std::invalid_argument("align_field: permutation size mismatch");
  std::vector<char> seen(static_cast<size_t>(m), 0);
  for (int x : perm) {
    if (x < 0 || x >= m || seen[static_cast<size_t>(x)])
      throw std::invalid_argument("align_field: not a permutation");
    seen[static_cast<size_t>(x)] = 1;
  }
  PheromoneField out(m, m, f.config());
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      out.values()[static_cast<size_t>(perm[static_cast<size_t>(a)]) * m + perm[static_cast<size_t>(b)]] =
          f.values()[static_cast<size_t>(a) * m + b];
  return out;
}

// Keep only what both sources reinforce.
inline PheromoneField distill_min(const PheromoneField& f1, const PheromoneField& f2) {
  if (f1.rows() != f2.rows() || f1.cols() != f2.cols())
    throw std::invalid_argument("distill_min: shape mismatch");
  if (f1.config().tau_min != f2.config().tau_min || f1.config().tau_max != f2.config().tau_max)
    throw std::invalid_argument("distill_min: bound mismatch");
  PheromoneField out(f1.rows(), f1.cols(), f1.config());
  for (size_t i = 0; i < out.values().size(); ++i)
    out.values()[i] = std::min(f1.values()[i], f2.values()[i]);
  return out;
}

// Truncated-SVD compression of the field, clamped back into pheromone bounds.
inline PheromoneField rank_reduce(const PheromoneField& f, int rank = 4) {
  const int r = f.rows(), c = f.cols();
  const int mn = std::min(r, c);
  if (rank < 1 || rank > mn) throw std::invalid_argument("rank_reduce: rank out of range");
  std::vector<float> a(f.values());
  std::vector<float> s(static_cast<size_t>(mn));
  std::vector<float> u(static_cast<size_t>(r) * mn);
  std::vector<float> vt(static_cast<size_t>(mn) * c);
  std::vector<float> superb(static_cast<size_t>(mn));
  const int info = LAPACKE_sgesvd(LAPACK_ROW_MAJOR, 'S', 'S', r, c, a.data(), c, s.data(), u.data(),
                                  mn, vt.data(), c, superb.data());
  if (info != 0) throw std::runtime_error("rank_reduce: SVD failed to converge");
  PheromoneField out(r, c, f.config());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int k = 0; k < rank; ++k)
        acc += static_cast<double>(s[static_cast<size_t>(k)]) * u[static_cast<size_t>(i) * mn + k] *
               vt[static_cast<size_t>(k) * c + j];
      out.values()[static_cast<size_t>(i) * c + j] = std::min(
          f.config().tau_max, std::max(f.config().tau_min, static_cast<float>(acc)));
    }
  return out;
}

// Pearson correlation over flattened entries; absent when either field is
// constant (the statistic is undefined there).
inline std::optional<float> field_pearson(const PheromoneField& f1, const PheromoneField& f2) {
  if (f1.rows() != f2.rows() || f1.cols() != f2.cols())
    throw std::invalid_argument("field_pearson: shape mismatch");
  const size_t n = f1.values().size();
  double m1 = 0.0, m2 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    m1 += f1.values()[i];
    m2 += f2.values()[i];
  }
  m1 /= static_cast<double>(n);
  m2 /= static_cast<double>(n);
  double s11 = 0.0, s22 = 0.0, s12 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d1 = f1.values()[i] - m1, d2 = f2.values()[i] - m2;
    s11 += d1 * d1;
    s22 += d2 * d2;
    s12 += d1 * d2;
  }
  if (s11 <= 0.0 || s22 <= 0.0) return std::nullopt;
  return static_cast<float>(s12 / std::sqrt(s11 * s22));
}

inline void save_profile(const std::string& path, const AssignmentProfile& prof) {
  nlohmann::json j;
  j["format"] = "dppn-profile-1";
  j["m"] = prof.m;
  j["slots"] = prof.slots;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("save_profile: cannot open " + path);
  f << j.dump();
}

inline AssignmentProfile load_profile(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_profile: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded() || j.value("format", "") != "dppn-profile-1")
    throw std::runtime_error("load_profile: not a profile file: " + path);
  AssignmentProfile prof;
  prof.m = j.at("m").get<int>();
  prof.slots = j.at("slots").get<std::vector<int>>();
  for (int s : prof.slots)
    if (s < 0 || s >= prof.m) throw std::runtime_error("load_profile: slot index out of range");
  return prof;
}

}  // namespace dppn
