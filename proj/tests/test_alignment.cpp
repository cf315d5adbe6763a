// Slot alignment and field surgery: the exact assignment solver against
// exhaustive search, relabeling recovery, permutation transport of fields,
// minimum distillation (with the relabeling collapse it exists to prevent),
// SVD rank reduction, and the field correlation statistic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dppn/alignment.hpp"
#include "dppn/model.hpp"
#include "dppn/pheromone.hpp"
#include "dppn/rng.hpp"

using namespace dppn;
namespace fs = std::filesystem;

namespace {

PheromoneField warm_field(int rows, int cols, uint64_t seed) {
  PheromoneField f(rows, cols);
  RngStream r(seed);
  for (auto& t : f.values()) t = 0.1f + 1.9f * r.next_float();
  return f;
}

std::vector<int> inverse_perm(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (size_t i = 0; i < p.size(); ++i) inv[static_cast<size_t>(p[i])] = static_cast<int>(i);
  return inv;
}

double assignment_total(const std::vector<double>& score, const std::vector<int>& row_of_col, int n) {
  double total = 0.0;
  for (int j = 0; j < n; ++j) total += score[static_cast<size_t>(row_of_col[static_cast<size_t>(j)]) * n + j];
  return total;
}

// Exhaustive maximum over all n! pairings; the ground truth the solver must hit.
double assignment_brute_force(const std::vector<double>& score, int n) {
  std::vector<int> rows(static_cast<size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  double best = -std::numeric_limits<double>::infinity();
  do {
    best = std::max(best, assignment_total(score, rows, n));
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

// Pick the largest remaining cell, cross out its row and column, repeat.
double assignment_greedy(std::vector<double> score, int n) {
  constexpr double kGone = -std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (int step = 0; step < n; ++step) {
    int bi = -1, bj = -1;
    double bv = kGone;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (score[static_cast<size_t>(i) * n + j] > bv) {
          bv = score[static_cast<size_t>(i) * n + j];
          bi = i;
          bj = j;
        }
    total += bv;
    for (int k = 0; k < n; ++k) {
      score[static_cast<size_t>(bi) * n + k] = kGone;
      score[static_cast<size_t>(k) * n + bj] = kGone;
    }
  }
  return total;
}

ModelConfig tiny_fourier() {
  ModelConfig c;
  c.variant = Variant::dppn_fourier_pos;
  c.d = 8;
  c.heads = 2;
  c.layers = 1;
  c.m = 4;
  c.topk_mask = 3;
  c.window = 4;
  c.vocab = 6;
  c.seq_len = 8;
  c.dropout = 0.0f;
  return c;
}

Dataset make_probe(int n, const ModelConfig& c, uint64_t seed) {
  Dataset d;
  d.n = n;
  d.seq_len = c.seq_len;
  d.vocab = c.vocab;
  RngStream r(seed);
  d.tokens.resize(static_cast<size_t>(n) * c.seq_len);
  for (auto& t : d.tokens) t = static_cast<uint8_t>(1 + r.uniform_int(c.vocab));
  d.labels.assign(static_cast<size_t>(n), 0);
  return d;
}

fs::path tmp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "dppn_align_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Exact assignment solver.

TEST(Hungarian, MatchesExhaustiveSearchOnSmallMatrices) {
  const int n = 6;
  for (uint64_t seed : {21u, 22u, 23u}) {
    RngStream r(seed);
    std::vector<double> score(static_cast<size_t>(n) * n);
    for (auto& s : score) s = -5.0 + 10.0 * r.next_float();
    std::vector<int> perm = hungarian_max(score, n);
    std::vector<int> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < n; ++i) ASSERT_EQ(sorted[static_cast<size_t>(i)], i);
    EXPECT_NEAR(assignment_total(score, perm, n), assignment_brute_force(score, n), 1e-9);
  }
  // Coarse grid forces ties; any argmax pairing is acceptable but the total
  // must still be the exhaustive maximum.
  RngStream r(24);
  std::vector<double> score(static_cast<size_t>(n) * n);
  for (auto& s : score) s = static_cast<double>(r.uniform_int(5));
  std::vector<int> perm = hungarian_max(score, n);
  EXPECT_NEAR(assignment_total(score, perm, n), assignment_brute_force(score, n), 1e-9);
}

TEST(Hungarian, PicksTheObviousDiagonal) {
  const int n = 5;
  RngStream r(7);
  std::vector<double> score(static_cast<size_t>(n) * n);
  for (auto& s : score) s = r.next_float();  // off-diagonal clutter below 1
  for (int i = 0; i < n; ++i) score[static_cast<size_t>(i) * n + i] = 10.0;
  std::vector<int> perm = hungarian_max(score, n);
  for (int j = 0; j < n; ++j) EXPECT_EQ(perm[static_cast<size_t>(j)], j);
}

TEST(Hungarian, BeatsGreedyWhereGreedyTraps) {
  // Taking the single largest cell first forfeits both 9s.
  const std::vector<double> score = {10.0, 9.0,  //
                                     9.0, 1.0};
  EXPECT_DOUBLE_EQ(assignment_greedy(score, 2), 11.0);
  std::vector<int> perm = hungarian_max(score, 2);
  EXPECT_DOUBLE_EQ(assignment_total(score, perm, 2), 18.0);

  // And never loses to greedy on anything.
  for (uint64_t seed : {31u, 32u, 33u, 34u}) {
    RngStream r(seed);
    std::vector<double> s(36);
    for (auto& x : s) x = 10.0 * r.next_float();
    std::vector<int> p = hungarian_max(s, 6);
    EXPECT_GE(assignment_total(s, p, 6), assignment_greedy(s, 6) - 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Profile alignment.

TEST(Alignment, RecoversAKnownRelabeling) {
  // Model B agrees with model A slot for slot, except its slots are renamed
  // by sigma. The matcher must undo the renaming with a perfect score.
  const int m = 4;
  const std::vector<int> sigma = {1, 2, 3, 0};
  AssignmentProfile a, b;
  a.m = b.m = m;
  RngStream r(5);
  for (int i = 0; i < 200; ++i) {
    const int slot = r.uniform_int(m);
    a.slots.push_back(slot);
    b.slots.push_back(sigma[static_cast<size_t>(slot)]);
  }
  AlignmentResult res = align_profiles(a, b);
  EXPECT_FLOAT_EQ(res.correlation_score, 1.0f);
  EXPECT_FLOAT_EQ(res.chance, 0.25f);
  // perm[j] is the A slot paired with B slot j, so perm composed with sigma
  // is the identity.
  for (int s = 0; s < m; ++s) EXPECT_EQ(res.perm[static_cast<size_t>(sigma[static_cast<size_t>(s)])], s);
}

TEST(Alignment, SharedTablesAlignPerfectlyAcrossInitSeeds) {
  // Two position-table models built from different weight seeds share their
  // grouping tables, so their hard assignments are identical and alignment
  // is exact with an identity pairing on every used slot.
  ModelConfig cfg = tiny_fourier();
  Model ma(cfg, 3), mb(cfg, 4);
  Dataset probe = make_probe(12, cfg, 9);
  AssignmentProfile pa = collect_profile(ma, probe);
  AssignmentProfile pb = collect_profile(mb, probe);
  ASSERT_EQ(pa.slots.size(), static_cast<size_t>(probe.n) * probe.seq_len);
  EXPECT_EQ(pa.slots, pb.slots);

  AlignmentResult res = align_profiles(pa, pb);
  EXPECT_FLOAT_EQ(res.correlation_score, 1.0f);
  // Identity everywhere, unused slots included: equal-score pairings resolve
  // toward the diagonal by construction.
  for (int j = 0; j < cfg.m; ++j) EXPECT_EQ(res.perm[static_cast<size_t>(j)], j);
}

TEST(Alignment, UnrelatedProfilesScoreAtChance) {
  // Every (A slot, B slot) combination equally often: no pairing explains
  // more than 1/m of the mass.
  const int m = 8;
  AssignmentProfile a, b;
  a.m = b.m = m;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      a.slots.push_back(i);
      b.slots.push_back(j);
    }
  AlignmentResult res = align_profiles(a, b);
  EXPECT_FLOAT_EQ(res.correlation_score, res.chance);
}

TEST(Alignment, RejectsMismatchedProfiles) {
  AssignmentProfile a, b;
  a.m = 4;
  b.m = 8;
  a.slots = {0, 1};
  b.slots = {0, 1};
  EXPECT_THROW(align_profiles(a, b), std::invalid_argument);
  b.m = 4;
  b.slots = {0, 1, 2};
  EXPECT_THROW(align_profiles(a, b), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Field transport.

TEST(AlignField, MovesEntriesWithTheRelabeling) {
  const int m = 8;
  PheromoneField f(m, m);
  f.at(2, 3) = 1.8f;
  f.at(7, 1) = 0.4f;
  std::vector<int> perm = {3, 0, 6, 2, 7, 1, 5, 4};
  PheromoneField g = align_field(f, perm);
  EXPECT_FLOAT_EQ(g.at(perm[2], perm[3]), 1.8f);
  EXPECT_FLOAT_EQ(g.at(perm[7], perm[1]), 0.4f);

  // Relabeling permutes entries, so every multiset statistic is unchanged.
  std::vector<float> sf = f.values(), sg = g.values();
  std::sort(sf.begin(), sf.end());
  std::sort(sg.begin(), sg.end());
  EXPECT_EQ(sf, sg);
  EXPECT_FLOAT_EQ(f.entropy(), g.entropy());
  FieldStats a = f.stats(), b = g.stats();
  EXPECT_FLOAT_EQ(a.mean, b.mean);
  EXPECT_FLOAT_EQ(a.stddev, b.stddev);
  EXPECT_EQ(a.high_count, b.high_count);
}

TEST(AlignField, InverseUndoesTheMap) {
  PheromoneField f = warm_field(16, 16, 51);
  std::vector<int> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream r(52);
  r.shuffle(perm);
  PheromoneField back = align_field(align_field(f, perm), inverse_perm(perm));
  EXPECT_EQ(back.values(), f.values());
}

TEST(AlignField, RejectsMalformedPermutations) {
  PheromoneField f(4, 4);
  EXPECT_THROW(align_field(f, {0, 1, 2}), std::invalid_argument);        // wrong size
  EXPECT_THROW(align_field(f, {0, 1, 2, 2}), std::invalid_argument);     // duplicate
  EXPECT_THROW(align_field(f, {0, 1, 2, 4}), std::invalid_argument);     // out of range
  EXPECT_THROW(align_field(f, {0, 1, 2, -1}), std::invalid_argument);    // negative
  PheromoneField rect(4, 8);
  EXPECT_THROW(align_field(rect, {0, 1, 2, 3}), std::invalid_argument);  // not square
}

// ---------------------------------------------------------------------------
// Distillation.

TEST(Distill, KeepsOnlyJointlyReinforcedCells) {
  const int m = 8;
  PheromoneField f1(m, m), f2(m, m);
  f1.at(2, 3) = 1.8f;
  f2.at(2, 3) = 0.3f;   // both touched this cell; the weaker view wins
  f1.at(5, 5) = 1.9f;   // only one source reinforced it

  PheromoneField d = distill_min(f1, f2);
  EXPECT_FLOAT_EQ(d.at(2, 3), 0.3f);
  EXPECT_FLOAT_EQ(d.at(5, 5), 1.05f);

  PheromoneField a = warm_field(m, m, 61), b = warm_field(m, m, 62);
  PheromoneField ab = distill_min(a, b), ba = distill_min(b, a);
  EXPECT_EQ(ab.values(), ba.values());
  EXPECT_EQ(distill_min(a, a).values(), a.values());
  for (size_t i = 0; i < ab.values().size(); ++i) {
    EXPECT_LE(ab.values()[i], a.values()[i]);
    EXPECT_LE(ab.values()[i], b.values()[i]);
  }
}

TEST(Distill, AlignmentRescuesRelabeledStructure) {
  // Two runs that discovered the same trails under different slot labels:
  // distilling raw coordinates erases everything, distilling after undoing
  // the relabeling keeps every shared trail intact.
  const int m = 8;
  PheromoneField f1(m, m);
  f1.at(2, 3) = 1.9f;
  f1.at(7, 1) = 1.6f;
  std::vector<int> sigma(m);
  for (int i = 0; i < m; ++i) sigma[static_cast<size_t>(i)] = (i + 1) % m;
  PheromoneField f2 = align_field(f1, sigma);

  PheromoneField naive = distill_min(f1, f2);
  EXPECT_FLOAT_EQ(*std::max_element(naive.values().begin(), naive.values().end()), 1.05f);

  PheromoneField rescued = distill_min(f1, align_field(f2, inverse_perm(sigma)));
  EXPECT_EQ(rescued.values(), f1.values());
}

TEST(Distill, RejectsIncompatibleFields) {
  PheromoneField a(4, 4), b(4, 8);
  EXPECT_THROW(distill_min(a, b), std::invalid_argument);
  PheromoneConfig wide;
  wide.tau_max = 5.0f;
  PheromoneField c(4, 4, wide);
  EXPECT_THROW(distill_min(a, c), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Rank reduction.

TEST(RankReduce, FullRankReproducesTheField) {
  PheromoneField f = warm_field(16, 16, 71);
  PheromoneField g = rank_reduce(f, 16);
  for (size_t i = 0; i < f.values().size(); ++i)
    EXPECT_NEAR(g.values()[i], f.values()[i], 1e-4f);
}

TEST(RankReduce, RankOneFieldSurvivesRankOneCut) {
  const int m = 16;
  PheromoneField f(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      f.at(i, j) = (0.5f + 0.05f * static_cast<float>(i)) * (0.3f + 0.08f * static_cast<float>(j));
  PheromoneField g = rank_reduce(f, 1);
  for (size_t i = 0; i < f.values().size(); ++i)
    EXPECT_NEAR(g.values()[i], f.values()[i], 1e-5f);
}

TEST(RankReduce, ErrorShrinksAsRankGrows) {
  PheromoneField f = warm_field(16, 16, 77);
  f.at(3, 12) = 1.95f;
  f.at(9, 2) = 1.9f;
  auto frob_err = [&](int rank) {
    PheromoneField g = rank_reduce(f, rank);
    double e = 0.0;
    for (size_t i = 0; i < f.values().size(); ++i) {
      const double d = static_cast<double>(g.values()[i]) - f.values()[i];
      e += d * d;
    }
    return std::sqrt(e);
  };
  double prev = std::numeric_limits<double>::infinity();
  for (int rank : {1, 2, 4, 8, 16}) {
    const double e = frob_err(rank);
    EXPECT_LE(e, prev + 1e-6);
    prev = e;
  }
  EXPECT_LT(prev, 1e-3);
  EXPECT_GT(frob_err(1), 0.1);  // the cut actually bites at low rank
}

TEST(RankReduce, StaysInsidePheromoneBounds) {
  PheromoneField f = warm_field(16, 16, 79);
  for (int rank : {1, 4}) {
    PheromoneField g = rank_reduce(f, rank);
    for (float v : g.values()) {
      EXPECT_GE(v, f.config().tau_min);
      EXPECT_LE(v, f.config().tau_max);
    }
  }
}

TEST(RankReduce, RejectsOutOfRangeRank) {
  PheromoneField f(8, 8);
  EXPECT_THROW(rank_reduce(f, 0), std::invalid_argument);
  EXPECT_THROW(rank_reduce(f, 9), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Field correlation.

TEST(Pearson, AnchorsAtSelfReflectionAndIndependence) {
  PheromoneField f = warm_field(32, 32, 81);
  auto self = field_pearson(f, f);
  ASSERT_TRUE(self.has_value());
  EXPECT_NEAR(*self, 1.0f, 1e-6f);

  PheromoneField mirror(32, 32);
  for (size_t i = 0; i < f.values().size(); ++i)
    mirror.values()[i] = f.config().tau_min + f.config().tau_max - f.values()[i];
  auto anti = field_pearson(f, mirror);
  ASSERT_TRUE(anti.has_value());
  EXPECT_NEAR(*anti, -1.0f, 1e-6f);

  // Independent fields: |r| within three null standard errors of zero.
  PheromoneField g = warm_field(32, 32, 82);
  auto r = field_pearson(f, g);
  ASSERT_TRUE(r.has_value());
  EXPECT_LT(std::fabs(*r), 3.0f / std::sqrt(1022.0f));
}

TEST(Pearson, UndefinedForConstantFields) {
  PheromoneField cold(8, 8);  // uniform midpoint, zero variance
  PheromoneField warm = warm_field(8, 8, 83);
  EXPECT_FALSE(field_pearson(cold, warm).has_value());
  EXPECT_FALSE(field_pearson(warm, cold).has_value());
  EXPECT_FALSE(field_pearson(cold, cold).has_value());
  PheromoneField other(8, 4);
  EXPECT_THROW(field_pearson(warm, other), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Profile persistence and collection.

TEST(Profile, RoundTripsThroughDisk) {
  AssignmentProfile prof;
  prof.m = 4;
  RngStream r(91);
  for (int i = 0; i < 64; ++i) prof.slots.push_back(r.uniform_int(4));
  fs::path p = tmp_file("roundtrip.json");
  save_profile(p.string(), prof);
  AssignmentProfile back = load_profile(p.string());
  EXPECT_EQ(back.m, prof.m);
  EXPECT_EQ(back.slots, prof.slots);
}

TEST(Profile, LoadRejectsGarbageAndBadSlots) {
  fs::path junk = tmp_file("junk.json");
  std::ofstream(junk) << "this is not a profile";
  EXPECT_THROW(load_profile(junk.string()), std::runtime_error);

  fs::path bad = tmp_file("bad_slot.json");
  std::ofstream(bad) << R"({"format":"dppn-profile-1","m":2,"slots":[0,1,2]})";
  EXPECT_THROW(load_profile(bad.string()), std::runtime_error);

  EXPECT_THROW(load_profile(tmp_file("absent.json").string()), std::runtime_error);
}

TEST(Profile, CollectionIsBatchSizeInvariant) {
  ModelConfig cfg = tiny_fourier();
  Model model(cfg, 11);
  Dataset probe = make_probe(10, cfg, 13);
  // Chunks of 4 leave a remainder batch of 2; the profile must not care.
  AssignmentProfile small = collect_profile(model, probe, 4);
  AssignmentProfile big = collect_profile(model, probe, 64);
  EXPECT_EQ(small.slots, big.slots);
  ASSERT_EQ(small.slots.size(), static_cast<size_t>(probe.n) * probe.seq_len);
  for (int s : small.slots) {
    EXPECT_GE(s, 0);
    EXPECT_LT(s, cfg.m);
  }
}
