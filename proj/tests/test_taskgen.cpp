// Task generator contracts: family similarity, surface bijections, label
// balance, determinism, and the bag-of-tokens probe that separates surface
// from structure.

#include <array>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "dppn/rng.hpp"
#include "dppn/taskgen.hpp"

using namespace dppn;
namespace fs = std::filesystem;

namespace {

constexpr uint64_t kStreamSeed = 905;

// Plain logistic regression on per-token count features.
struct BagProbe {
  std::array<float, 33> w{};
  float b = 0.0f;

  static std::array<float, 33> counts(const Dataset& d, int i) {
    std::array<float, 33> c{};
    for (int j = 0; j < d.seq_len; ++j) c[d.tokens[static_cast<size_t>(i) * d.seq_len + j]] += 1.0f;
    return c;
  }

  // Full-batch descent; the first ~1k epochs sit in a flat region where the
  // random-labeled three-motif half fights the separable two-motif half, so
  // the budget is deliberately generous.
  void train(const Dataset& d, int epochs = 3000, float lr = 0.1f) {
    for (int e = 0; e < epochs; ++e) {
      std::array<float, 33> gw{};
      float gb = 0.0f;
      for (int i = 0; i < d.n; ++i) {
        auto c = counts(d, i);
        float z = b;
        for (int t = 1; t <= 32; ++t) z += w[static_cast<size_t>(t)] * c[static_cast<size_t>(t)];
        const float p = 1.0f / (1.0f + std::exp(-z));
        const float err = p - static_cast<float>(d.labels[static_cast<size_t>(i)]);
        for (int t = 1; t <= 32; ++t) gw[static_cast<size_t>(t)] += err * c[static_cast<size_t>(t)];
        gb += err;
      }
      for (int t = 1; t <= 32; ++t) w[static_cast<size_t>(t)] -= lr * gw[static_cast<size_t>(t)] / static_cast<float>(d.n);
      b -= lr * gb / static_cast<float>(d.n);
    }
  }

  float accuracy(const Dataset& d) const {
    int hit = 0;
    for (int i = 0; i < d.n; ++i) {
      auto c = counts(d, i);
      float z = b;
      for (int t = 1; t <= 32; ++t) z += w[static_cast<size_t>(t)] * c[static_cast<size_t>(t)];
      hit += (z > 0.0f ? 1 : 0) == d.labels[static_cast<size_t>(i)] ? 1 : 0;
    }
    return static_cast<float>(hit) / static_cast<float>(d.n);
  }
};

}  // namespace

TEST(Families, JaccardSameFamilyIsOne) {
  EXPECT_FLOAT_EQ(structural_jaccard(make_family('A'), make_family('A')), 1.0f);
  auto ts = build_task_stream(kStreamSeed);
  EXPECT_FLOAT_EQ(structural_jaccard(ts.A1.family, ts.A2.family), 1.0f);
}

TEST(Families, JaccardAcrossFamiliesIsZero) {
  MotifFamily a = make_family('A'), b = make_family('B'), c = make_family('C');
  EXPECT_FLOAT_EQ(structural_jaccard(a, b), 0.0f);
  EXPECT_FLOAT_EQ(structural_jaccard(a, c), 0.0f);
  EXPECT_FLOAT_EQ(structural_jaccard(b, c), 0.0f);
}

TEST(Families, JaccardPartialOverlapOracle) {
  // {m1, m2} vs {m2, m3}: one shared structure out of three distinct.
  Motif m1{{0, 1, 2}, 2, 5};
  Motif m2{{2, 3, 4}, 5, 3};
  Motif m3{{4, 5, 0}, 3, 6};
  MotifFamily f1, f2;
  f1.motifs = {m1, m2};
  f2.motifs = {m2, m3};
  EXPECT_NEAR(structural_jaccard(f1, f2), 1.0f / 3.0f, 1e-6f);
}

TEST(Surfaces, BijectiveAndPairwiseDeranged) {
  auto ts = build_task_stream(kStreamSeed);
  const std::vector<const TaskSpec*> a_tasks = {&ts.A1, &ts.A1p, &ts.A2, &ts.A3};
  for (const auto* t : a_tasks) {
    std::set<int> seen(t->surface.token_of_role.begin(), t->surface.token_of_role.end());
    EXPECT_EQ(seen.size(), 32u);
    EXPECT_EQ(*seen.begin(), 1);
    EXPECT_EQ(*seen.rbegin(), 32);
  }
  for (size_t i = 0; i < a_tasks.size(); ++i)
    for (size_t j = i + 1; j < a_tasks.size(); ++j)
      for (int role = 0; role < 32; ++role)
        ASSERT_NE(a_tasks[i]->surface.token_of_role[static_cast<size_t>(role)],
                  a_tasks[j]->surface.token_of_role[static_cast<size_t>(role)])
            << "surfaces " << i << "/" << j << " share role " << role;
}

TEST(Generate, DeterministicAndSized) {
  auto ts = build_task_stream(kStreamSeed);
  auto [train1, val1] = generate(ts.A1);
  auto [train2, val2] = generate(ts.A1);
  EXPECT_EQ(train1.tokens, train2.tokens);
  EXPECT_EQ(train1.labels, train2.labels);
  EXPECT_EQ(val1.tokens, val2.tokens);
  EXPECT_EQ(train1.n, 2000);
  EXPECT_EQ(val1.n, 500);
  EXPECT_EQ(train1.seq_len, 128);
}

TEST(Generate, TokensInRangeAndMotifCounts) {
  auto ts = build_task_stream(kStreamSeed);
  auto [train, val] = generate(ts.B1);
  for (uint8_t t : train.tokens) {
    ASSERT_GE(t, 1);
    ASSERT_LE(t, 32);
  }
  for (const auto& pos : train.motif_positions) {
    ASSERT_TRUE(pos.size() == 6 || pos.size() == 9);
    for (int p : pos) {
      ASSERT_GE(p, ts.B1.family.window_lo);
      ASSERT_LT(p, ts.B1.family.window_hi);
    }
  }
  (void)val;
}

TEST(Generate, LabelBalanceAndMajorityCeiling) {
  auto ts = build_task_stream(kStreamSeed);
  for (const auto* t : {&ts.A1, &ts.A2, &ts.C1}) {
    auto [train, val] = generate(*t);
    auto frac = [](const Dataset& d) {
      int ones = 0;
      for (auto l : d.labels) ones += l;
      return static_cast<float>(ones) / static_cast<float>(d.n);
    };
    EXPECT_GE(frac(train), 0.45f);
    EXPECT_LE(frac(train), 0.55f);
    const float v = frac(val);
    EXPECT_LE(std::max(v, 1.0f - v), 0.55f) << t->name;  // majority predictor ceiling
  }
}

TEST(Generate, ZeroNoiseLeavesMotifTokensStructural) {
  auto ts = build_task_stream(kStreamSeed);
  TaskSpec clean = ts.A1;
  clean.noise_level = 0.0f;
  Dataset d = generate_split(clean, 200, "train");
  std::set<int> structural;
  for (int role = 0; role < 6; ++role) structural.insert(clean.surface.token_of_role[static_cast<size_t>(role)]);
  for (int i = 0; i < d.n; ++i)
    for (int p : d.motif_positions[static_cast<size_t>(i)])
      ASSERT_TRUE(structural.count(d.tokens[static_cast<size_t>(i) * d.seq_len + p]));
}

TEST(Generate, NoiseCorruptsSmallFractionOfMotifTokens) {
  auto ts = build_task_stream(kStreamSeed);
  Dataset d = generate_split(ts.A1, 2000, "train");
  std::set<int> structural;
  for (int role = 0; role < 6; ++role) structural.insert(ts.A1.surface.token_of_role[static_cast<size_t>(role)]);
  int64_t corrupted = 0, total = 0;
  for (int i = 0; i < d.n; ++i)
    for (int p : d.motif_positions[static_cast<size_t>(i)]) {
      ++total;
      corrupted += structural.count(d.tokens[static_cast<size_t>(i) * d.seq_len + p]) ? 0 : 1;
    }
  const double rate = static_cast<double>(corrupted) / static_cast<double>(total);
  EXPECT_GT(rate, 0.005);
  EXPECT_LT(rate, 0.04);  // nominal 0.02
}

TEST(Surfaces, RelabelRoundTripRecoversSequences) {
  auto ts = build_task_stream(kStreamSeed);
  Dataset d = generate_split(ts.A1, 100, "train");
  Dataset through = relabel_surface(d, ts.A1.surface, ts.A2.surface);
  EXPECT_NE(through.tokens, d.tokens);
  Dataset back = relabel_surface(through, ts.A2.surface, ts.A1.surface);
  EXPECT_EQ(back.tokens, d.tokens);
}

TEST(Probe, BagOfTokensSolvesSameSurfaceOnly) {
  // Token counts carry the two-motif half of the task on the training
  // surface, but a different surface of the same family scrambles every
  // count feature, dropping the probe to chance. This is the division of
  // labor the whole task design rests on: surface in the tokens, structure
  // in the label.
  auto ts = build_task_stream(kStreamSeed);
  auto [a1_train, a1_val] = generate(ts.A1);
  auto [a2_train, a2_val] = generate(ts.A2);
  (void)a2_train;
  BagProbe probe;
  probe.train(a1_train);
  const float same = probe.accuracy(a1_val);
  const float cross = probe.accuracy(a2_val);
  EXPECT_GE(same, 0.65f);
  EXPECT_GE(cross, 0.40f);
  EXPECT_LE(cross, 0.60f);
}

TEST(Persistence, RoundTripAndChecksum) {
  auto ts = build_task_stream(kStreamSeed);
  Dataset d = generate_split(ts.C1, 64, "val");
  fs::path dir = fs::temp_directory_path() / "dppn_taskgen_test";
  fs::create_directories(dir);
  std::string stem = (dir / "c1_val").string();
  save_dataset(stem, ts.C1, d);
  Dataset back = load_dataset(stem);
  EXPECT_EQ(back.tokens, d.tokens);
  EXPECT_EQ(back.labels, d.labels);
  // Corrupt one byte of the payload.
  std::fstream io(stem + ".bin", std::ios::in | std::ios::out | std::ios::binary);
  io.seekp(10, std::ios::beg);
  io.write("\x7f", 1);
  io.close();
  EXPECT_THROW(load_dataset(stem), std::runtime_error);
}

TEST(Stream, TaskLookupByName) {
  auto ts = build_task_stream(kStreamSeed);
  EXPECT_EQ(ts.by_name("A1p").name, "A1p");
  EXPECT_EQ(ts.by_name("C1").family.id, 'C');
  EXPECT_THROW(ts.by_name("D9"), std::invalid_argument);
}
