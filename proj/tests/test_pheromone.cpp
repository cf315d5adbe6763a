// Field update cascade against hand-evaluated expectations, plus the
// serialization contract. The one quarantined oracle at the bottom pins down
// the broken evaporation variant this design replaced.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "dppn/pheromone.hpp"
#include "dppn/rng.hpp"

using namespace dppn;
namespace fs = std::filesystem;

namespace {

std::vector<RoutePreference> uniform_batch(int B, int rows, int cols, bool correct) {
  RoutePreference rp;
  rp.p.assign(static_cast<size_t>(rows) * cols, 1.0f / static_cast<float>(cols));
  rp.correct = correct;
  return std::vector<RoutePreference>(static_cast<size_t>(B), rp);
}

fs::path tmp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "dppn_field_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Field, ColdInitIsMidpointEverywhere) {
  PheromoneField f(32, 32);
  for (float t : f.values()) ASSERT_EQ(t, 1.05f);
  FieldStats s = f.stats();
  EXPECT_FLOAT_EQ(s.mean, 1.05f);
  EXPECT_FLOAT_EQ(s.stddev, 0.0f);
  EXPECT_EQ(s.high_count, 1024);  // threshold is >= midpoint
}

TEST(Field, EvaporationPointValues) {
  PheromoneField f(2, 2);
  f.at(0, 0) = 1.0f;
  f.at(0, 1) = 0.1f;
  f.at(1, 0) = 2.0f;
  f.evaporate();
  EXPECT_FLOAT_EQ(f.at(0, 0), 0.82f);  // 0.8*1.0 + 0.2*0.1
  EXPECT_FLOAT_EQ(f.at(0, 1), 0.1f);   // fixed point
  EXPECT_FLOAT_EQ(f.at(1, 0), 1.62f);
}

TEST(Field, EvaporationContractsTowardFloor) {
  PheromoneField f(1, 1);
  f.at(0, 0) = 2.0f;
  float prev = 2.0f;
  for (int i = 0; i < 200; ++i) {
    f.evaporate();
    ASSERT_LE(f.at(0, 0), prev);
    ASSERT_GE(f.at(0, 0), 0.1f);
    prev = f.at(0, 0);
  }
  EXPECT_NEAR(prev, 0.1f, 1e-5f);
}

TEST(Field, UniformAllCorrectDepositRaisesExactly128By057) {
  // Uniform preferences make every normalized delta 1, so the budgeted
  // entries each gain delta*(tau_max-tau_min) = 0.3*1.9 = 0.57; ties resolve
  // in row-major order.
  PheromoneField f(32, 32);
  f.evaporate();
  std::vector<float> base = f.values();  // all 0.86
  ASSERT_TRUE(f.deposit(uniform_batch(8, 32, 32, true)));
  int changed = 0;
  for (size_t i = 0; i < base.size(); ++i) {
    if (f.values()[i] != base[i]) {
      ++changed;
      EXPECT_NEAR(f.values()[i] - base[i], 0.57f, 1e-5f);
      EXPECT_LT(i, 128u);  // row-major tie break picks the first indices
    }
  }
  EXPECT_EQ(changed, 128);
}

TEST(Field, UniformAllIncorrectMirrorsWithNegativeSign) {
  PheromoneField f(32, 32);
  f.evaporate();
  std::vector<float> base = f.values();
  ASSERT_TRUE(f.deposit(uniform_batch(8, 32, 32, false)));
  int changed = 0;
  for (size_t i = 0; i < base.size(); ++i) {
    if (f.values()[i] != base[i]) {
      ++changed;
      EXPECT_NEAR(f.values()[i] - base[i], -0.57f, 1e-5f);
    }
  }
  EXPECT_EQ(changed, 128);
}

TEST(Field, OpposedPairCancelsToNoop) {
  PheromoneField f(8, 8);
  auto batch = uniform_batch(2, 8, 8, true);
  batch[1].correct = false;  // same p, opposite sign
  std::vector<float> before = f.values();
  EXPECT_FALSE(f.deposit(batch));
  EXPECT_EQ(f.values(), before);
}

TEST(Field, EmptyBatchStepIsPureEvaporation) {
  PheromoneField f(4, 4);
  PheromoneField g(4, 4);
  f.step({});
  g.evaporate();
  EXPECT_EQ(f.values(), g.values());
}

TEST(Field, SingleStepFromColdChangesExactlyBudget) {
  PheromoneField f(32, 32);
  PheromoneField baseline(32, 32);
  baseline.evaporate();
  RngStream r = RngStream::from(3, "pref");
  std::vector<RoutePreference> batch;
  for (int b = 0; b < 4; ++b) {
    RoutePreference rp;
    rp.p.resize(1024);
    for (int row = 0; row < 32; ++row) {
      float sum = 0.0f;
      for (int c = 0; c < 32; ++c) {
        float v = r.next_float() + 1e-3f;
        rp.p[static_cast<size_t>(row) * 32 + c] = v;
        sum += v;
      }
      for (int c = 0; c < 32; ++c) rp.p[static_cast<size_t>(row) * 32 + c] /= sum;
    }
    rp.correct = true;
    batch.push_back(std::move(rp));
  }
  ASSERT_TRUE(f.step(batch));
  int changed = 0;
  for (size_t i = 0; i < 1024; ++i)
    if (f.values()[i] != baseline.values()[i]) ++changed;
  EXPECT_EQ(changed, 128);
  // Sign property: all-correct deposits never fall below the evaporated base.
  for (size_t i = 0; i < 1024; ++i) ASSERT_GE(f.values()[i], baseline.values()[i]);
}

TEST(Field, BoundsHoldUnderLongRandomDrive) {
  PheromoneField f(16, 16);
  RngStream r = RngStream::from(17, "drive");
  for (int step = 0; step < 10000; ++step) {
    std::vector<RoutePreference> batch(2);
    for (auto& rp : batch) {
      rp.p.resize(256);
      for (int row = 0; row < 16; ++row) {
        float sum = 0.0f;
        for (int c = 0; c < 16; ++c) {
          float v = r.next_float() + 1e-4f;
          rp.p[static_cast<size_t>(row) * 16 + c] = v;
          sum += v;
        }
        for (int c = 0; c < 16; ++c) rp.p[static_cast<size_t>(row) * 16 + c] /= sum;
      }
      rp.correct = r.next_float() < 0.5f;
    }
    f.step(batch);
    for (float t : f.values()) {
      ASSERT_GE(t, 0.1f);
      ASSERT_LE(t, 2.0f);
    }
  }
}

TEST(Field, DepositShapeMismatchRejected) {
  PheromoneField f(32, 32);
  RoutePreference rp;
  rp.p.assign(64, 1.0f / 8.0f);  // wrong size
  rp.correct = true;
  EXPECT_THROW(f.deposit({rp}), std::invalid_argument);
}

TEST(Field, EntropyOfUniformFieldIsLogCount) {
  PheromoneField f(32, 32);
  EXPECT_NEAR(f.entropy(), std::log(1024.0), 1e-6);
}

TEST(Field, EntropyOfOneHighEntryMatchesClosedForm) {
  PheromoneField f(32, 32);
  for (auto& t : f.values()) t = 0.1f;
  f.at(0, 0) = 2.0f;
  // Closed form for one entry at tau_max over a tau_min background.
  const double total = 2.0 + 1023 * 0.1;
  const double ph = 2.0 / total, pl = 0.1 / total;
  const double expected = -(ph * std::log(ph) + 1023 * pl * std::log(pl));
  EXPECT_NEAR(f.entropy(), expected, 1e-5);
  EXPECT_LT(f.entropy(), std::log(1024.0));
}

TEST(Field, StatsOfTwoPointField) {
  PheromoneField f(32, 32);
  for (size_t i = 0; i < 1024; ++i) f.values()[i] = i < 512 ? 0.1f : 2.0f;
  FieldStats s = f.stats();
  EXPECT_NEAR(s.mean, 1.05f, 1e-6f);
  EXPECT_NEAR(s.stddev, 0.95f, 1e-6f);  // population std of {0.1, 2.0}
  EXPECT_EQ(s.high_count, 512);
}

TEST(Field, SerializationRoundTripIsBitExact) {
  PheromoneField f(32, 32);
  RngStream r = RngStream::from(23, "ser");
  for (auto& t : f.values()) t = 0.1f + 1.9f * r.next_float();
  fs::path p = tmp_file("roundtrip.phero");
  save_field(p.string(), f, "source/learned/seed42");
  std::string exp_id;
  PheromoneField g = load_field(p.string(), 32, 32, &exp_id);
  EXPECT_EQ(g.values(), f.values());
  EXPECT_EQ(exp_id, "source/learned/seed42");
  EXPECT_FLOAT_EQ(g.config().rho, 0.8f);
  EXPECT_EQ(g.config().update_topk, 128);
}

TEST(Field, DeserializeWrongShapeRejected) {
  PheromoneField f(32, 8);
  fs::path p = tmp_file("shape.phero");
  save_field(p.string(), f);
  EXPECT_THROW(load_field(p.string(), 32, 32), std::runtime_error);
  EXPECT_NO_THROW(load_field(p.string(), 32, 8));
  EXPECT_NO_THROW(load_field(p.string()));  // unconstrained load accepts any shape
}

TEST(Field, CorruptPayloadRejected) {
  PheromoneField f(8, 8);
  fs::path p = tmp_file("corrupt.phero");
  save_field(p.string(), f);
  std::fstream io(p, std::ios::in | std::ios::out | std::ios::binary);
  io.seekp(-3, std::ios::end);
  char b;
  io.seekg(-3, std::ios::end);
  io.read(&b, 1);
  b = static_cast<char>(b ^ 0x11);
  io.seekp(-3, std::ios::end);
  io.write(&b, 1);
  io.close();
  EXPECT_THROW(load_field(p.string()), std::runtime_error);
}

TEST(Field, NonPositiveShapeRejected) {
  EXPECT_THROW(PheromoneField(0, 4), std::invalid_argument);
  EXPECT_THROW(PheromoneField(4, -1), std::invalid_argument);
}

// Quarantined oracle for the broken update this cascade replaced: evaporation
// written as tau <- (1-rho)*tau + rho*tau collapses algebraically to the
// identity, so a field "updated" that way never changes. Kept as a regression
// tripwire; nothing in the library implements this form.
namespace legacy {
inline void broken_evaporate(std::vector<float>& tau, float rho) {
  for (auto& t : tau) t = (1.0f - rho) * t + rho * t;
}
}  // namespace legacy

TEST(FieldLegacy, BrokenEvaporationIsTheIdentity) {
  RngStream r = RngStream::from(31, "legacy");
  std::vector<float> tau(256);
  for (auto& t : tau) t = 0.1f + 1.9f * r.next_float();
  std::vector<float> before = tau;
  legacy::broken_evaporate(tau, 0.8f);
  EXPECT_EQ(tau, before);
  // The real evaporation moves every interior entry.
  PheromoneField f(16, 16);
  std::vector<float> cold = f.values();
  f.evaporate();
  for (size_t i = 0; i < cold.size(); ++i) ASSERT_NE(f.values()[i], cold[i]);
}
