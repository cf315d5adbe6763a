// Backward rules vs the central finite-difference oracle, op by op and
// through composites. The oracle re-runs the forward closure with perturbed
// inputs, so it is independent of every backward implementation.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dppn/rng.hpp"
#include "dppn/tape.hpp"
#include "dppn/tensor.hpp"
#include "gradcheck.hpp"

using namespace dppn;
using dppn::testing::fd_gradcheck;

namespace {

Tensor randn(Shape s, RngStream& r, bool rg, float scale = 1.0f) {
  Tensor t = Tensor::zeros(s, rg);
  for (auto& x : t.values()) x = r.normal() * scale;
  return t;
}

// Runs forward once with recording to collect analytic grads, then the FD oracle.
void check(const std::vector<Tensor>& params, const std::function<Tensor(Tape&)>& build,
           float tol = 1e-3f) {
  Tape tp;
  Tensor loss = build(tp);
  tp.backward(loss);
  std::vector<std::vector<float>> analytic;
  for (const auto& p : params) {
    Tensor t = p;
    analytic.push_back(t.has_grad() ? t.grad_vec() : std::vector<float>(t.values().size(), 0.0f));
  }
  auto forward = [&]() {
    Tape t2;
    t2.set_recording(false);
    return build(t2).data()[0];
  };
  auto res = fd_gradcheck(params, analytic, forward, 1e-3f, tol);
  EXPECT_EQ(res.failed, 0) << "worst rel err " << res.worst << " at " << res.worst_where;
}

}  // namespace

TEST(Gradcheck, MatMulFolded) {
  RngStream r = RngStream::from(11, "g");
  Tensor a = randn({2, 3, 4}, r, true);
  Tensor w = randn({4, 5}, r, true);
  check({a, w}, [&](Tape& tp) { return tp.mean_all(tp.matmul(a, w)); });
}

TEST(Gradcheck, MatMulFoldedTransB) {
  RngStream r = RngStream::from(12, "g");
  Tensor a = randn({3, 4}, r, true);
  Tensor w = randn({5, 4}, r, true);
  check({a, w}, [&](Tape& tp) { return tp.mean_all(tp.matmul(a, w, false, true)); });
}

TEST(Gradcheck, MatMulBatched) {
  RngStream r = RngStream::from(13, "g");
  Tensor a = randn({2, 3, 4}, r, true);
  Tensor b = randn({2, 4, 5}, r, true);
  check({a, b}, [&](Tape& tp) { return tp.mean_all(tp.matmul(a, b)); });
}

TEST(Gradcheck, MatMulBatchedTransA) {
  RngStream r = RngStream::from(14, "g");
  Tensor a = randn({2, 4, 3}, r, true);
  Tensor b = randn({2, 4, 5}, r, true);
  check({a, b}, [&](Tape& tp) { return tp.mean_all(tp.matmul(a, b, true, false)); });
}

TEST(Gradcheck, MatMulBatchedTransB) {
  RngStream r = RngStream::from(15, "g");
  Tensor a = randn({2, 3, 4}, r, true);
  Tensor b = randn({2, 5, 4}, r, true);
  check({a, b}, [&](Tape& tp) { return tp.mean_all(tp.matmul(a, b, false, true)); });
}

TEST(Gradcheck, ElementwiseChain) {
  RngStream r = RngStream::from(16, "g");
  Tensor a = randn({3, 7}, r, true);
  Tensor b = randn({3, 7}, r, true);
  check({a, b}, [&](Tape& tp) {
    Tensor x = tp.mul(tp.add(a, b), tp.sub(a, b));
    Tensor y = tp.sigmoid(tp.scale(x, 0.5f));
    return tp.mean_all(y);
  });
}

TEST(Gradcheck, ReluSqrtLogCos) {
  RngStream r = RngStream::from(17, "g");
  Tensor a = randn({4, 6}, r, true);
  check({a}, [&](Tape& tp) {
    Tensor pos = tp.add_const(tp.relu(a), 0.5f);  // strictly positive, away from kinks
    Tensor x = tp.add(tp.sqrt_op(pos), tp.log_op(pos));
    return tp.mean_all(tp.add(x, tp.cos_op(a)));
  });
}

TEST(Gradcheck, SoftmaxJacobian) {
  RngStream r = RngStream::from(18, "g");
  Tensor a = randn({3, 5}, r, true);
  Tensor w = randn({3, 5}, r, false);  // fixed projection picks a nontrivial combination
  check({a}, [&](Tape& tp) { return tp.mean_all(tp.mul(tp.softmax_lastdim(a), w)); });
}

TEST(Gradcheck, SoftmaxJacobianClosedForm) {
  // dp_i/dx_j = p_i (delta_ij - p_j), checked entry by entry on one row.
  Tape tp;
  Tensor x = Tensor::from({1, 4}, {0.2f, -0.3f, 0.9f, 0.0f}, true);
  Tensor p = tp.softmax_lastdim(x);
  std::vector<float> pv = p.values();
  for (int i = 0; i < 4; ++i) {
    Tape t2;
    Tensor xi = Tensor::from({1, 4}, x.values(), true);
    Tensor pi = t2.softmax_lastdim(xi);
    // select component i
    Tensor sel = Tensor::zeros({1, 4});
    sel.data()[i] = 4.0f;  // mean_all divides by 4
    Tensor loss = t2.mean_all(t2.mul(pi, sel));
    t2.backward(loss);
    for (int j = 0; j < 4; ++j) {
      float expected = pv[static_cast<size_t>(i)] * ((i == j ? 1.0f : 0.0f) - pv[static_cast<size_t>(j)]);
      EXPECT_NEAR(xi.grad()[j], expected, 1e-5f) << "i=" << i << " j=" << j;
    }
  }
}

TEST(Gradcheck, MaskedSoftmaxZeroGradThroughMasked) {
  RngStream r = RngStream::from(19, "g");
  Tensor scores = randn({1, 2, 3, 4}, r, true);
  std::vector<uint8_t> bits(2 * 3 * 4, 0);
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) bits[static_cast<size_t>(h) * 12 + i * 4 + j] = (j % 2 == 0) ? 1 : 0;
  AttnMask m{bits.data(), 0, 1, 3, 4};
  Tensor w = randn({1, 2, 3, 4}, r, false);
  check({scores}, [&](Tape& tp) { return tp.mean_all(tp.mul(tp.softmax_masked(scores, m), w)); });
  // Masked positions must carry exactly zero analytic gradient.
  Tape tp;
  Tensor p = tp.softmax_masked(scores, m);
  tp.backward(tp.mean_all(tp.mul(p, w)));
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 3; ++i)
      for (int j = 1; j < 4; j += 2) EXPECT_EQ(scores.grad()[(static_cast<int64_t>(h) * 3 + i) * 4 + j], 0.0f);
}

TEST(Gradcheck, BroadcastOps) {
  RngStream r = RngStream::from(20, "g");
  Tensor h = randn({2, 3, 4}, r, true);
  Tensor bias = randn({4}, r, true);
  Tensor s = randn({2}, r, true, 0.5f);
  Tensor g = randn({2, 3, 1}, r, true);
  Tensor P = randn({3, 4}, r, true);
  check({h, bias, s, g, P}, [&](Tape& tp) {
    Tensor x = tp.add_bias(h, bias);
    x = tp.add_position(x, P);
    x = tp.mul_rows(x, tp.sigmoid(s));
    x = tp.mul_gate(x, tp.sigmoid(g));
    return tp.mean_all(x);
  });
}

TEST(Gradcheck, AddHeadwise) {
  RngStream r = RngStream::from(21, "g");
  Tensor scores = randn({2, 3, 4, 4}, r, true);
  Tensor m = randn({2, 4, 4}, r, true);
  check({scores, m}, [&](Tape& tp) {
    return tp.mean_all(tp.sigmoid(tp.add_headwise(scores, m)));
  });
}

TEST(Gradcheck, KeyBiasRepeatExpand) {
  RngStream r = RngStream::from(29, "g");
  Tensor scores = randn({2, 2, 3, 4}, r, true);
  Tensor region = randn({2, 2}, r, true);   // fans out to 4 key columns
  Tensor scalar = randn({2}, r, true);
  check({scores, region, scalar}, [&](Tape& tp) {
    Tensor bias = tp.repeat_cols(region, 2);            // [2, 4]
    Tensor s = tp.add_key_bias(scores, bias);
    Tensor e = tp.expand_scalar_rows(scalar, 3);        // [2, 3, 1]
    Tensor probs = tp.softmax_lastdim(s);
    Tensor pooled = tp.mean_axis1(tp.merge_heads(probs));  // [2, 8]
    return tp.mean_all(tp.add(pooled, tp.mean_axis1(tp.mul_gate(Tensor::full({2, 3, 8}, 1.0f), e))));
  });
}

TEST(Gradcheck, L2NormalizeRows) {
  RngStream r = RngStream::from(30, "g");
  Tensor a = randn({3, 5}, r, true);
  Tensor w = randn({3, 5}, r, false);
  check({a}, [&](Tape& tp) { return tp.mean_all(tp.mul(tp.l2_normalize_rows(a), w)); });
}

TEST(Gradcheck, ScaleScoresGradIsIdentityForwardScaledBackward) {
  RngStream r = RngStream::from(32, "g");
  Tensor scores = randn({1, 2, 2, 3}, r, true);
  std::vector<float> mult = {0.5f, 2.0f, 1.0f, 3.0f, 0.0f, 1.5f};
  Tape tp;
  Tensor out = tp.scale_scores_grad(scores, mult);
  for (int64_t i = 0; i < out.numel(); ++i) ASSERT_EQ(out.data()[i], scores.data()[i]);
  tp.backward(tp.mean_all(out));
  const float base = 1.0f / static_cast<float>(out.numel());
  for (int h = 0; h < 2; ++h)
    for (size_t i = 0; i < 6; ++i)
      EXPECT_NEAR(scores.grad()[h * 6 + static_cast<int64_t>(i)], base * mult[i], 1e-7f);
}

TEST(Gradcheck, RowNormalize) {
  RngStream r = RngStream::from(22, "g");
  Tensor a = randn({3, 5}, r, true);
  Tensor w = randn({3, 5}, r, false);
  check({a}, [&](Tape& tp) {
    Tensor pos = tp.add_const(tp.relu(a), 0.3f);
    return tp.mean_all(tp.mul(tp.row_normalize(pos), w));
  });
}

TEST(Gradcheck, EmbeddingScatter) {
  RngStream r = RngStream::from(23, "g");
  Tensor E = randn({5, 3}, r, true);
  std::vector<int> ids = {0, 2, 2, 4, 1, 0};
  check({E}, [&](Tape& tp) {
    Tensor h = tp.embedding(E, ids, 2, 3);
    return tp.mean_all(tp.sigmoid(h));
  });
}

TEST(Gradcheck, ReductionsAndConcat) {
  RngStream r = RngStream::from(24, "g");
  Tensor a = randn({2, 3, 4}, r, true);
  Tensor b = randn({2, 3, 2}, r, true);
  check({a, b}, [&](Tape& tp) {
    Tensor c = tp.concat_lastdim({a, b});
    Tensor m = tp.mean_axis1(c);       // [2, 6]
    Tensor s = tp.mean_last2(a);       // [2]
    Tensor z = tp.mul_rows(m, s);
    return tp.mean_all(z);
  });
}

TEST(Gradcheck, LayerNorm) {
  RngStream r = RngStream::from(25, "g");
  Tensor a = randn({3, 6}, r, true);
  Tensor gamma = Tensor::full({6}, 1.0f, true);
  Tensor beta = Tensor::zeros({6}, true);
  for (auto& x : gamma.values()) x += 0.1f * r.normal();
  check({a, gamma, beta}, [&](Tape& tp) {
    return tp.mean_all(tp.sigmoid(tp.layer_norm(a, gamma, beta)));
  });
}

TEST(Gradcheck, HeadsSplitMerge) {
  RngStream r = RngStream::from(26, "g");
  Tensor qkv = randn({2, 3, 12}, r, true);  // D = 4, H = 2
  check({qkv}, [&](Tape& tp) {
    Tensor q, k, v;
    tp.split_qkv(qkv, 2, q, k, v);
    Tensor scores = tp.scale(tp.matmul(q, k, false, true), 1.0f / std::sqrt(2.0f));
    Tensor probs = tp.softmax_lastdim(scores);
    Tensor ctx = tp.matmul(probs, v);
    return tp.mean_all(tp.merge_heads(ctx));
  });
}

TEST(Gradcheck, CrossEntropy) {
  RngStream r = RngStream::from(27, "g");
  Tensor logits = randn({5, 2}, r, true);
  std::vector<int> labels = {0, 1, 1, 0, 1};
  check({logits}, [&](Tape& tp) { return tp.cross_entropy_mean(logits, labels); });
}

TEST(Gradcheck, AttentionBlockComposite) {
  // Dense single-head attention block, d=8, N=6: q/k/v projections through
  // softmax and a contraction, all checked against finite differences.
  RngStream r = RngStream::from(28, "g");
  const int N = 6, D = 8;
  Tensor h = randn({1, N, D}, r, true, 0.7f);
  Tensor Wqkv = randn({D, 3 * D}, r, true, 0.3f);
  Tensor Wo = randn({D, D}, r, true, 0.3f);
  check({h, Wqkv, Wo}, [&](Tape& tp) {
    Tensor qkv = tp.matmul(h, Wqkv);
    Tensor q, k, v;
    tp.split_qkv(qkv, 1, q, k, v);
    Tensor scores = tp.scale(tp.matmul(q, k, false, true), 1.0f / std::sqrt(static_cast<float>(D)));
    Tensor probs = tp.softmax_lastdim(scores);
    Tensor ctx = tp.merge_heads(tp.matmul(probs, v));
    Tensor out = tp.matmul(ctx, Wo);
    return tp.mean_all(tp.sigmoid(out));
  });
}

TEST(Tape, RepeatedBackwardRejected) {
  Tape tp;
  Tensor a = Tensor::full({2}, 1.0f, true);
  Tensor loss = tp.mean_all(tp.mul(a, a));
  tp.backward(loss);
  EXPECT_THROW(tp.backward(loss), std::logic_error);
}

TEST(Tape, BackwardCountTracksForwardBackwardPairs) {
  Tape tp;
  Tensor a = Tensor::full({2}, 2.0f, true);
  for (int i = 0; i < 3; ++i) {
    Tensor loss = tp.mean_all(tp.mul(a, a));
    tp.backward(loss);
  }
  EXPECT_EQ(tp.backward_count(), 3);
}

TEST(Tape, NoGradModeRecordsNothing) {
  Tape tp;
  tp.set_recording(false);
  Tensor a = Tensor::full({2}, 1.0f, true);
  Tensor loss = tp.mean_all(tp.mul(a, a));
  EXPECT_EQ(tp.node_count(), 0u);
  EXPECT_FALSE(loss.requires_grad());
}

TEST(Tape, GradAccumulatesAcrossReuse) {
  // The same tensor feeding two paths accumulates both contributions.
  Tape tp;
  Tensor a = Tensor::from({1}, {3.0f}, true);
  Tensor loss = tp.mean_all(tp.mul(a, a));  // d/da a^2 = 2a = 6
  tp.backward(loss);
  EXPECT_NEAR(a.grad()[0], 6.0f, 1e-5f);
}
