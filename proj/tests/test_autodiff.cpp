#include <gtest/gtest.h>

#include "decred/autodiff.hpp"
#include "decred/grad_check.hpp"
#include "decred/losses.hpp"

namespace {

using decred::GradCheckOptions;
using decred::Rng;
using decred::ad::Matrix;
using decred::ad::Parameter;
using decred::ad::Tape;
using decred::ad::Var;
using P = Parameter<double>;

Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Projects an op's output onto a fixed random direction so every output
// coordinate influences the scalar being differentiated.
Var<double> project(Tape<double>& tape, const Var<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  return decred::ad::sum(decred::ad::mul(out, tape.constant(random_matrix(out.rows(), out.cols(), rng))));
}

constexpr double kIsolatedTol = 1e-4;

TEST(Autodiff, MatmulAndBias) {
  Rng rng(1);
  P x("x", random_matrix(3, 4, rng)), w("w", random_matrix(4, 5, rng)), b("b", random_matrix(1, 5, rng));
  std::vector<P*> params{&x, &w, &b};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    return project(t, decred::ad::linear(t.parameter(x), t.parameter(w), t.parameter(b)), 7);
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, ElementwiseOps) {
  Rng rng(2);
  P a("a", random_matrix(3, 4, rng)), c("c", random_matrix(3, 4, rng));
  std::vector<P*> params{&a, &c};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    Var<double> va = t.parameter(a), vc = t.parameter(c);
    Var<double> y = decred::ad::add(decred::ad::mul(decred::ad::sigmoid(va), vc), decred::ad::relu(va));
    return project(t, decred::ad::scale(y, 0.7), 8);
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, LayerNorm) {
  Rng rng(3);
  P x("x", random_matrix(4, 6, rng)), g("g", random_matrix(1, 6, rng)), b("b", random_matrix(1, 6, rng));
  std::vector<P*> params{&x, &g, &b};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    return project(t, decred::ad::layer_norm(t.parameter(x), t.parameter(g), t.parameter(b)), 9);
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, LogSoftmax) {
  Rng rng(4);
  P x("x", random_matrix(3, 5, rng));
  std::vector<P*> params{&x};
  auto report = decred::grad_check(params, [&](Tape<double>& t) { return project(t, decred::ad::log_softmax(t.parameter(x)), 10); });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, MultiHeadAttentionCausalAndCross) {
  Rng rng(5);
  P q("q", random_matrix(4, 6, rng)), k("k", random_matrix(5, 6, rng)), v("v", random_matrix(5, 6, rng));
  P qs("qs", random_matrix(4, 6, rng));
  std::vector<P*> params{&q, &k, &v, &qs};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    Var<double> cross = decred::ad::multi_head_attention(t.parameter(q), t.parameter(k), t.parameter(v), 3, false);
    Var<double> self = decred::ad::multi_head_attention(t.parameter(qs), t.parameter(qs), t.parameter(qs), 2, true);
    return decred::ad::add(project(t, cross, 11), project(t, self, 12));
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, ConcatSliceEmbedding) {
  Rng rng(6);
  P a("a", random_matrix(3, 2, rng)), b("b", random_matrix(3, 3, rng)), table("table", random_matrix(5, 4, rng));
  std::vector<P*> params{&a, &b, &table};
  const std::vector<int> ids{1, 3, 1, 0};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    Var<double> cat = decred::ad::concat_cols<double>({t.parameter(a), t.parameter(b)});
    Var<double> mid = decred::ad::slice_cols(cat, 1, 3);
    Var<double> emb = decred::ad::embedding(t.parameter(table), ids);
    return decred::ad::add(project(t, mid, 13), project(t, emb, 14));
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, Conv2dStride2) {
  Rng rng(7);
  P x("x", random_matrix(9, 2 * 7, rng)), w("w", random_matrix(3, 2 * 9, rng)), b("b", random_matrix(1, 3, rng));
  std::vector<P*> params{&x, &w, &b};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    Var<double> y = decred::ad::conv2d_stride2(t.parameter(x), 2, t.parameter(w), t.parameter(b));
    EXPECT_EQ(y.rows(), 5);
    EXPECT_EQ(y.cols(), 3 * 4);
    return project(t, y, 15);
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, DepthwiseConv1d) {
  Rng rng(8);
  P x("x", random_matrix(6, 3, rng)), w("w", random_matrix(5, 3, rng)), b("b", random_matrix(1, 3, rng));
  std::vector<P*> params{&x, &w, &b};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    return project(t, decred::ad::depthwise_conv1d(t.parameter(x), t.parameter(w), t.parameter(b)), 16);
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol) << report.worst_parameter;
}

TEST(Autodiff, LinearClassifierTwoSampleBatch) {
  // Softmax regression on a two-sample batch, the smallest end-to-end check.
  Rng rng(9);
  P w("w", random_matrix(3, 4, rng)), b("b", Matrix<double>::Zero(1, 4));
  Matrix<double> inputs = random_matrix(2, 3, rng);
  const std::vector<int> labels{1, 3};
  std::vector<P*> params{&w, &b};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    Var<double> logits = decred::ad::linear(t.constant(inputs), t.parameter(w), t.parameter(b));
    return decred::masked_smoothed_ce(logits, labels, 0.0).loss;
  });
  EXPECT_LT(report.max_rel_error, kIsolatedTol);
}

TEST(Autodiff, ConstantLossHasZeroGradient) {
  Rng rng(10);
  P w("w", random_matrix(2, 2, rng));
  std::vector<P*> params{&w};
  auto report = decred::grad_check(params, [&](Tape<double>& t) {
    return decred::ad::add(decred::ad::scale(decred::ad::sum(t.parameter(w)), 0.0), t.constant(Matrix<double>::Constant(1, 1, 3.0)));
  });
  EXPECT_EQ(report.max_rel_error, 0.0);
  EXPECT_TRUE((w.grad.array() == 0.0).all());
}

TEST(Autodiff, NonFiniteLossIsRejected) {
  P w("w", Matrix<double>::Constant(1, 1, 1.0));
  std::vector<P*> params{&w};
  EXPECT_THROW(decred::grad_check(params,
                                  [&](Tape<double>& t) {
                                    return decred::ad::scale(decred::ad::sum(t.parameter(w)),
                                                             std::numeric_limits<double>::infinity());
                                  }),
               std::runtime_error);
}

TEST(Autodiff, NonRecordingTapeKeepsValues) {
  Rng rng(11);
  P w("w", random_matrix(2, 3, rng));
  Tape<double> tape(false);
  Var<double> y = decred::ad::scale(tape.parameter(w), 2.0);
  EXPECT_TRUE(y.value().isApprox(2.0 * w.value));
  EXPECT_FALSE(tape.requires_grad(y));
}

}  // namespace
