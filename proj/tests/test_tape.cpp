#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "semtrace/neural/tape.hpp"

using namespace semtrace::nn;
using M = Mat<double>;

namespace {

Tensor<double> random_tensor(const std::string& name, Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Tensor<double> t(name, r, c);
  semtrace::detail::Rng rng(seed);
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = 2 * rng.uniform() - 1;
  return t;
}

void expect_grads_ok(std::vector<Tensor<double>*> ps, const std::function<Var(Tape<double>&)>& f) {
  for (const auto& e : oracle::grad_check(ps, f)) EXPECT_LT(e.rel_error, 1e-6) << e.name;
}

}  // namespace

TEST(TapeOps, ElementwiseAndMatmul) {
  auto a = random_tensor("a", 3, 4, 1), b = random_tensor("b", 4, 2, 2), c = random_tensor("c", 1, 2, 3);
  expect_grads_ok({&a, &b, &c}, [&](Tape<double>& t) {
    Var x = t.add_row(t.matmul(t.param(a), t.param(b)), t.param(c));
    Var y = t.mul(t.tanh(x), t.sigmoid(x));
    return t.sum(t.scale(t.gelu(y), 1.7));
  });
}

TEST(TapeOps, Indexing) {
  auto a = random_tensor("a", 5, 3, 4), b = random_tensor("b", 2, 2, 5);
  expect_grads_ok({&a, &b}, [&](Tape<double>& t) {
    Var g = t.gather_rows(t.param(a), {4, 0, 4});
    Var s = t.slice_cols(g, 1, 2);
    Var gb = t.gather_rows(t.param(b), {1, 0, 1});
    Var cat = t.concat_cols({s, gb});
    return t.sum(t.tanh(t.mean_rows(t.mul(cat, cat))));
  });
}

TEST(TapeOps, Attention) {
  auto q = random_tensor("q", 4, 6, 6), k = random_tensor("k", 4, 6, 7), v = random_tensor("v", 4, 6, 8);
  auto w = random_tensor("w", 4, 6, 9);
  expect_grads_ok({&q, &k, &v}, [&](Tape<double>& t) {
    Var a = t.attention(t.param(q), t.param(k), t.param(v), 3, 6.0);
    return t.sum(t.mul(a, t.constant(w.value)));
  });
}

TEST(TapeOps, SoftmaxXent) {
  auto x = random_tensor("x", 3, 5, 10);
  expect_grads_ok({&x}, [&](Tape<double>& t) { return t.softmax_xent(t.param(x), {0, 3, 9}, {1.0, 0.5, 0.0}, 4); });
}

TEST(TapeOps, CosineLoss) {
  auto a = random_tensor("a", 1, 5, 11), b = random_tensor("b", 1, 5, 12);
  expect_grads_ok({&a, &b}, [&](Tape<double>& t) { return t.cosine_embedding_loss(t.param(a), t.param(b), 1, 0.1); });
  const double cos = a.value.cwiseProduct(b.value).sum() / (a.value.norm() * b.value.norm());
  const double margin = cos - 0.2;  // keep the hinge active
  expect_grads_ok({&a, &b}, [&](Tape<double>& t) { return t.cosine_embedding_loss(t.param(a), t.param(b), -1, margin); });
}

TEST(Attention, SingleTokenAttendsToItself) {
  Tape<double> t;
  M q = M::Random(1, 4), k = M::Random(1, 4), v = M::Random(1, 4);
  std::vector<M> probs;
  Var a = t.attention(t.constant(q), t.constant(k), t.constant(v), 2, 4.0, &probs);
  ASSERT_EQ(probs.size(), 2u);
  for (const auto& p : probs) EXPECT_DOUBLE_EQ(p(0, 0), 1.0);
  EXPECT_TRUE(t.value(a).isApprox(v));
}

TEST(Attention, RowsSumToOne) {
  Tape<double> t;
  semtrace::detail::Rng rng(3);
  M q(7, 8), k(7, 8), v(7, 8);
  for (M* m : {&q, &k, &v})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = 10 * (rng.uniform() - 0.5);
  std::vector<M> probs;
  t.attention(t.constant(q), t.constant(k), t.constant(v), 4, 8.0, &probs);
  for (const auto& p : probs)
    for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
}

TEST(Attention, HandComputedTwoTokens) {
  // one head, d = 2: q1 = (1,0), q2 = (0,1); k1 = (1,0), k2 = (0,2); v1 = (1,2), v2 = (3,4)
  M q(2, 2), k(2, 2), v(2, 2);
  q << 1, 0, 0, 1;
  k << 1, 0, 0, 2;
  v << 1, 2, 3, 4;
  Tape<double> t;
  std::vector<M> probs;
  Var a = t.attention(t.constant(q), t.constant(k), t.constant(v), 1, 2.0, &probs);
  const double s = 1 / std::sqrt(2.0);
  // row 1 logits (1, 0) * s; row 2 logits (0, 2) * s
  const double p11 = std::exp(s) / (std::exp(s) + 1);
  const double p22 = std::exp(2 * s) / (1 + std::exp(2 * s));
  EXPECT_NEAR(probs[0](0, 0), p11, 1e-15);
  EXPECT_NEAR(probs[0](1, 1), p22, 1e-15);
  EXPECT_NEAR(t.value(a)(0, 0), p11 * 1 + (1 - p11) * 3, 1e-14);
  EXPECT_NEAR(t.value(a)(1, 1), (1 - p22) * 2 + p22 * 4, 1e-14);
}

TEST(Losses, CosineBranches) {
  Tape<double> t;
  M v(1, 3);
  v << 1, 2, 3;
  EXPECT_NEAR(t.value(t.cosine_embedding_loss(t.constant(v), t.constant(v), 1, 0.1))(0, 0), 0.0, 1e-12);
  M a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0.5, std::sqrt(0.75);  // cos = 0.5
  EXPECT_NEAR(t.value(t.cosine_embedding_loss(t.constant(a), t.constant(b), -1, 0.1))(0, 0), 0.4, 1e-12);
  b << 0.05, std::sqrt(1 - 0.0025);  // cos = 0.05
  EXPECT_NEAR(t.value(t.cosine_embedding_loss(t.constant(a), t.constant(b), -1, 0.1))(0, 0), 0.0, 1e-12);
  EXPECT_THROW(t.cosine_embedding_loss(t.constant(a), t.constant(M::Zero(1, 2)), 1, 0.1), std::domain_error);
}

TEST(Losses, XentUniformIsLogClasses) {
  Tape<double> t;
  Var l = t.softmax_xent(t.constant(M::Zero(2, 257)), {5, 200}, {1.0, 1.0}, 256);
  EXPECT_NEAR(t.value(l)(0, 0), 2 * std::log(256.0), 1e-12);
}

TEST(Backward, NonFiniteNamesTensor) {
  Tensor<double> w("layer0.wq", 1, 1);
  w.value(0, 0) = std::numeric_limits<double>::infinity();
  Tape<double> t;
  Var x = t.mul(t.param(w), t.param(w));
  try {
    t.backward(t.sum(x));
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.tensor(), "layer0.wq");
  }
}

TEST(Backward, UnreachedParameterHasZeroGrad) {
  auto a = random_tensor("a", 2, 2, 1), b = random_tensor("b", 2, 2, 2);
  a.zero_grad();
  b.zero_grad();
  Tape<double> t;
  t.param(b);
  t.backward(t.sum(t.param(a)));
  EXPECT_EQ(b.grad.norm(), 0.0);
  EXPECT_GT(a.grad.norm(), 0.0);
}
