#include <gtest/gtest.h>

#include "oracles.hpp"
#include "semtrace/corpus.hpp"
#include "semtrace/similarity.hpp"

using namespace semtrace;
using namespace semtrace::nn;

namespace {

Vector random_vector(semtrace::detail::Rng& rng, std::size_t d) {
  Vector v(d);
  for (auto& x : v) x = 2 * rng.uniform() - 1;
  return v;
}

ModelConfig small_config() {
  auto cfg = ModelConfig::desk();
  cfg.d_emb = 16;
  cfg.d_func = 8;
  cfg.ffn = 16;
  cfg.dropout = 0;
  cfg.max_len = 32;
  return cfg;
}

Vocab corpus_vocab(std::size_t n) {
  std::vector<MicroTrace> ts;
  for (std::uint64_t s = 0; s < n; ++s) {
    ts.push_back(dummy_trace(gen_function(s, {4, 12})));
    ts.push_back(dummy_trace(gen_function(s, {4, 12}, DialectId::arch_b)));
  }
  return build_vocab(ts);
}

FunctionEmbedding emb(std::string id, Vector v) { return {std::move(id), "archA", "", std::move(v)}; }

}  // namespace

TEST(Cosine, Anchors) {
  const Vector v{1, 2, 3}, w{-1, -2, -3};
  EXPECT_NEAR(cosine_similarity(v, v), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(v, w), -1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity({1, 0}, {0, 5}), 0.0, 1e-15);
  EXPECT_THROW(cosine_similarity({0, 0}, {1, 0}), std::domain_error);
}

TEST(Cosine, PositiveScaleInvariance) {
  semtrace::detail::Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    auto a = random_vector(rng, 7), b = random_vector(rng, 7);
    const double c = 0.01 + 10 * rng.uniform();
    Vector ca = a;
    for (auto& x : ca) x *= c;
    EXPECT_NEAR(cosine_similarity(ca, b), cosine_similarity(a, b), 1e-12);
  }
}

TEST(FinetuneLoss, Branches) {
  const Vector v{0.3, -2, 1};
  EXPECT_NEAR(finetune_loss(v, v, 1, 0.1), 0.0, 1e-12);
  const Vector a{1, 0}, b{0.5, std::sqrt(0.75)}, c{0.05, std::sqrt(1 - 0.0025)};
  EXPECT_NEAR(finetune_loss(a, b, -1, 0.1), 0.4, 1e-12);
  EXPECT_NEAR(finetune_loss(a, c, -1, 0.1), 0.0, 1e-12);
  EXPECT_THROW(finetune_loss(a, b, 0, 0.1), std::invalid_argument);
}

TEST(FinetuneLoss, BranchFormulaOnRandomVectors) {
  semtrace::detail::Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    auto a = random_vector(rng, 5), b = random_vector(rng, 5);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    const double cos = dot / std::sqrt(na * nb);
    EXPECT_NEAR(finetune_loss(a, b, 1, 0.1), 1 - cos, 1e-12);
    EXPECT_NEAR(finetune_loss(a, b, -1, 0.1), cos > 0.1 ? cos - 0.1 : 0.0, 1e-12);
    // the tape's loss agrees with the scalar one
    Tape<double> t;
    Mat<double> ma = Eigen::Map<Mat<double>>(a.data(), 1, 5), mb = Eigen::Map<Mat<double>>(b.data(), 1, 5);
    EXPECT_NEAR(t.value(t.cosine_embedding_loss(t.constant(ma), t.constant(mb), -1, 0.1))(0, 0),
                finetune_loss(a, b, -1, 0.1), 1e-12);
  }
}

TEST(FunctionEmbedding, PureAndRoundTripStable) {
  const auto vocab = corpus_vocab(20);
  auto m = init_model<double>(small_config(), vocab.size(), 4);
  const auto fn = gen_function(3, {4, 12});
  const auto e1 = function_embedding(m, vocab, fn);
  const auto e2 = function_embedding(m, vocab, fn);
  EXPECT_EQ(e1, e2);
  EXPECT_EQ(e1.size(), 8u);
  const auto back = parse_function(render(fn), fn.dialect, fn.id);
  EXPECT_EQ(function_embedding(m, vocab, back), e1);
}

TEST(FunctionEmbedding, SingleTokenReducesToTanh) {
  const auto vocab = corpus_vocab(20);
  auto cfg = small_config();
  auto m = init_model<double>(cfg, vocab.size(), 5);
  m.sim_w1.value = Mat<double>::Identity(16, 16);
  m.sim_w2.value = Mat<double>::Identity(16, 8);
  const auto fn = parse_function("ret", DialectId::arch_a, "r");
  const auto parts = static_parts(fn, vocab, cfg.max_len);
  ASSERT_EQ(parts.size(), 1u);
  ASSERT_EQ(parts[0].size(), 1u);
  Tape<double> t;
  const Mat<double> ctx = t.value(encode(t, m, parts[0]));
  const auto v = function_embedding(m, vocab, fn);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(v[i], std::tanh(ctx(0, static_cast<Eigen::Index>(i))), 1e-14);
}

TEST(FunctionEmbedding, LongFunctionsAverageSubsequences) {
  const auto fn = gen_function(9, {30, 40});
  const auto vocab = build_vocab({dummy_trace(fn)});
  auto cfg = small_config();
  auto m = init_model<double>(cfg, vocab.size(), 6);
  const auto parts = static_parts(fn, vocab, cfg.max_len);
  ASSERT_GT(parts.size(), 1u);
  Vector mean(cfg.d_func, 0.0);
  for (const auto& p : parts) {
    const auto v = embed_parts(m, {p});
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v[i] / static_cast<double>(parts.size());
  }
  const auto whole = function_embedding(m, vocab, fn);
  for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(whole[i], mean[i], 1e-12);
}

TEST(FunctionEmbedding, UnknownTokenRejected) {
  const auto vocab = build_vocab({dummy_trace(parse_function("r1 := r2 + 0x3\nret", DialectId::arch_a))});
  auto m = init_model<double>(small_config(), vocab.size(), 4);
  EXPECT_THROW(function_embedding(m, vocab, parse_function("nop", DialectId::arch_a)), UnknownToken);
}

namespace {

struct PairFixture {
  Vocab vocab;
  std::vector<std::vector<EncodedInput>> parts;
  std::vector<PairExample> batch;
};

PairFixture twenty_pairs(std::size_t max_len) {
  std::vector<Function> sources;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 12; ++s) {
    sources.push_back(gen_function(s, {4, 10}));
    seeds.push_back(s);
  }
  PairConfig pc;
  pc.num_pairs = 20;
  pc.train_fraction = 1.0;
  const auto ds = build_pairs(sources, seeds, pc, 3);
  std::vector<MicroTrace> ts;
  for (const auto& f : ds.functions) ts.push_back(dummy_trace(f.fn));
  PairFixture px{build_vocab(ts), {}, {}};
  for (const auto& f : ds.functions) px.parts.push_back(static_parts(f.fn, px.vocab, max_len));
  for (const auto& p : ds.pairs) px.batch.push_back({&px.parts[p.a], &px.parts[p.b], p.y});
  return px;
}

}  // namespace

TEST(FinetuneStep, BothComponentsReceiveGradient) {
  auto px = twenty_pairs(32);
  auto m = init_model<double>(small_config(), px.vocab.size(), 7);
  m.zero_grad();
  accumulate_pair_loss(m, px.batch, 0.1);
  EXPECT_GT(m.sim_w2.grad.norm(), 0.0);
  EXPECT_GT(m.layers[0].wq.grad.norm(), 0.0);
  EXPECT_GT(m.e_f.grad.norm(), 0.0);
  EXPECT_EQ(m.heads[0].w1.grad.norm(), 0.0);
}

TEST(FinetuneStep, LossDecreasesOnTwentyPairs) {
  auto px = twenty_pairs(32);
  ASSERT_EQ(px.batch.size(), 20u);
  auto m = init_model<double>(small_config(), px.vocab.size(), 8);
  AdamConfig ac;
  ac.lr = 1e-3;
  AdamW<double> opt(ac);
  m.zero_grad();
  const double before = accumulate_pair_loss(m, px.batch, 0.1);
  for (int s = 0; s < 100; ++s) finetune_step(m, opt, px.batch, 0.1);
  m.zero_grad();
  const double after = accumulate_pair_loss(m, px.batch, 0.1);
  EXPECT_LT(after, before);
}

TEST(FinetuneStep, Deterministic) {
  auto px = twenty_pairs(32);
  auto run = [&] {
    auto m = init_model<double>(small_config(), px.vocab.size(), 9);
    AdamW<double> opt;
    for (int s = 0; s < 5; ++s) finetune_step(m, opt, px.batch, 0.1);
    return function_embedding(m, px.vocab, gen_function(1, {4, 10}));
  };
  EXPECT_EQ(run(), run());
}

TEST(Search, SelfRankedFirstAndMatchesBruteForce) {
  semtrace::detail::Rng rng(3);
  EmbeddingIndex idx;
  std::vector<Vector> vs;
  for (int i = 0; i < 50; ++i) {
    vs.push_back(random_vector(rng, 6));
    idx.add(emb("f" + std::to_string(i), vs.back()));
  }
  for (int i = 0; i < 50; ++i) {
    const auto top = idx.search(vs[static_cast<std::size_t>(i)], 50);
    EXPECT_EQ(top[0].fn_id, "f" + std::to_string(i));
    EXPECT_NEAR(top[0].score, 1.0, 1e-12);
    std::vector<Match> brute;
    for (int j = 0; j < 50; ++j) brute.push_back({"f" + std::to_string(j), cosine_similarity(vs[static_cast<std::size_t>(i)], vs[static_cast<std::size_t>(j)])});
    std::stable_sort(brute.begin(), brute.end(), [](const Match& a, const Match& b) {
      return a.score != b.score ? a.score > b.score : a.fn_id < b.fn_id;
    });
    for (std::size_t r = 0; r < 50; ++r) EXPECT_EQ(top[r].fn_id, brute[r].fn_id);
  }
}

TEST(Search, TiesBrokenById) {
  EmbeddingIndex idx;
  idx.add(emb("b", {1, 0}));
  idx.add(emb("a", {2, 0}));
  idx.add(emb("c", {0, 1}));
  const auto top = idx.search({1, 0}, 3);
  EXPECT_EQ(top[0].fn_id, "a");
  EXPECT_EQ(top[1].fn_id, "b");
  EXPECT_EQ(top[2].fn_id, "c");
}

TEST(Search, Errors) {
  EmbeddingIndex idx;
  EXPECT_THROW(idx.search({1}, 1), std::invalid_argument);
  idx.add(emb("a", {1}));
  EXPECT_THROW(idx.add(emb("a", {2})), std::invalid_argument);
  EXPECT_THROW(idx.search({1}, 2), std::invalid_argument);
}

TEST(Auc, Anchors) {
  EXPECT_DOUBLE_EQ(roc_auc({{0.9, 1}, {0.8, 1}, {0.3, -1}}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc({{0.6, 1}, {0.6, -1}}), 0.5);
  EXPECT_DOUBLE_EQ(roc_auc({{0.8, 1}, {0.2, 1}, {0.5, -1}}), 0.5);
  EXPECT_THROW(roc_auc({{0.1, 1}}), std::invalid_argument);
}

TEST(Auc, EqualsPairCounting) {
  semtrace::detail::Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredPair> s;
    std::vector<double> pos, neg;
    const auto n = 2 + rng.below(60);
    for (std::uint64_t i = 0; i < n; ++i) {
      const double v = static_cast<double>(rng.below(20)) / 10.0;  // coarse grid forces ties
      const int y = (i == 0) ? 1 : (i == 1 ? -1 : (rng.chance(0.3) ? 1 : -1));
      s.push_back({v, y});
      (y == 1 ? pos : neg).push_back(v);
    }
    EXPECT_NEAR(roc_auc(s), oracle::brute_auc(pos, neg), 1e-12);
  }
}

TEST(Auc, CurveEndsAtCorners) {
  const auto pts = roc_curve({{0.9, 1}, {0.4, -1}, {0.4, 1}, {0.1, -1}});
  EXPECT_EQ(pts.front().fpr, 0.0);
  EXPECT_EQ(pts.back().fpr, 1.0);
  EXPECT_EQ(pts.back().tpr, 1.0);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_GE(pts[i].fpr, pts[i - 1].fpr);
    EXPECT_GE(pts[i].tpr, pts[i - 1].tpr);
  }
}

TEST(Retrieval, SelfRetrievalIsPerfect) {
  semtrace::detail::Rng rng(5);
  EmbeddingIndex idx;
  std::vector<FunctionEmbedding> qs;
  std::map<std::string, std::string> gt;
  for (int i = 0; i < 30; ++i) {
    auto e = emb("f" + std::to_string(i), random_vector(rng, 8));
    idx.add(e);
    qs.push_back(e);
    gt[e.fn_id] = e.fn_id;
  }
  EXPECT_DOUBLE_EQ(precision_at_1(qs, idx, gt), 1.0);
  for (std::size_t k : {1, 3, 5, 10}) EXPECT_DOUBLE_EQ(topk_error(qs, idx, gt, k), 0.0);
  EXPECT_DOUBLE_EQ(topk_error(qs, idx, gt, 30), 0.0);
}

TEST(Retrieval, MissingTargetGivesZero) {
  EmbeddingIndex idx;
  idx.add(emb("x", {1, 0}));
  idx.add(emb("y", {0, 1}));
  std::vector<FunctionEmbedding> qs{emb("q", {1, 1})};
  EXPECT_DOUBLE_EQ(precision_at_1(qs, idx, {{"q", "gone"}}), 0.0);
  EXPECT_THROW(precision_at_1(qs, idx, {}), std::invalid_argument);
}

TEST(Retrieval, RandomEmbeddingsNearChance) {
  double total = 0;
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    semtrace::detail::Rng rng(1000 + static_cast<std::uint64_t>(t));
    EmbeddingIndex idx;
    std::vector<FunctionEmbedding> qs;
    std::map<std::string, std::string> gt;
    for (int i = 0; i < 10; ++i) {
      idx.add(emb("t" + std::to_string(i), random_vector(rng, 8)));
      qs.push_back(emb("q" + std::to_string(i), random_vector(rng, 8)));
      gt["q" + std::to_string(i)] = "t" + std::to_string(i);
    }
    total += precision_at_1(qs, idx, gt);
  }
  // mean of 4000 Bernoulli(0.1) draws: sd about 0.005
  EXPECT_NEAR(total / trials, 0.1, 0.02);
}

TEST(Retrieval, TopkErrorMonotone) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    semtrace::detail::Rng rng(seed);
    EmbeddingIndex idx;
    std::vector<FunctionEmbedding> qs;
    std::map<std::string, std::string> gt;
    for (int i = 0; i < 15; ++i) {
      idx.add(emb("t" + std::to_string(i), random_vector(rng, 4)));
      qs.push_back(emb("q" + std::to_string(i), random_vector(rng, 4)));
      gt["q" + std::to_string(i)] = "t" + std::to_string(i);
    }
    double prev = 1.0;
    for (std::size_t k : {1, 3, 5, 10}) {
      const double e = topk_error(qs, idx, gt, k);
      EXPECT_LE(e, prev);
      prev = e;
    }
  }
}

TEST(Kl, Anchors) {
  EXPECT_NEAR(kl_divergence({1, 0}, {0.5, 0.5}), std::log(2.0), 1e-15);
  const Vector p{0.2, 0.3, 0.5};
  EXPECT_EQ(kl_divergence(p, p), 0.0);
  const Vector q{0.6, 0.3, 0.1};
  EXPECT_NE(kl_divergence(p, q), kl_divergence(q, p));
  EXPECT_THROW(kl_divergence({0.5, 0.5}, {1, 0}), std::domain_error);
}

TEST(Kl, ByteCorpora) {
  const std::vector<std::string> a{"r1 := r2 + 0x3\nret\n"}, b{"plus s1, s2, 0x3\nleave\n"};
  EXPECT_EQ(byte_kl_divergence(a, a), 0.0);
  const double ab = byte_kl_divergence(a, b);
  EXPECT_GT(ab, 0.0);
  EXPECT_TRUE(std::isfinite(ab));
  EXPECT_THROW(byte_kl_divergence({""}, a), std::invalid_argument);
}
