// Acceptance suite. Each criterion is one test; a listener prints a single
// PASS/FAIL line per criterion after the run, with the measured numbers.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "semtrace/pipeline.hpp"

using namespace semtrace;
using namespace semtrace::pipeline;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-6;
constexpr double kFormulaTol = 1e-12;
constexpr double kAucGap = 0.05;
constexpr double kPplVocabFraction = 0.5;
constexpr double kBytePplLimit = 128.0;
constexpr double kGradMinutes = 1.0;
constexpr double kTracerMinutes = 1.0;
constexpr double kPretrainMinutes = 15.0;
constexpr double kBenchmarkMinutes = 30.0;

std::map<std::string, std::string>& details() {
  static std::map<std::string, std::string> d;
  return d;
}

void note(const std::string& criterion, const std::string& text) {
  auto& d = details()[criterion];
  d += (d.empty() ? "" : "; ") + text;
}

std::string num(double v, int prec = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

class Stopwatch {
 public:
  double minutes() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() / 60.0;
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

fs::path fresh(const std::string& name) {
  auto p = fs::temp_directory_path() / ("semtrace_accept_" + name);
  fs::remove_all(p);
  return p;
}

void run_or_fail(const char* what, int (*cmd)(const RunConfig&, std::ostream&, std::ostream&), const RunConfig& c) {
  std::ostringstream out, err;
  if (cmd(c, out, err) != 0) throw std::runtime_error(std::string(what) + " failed: " + err.str());
}

double report_auc(const RunConfig& c) {
  return nlohmann::json::parse(io::read_text(c.report_path()))["auc"].get<double>();
}

}  // namespace

TEST(Acceptance, C01_GradientCorrectness) {
  Stopwatch sw;
  const auto ex = fixture::tiny_example();
  ASSERT_EQ(ex.input.size(), 6u);
  double worst = 0;
  std::size_t checked = 0;
  for (auto comb : {nn::ValueCombiner::bilstm, nn::ValueCombiner::mlp, nn::ValueCombiner::sum}) {
    auto cfg = nn::ModelConfig::tiny();
    cfg.combiner = comb;
    auto m = nn::init_model<double>(cfg, ex.vocab.size(), 3);
    oracle::randomize(m, 11);
    std::vector<nn::Tensor<double>*> mlm, pair;
    for (auto* p : oracle::all_params(m)) {
      if (p->name.rfind("sim_", 0) != 0) mlm.push_back(p);
      if (p->name.rfind("head_", 0) != 0) pair.push_back(p);
    }
    auto errs = oracle::grad_check(mlm, [&](nn::Tape<double>& t) { return nn::pretrain_objective(t, m, ex.masked).loss; }, kGradStep);
    for (int y : {1, -1}) {
      auto more = oracle::grad_check(
          pair,
          [&](nn::Tape<double>& t) {
            auto a = nn::embed_function(t, m, {ex.input});
            auto b = nn::embed_function(t, m, {ex.other});
            return t.cosine_embedding_loss(a, b, y, -0.9);
          },
          kGradStep);
      errs.insert(errs.end(), more.begin(), more.end());
    }
    for (const auto& e : errs) {
      worst = std::max(worst, e.rel_error);
      ++checked;
      EXPECT_LT(e.rel_error, kGradTol) << nn::to_string(comb) << " " << e.name;
    }
  }
  note("C01", std::to_string(checked) + " tensor checks, worst rel error " + num(worst, 8) + ", " + num(sw.minutes(), 2) + " min");
  EXPECT_LT(sw.minutes(), kGradMinutes);
}

TEST(Acceptance, C02_TracerMatchesReference) {
  Stopwatch sw;
  std::size_t matched = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto fn = oracle::straight_line_function(10000 + i);
    const auto ref = oracle::ref_run(fn, i + 1);
    const auto got = execute(fn, init_state(fn, i + 1));
    bool same = got.final_state.memory.contents() == ref.mem;
    for (std::size_t r = 0; r < kNumRegisters; ++r) same = same && got.final_state.regs[r] == ref.regs[r];
    matched += same;
    EXPECT_TRUE(same) << render(fn);
  }
  note("C02", std::to_string(matched) + "/1000 end states equal, " + num(sw.minutes(), 2) + " min");
  EXPECT_LT(sw.minutes(), kTracerMinutes);
}

TEST(Acceptance, C03_TransformsPreserveSemantics) {
  std::size_t total = 0, ok = 0;
  for (auto kind : kAllPasses) {
    for (std::uint64_t s = 0; s < 200; ++s) {
      const auto fn = gen_function(20000 + s);
      const auto r = apply_transform(fn, {kind, s});
      for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ++total;
        const bool eq = is_valid(r.fn) && equivalent_on(fn, r.fn, r.mapping, seed);
        ok += eq;
        EXPECT_TRUE(eq) << to_string(kind) << " fn " << s << " seed " << seed;
      }
    }
  }
  note("C03", std::to_string(kAllPasses.size()) + " passes, " + std::to_string(ok) + "/" + std::to_string(total) + " equal");
}

TEST(Acceptance, C04_PretrainingLearns) {
  Stopwatch sw;
  RunConfig c;
  c.dir = fresh("c04");
  c.seed = 2024;
  c.sources = 20;
  c.pairs = 40;
  c.pretrain_sources = 200;
  c.pretrain_epochs = 10;
  for (auto [name, cmd] : std::vector<std::pair<const char*, decltype(&cmd_gen)>>{
           {"gen", cmd_gen}, {"trace", cmd_trace}, {"vocab", cmd_vocab}, {"pretrain", cmd_pretrain}})
    ASSERT_NO_THROW(run_or_fail(name, cmd, c));
  const double v = static_cast<double>(load_vocab(c).size());
  const auto log = nlohmann::json::parse(io::read_text(c.pretrain_log()));
  const auto& last = log["epochs"].back()["heldout_ppl"];
  ASSERT_TRUE(last["code"].is_number() && last["byte"].is_number());
  const double code = last["code"].get<double>(), byte = last["byte"].get<double>();
  note("C04", "|V|=" + std::to_string(static_cast<int>(v)) + ", code PPL " + num(code, 3) + " (limit " + num(kPplVocabFraction * v, 1) +
                  "), byte PPL " + num(byte, 3) + " (limit " + num(kBytePplLimit, 0) + "), " + num(sw.minutes(), 1) + " min");
  EXPECT_LT(code, kPplVocabFraction * v);
  EXPECT_LT(byte, kBytePplLimit);
  EXPECT_LT(sw.minutes(), kPretrainMinutes);
}

// One seeded pair benchmark with three arms sharing corpus, traces and
// vocabulary: pretrained on concrete traces, pretrained on dummy-only traces,
// and no pretraining.
struct ArmResult {
  double pretrained = 0, scratch = 0, dummy_only = 0;
  double minutes_pretrained_vs_scratch = 0;
  std::size_t test_pairs = 0;
};

RunConfig benchmark_config(std::uint64_t seed, const fs::path& dir) {
  RunConfig c;
  c.dir = dir;
  c.seed = seed;
  c.sources = 100;
  c.pairs = 556;
  c.train_fraction = 0.1;  // 56 finetuning pairs, 500 test pairs
  c.ratio = 5.0;
  c.pretrain_sources = 200;
  c.size_min = 4;
  c.size_max = 12;
  c.pretrain_epochs = 8;
  c.pretrain_lr = 1e-3;
  c.finetune_epochs = 30;
  c.finetune_lr = 1e-4;
  return c;
}

ArmResult run_benchmark(std::uint64_t seed) {
  const auto base = benchmark_config(seed, fresh("bench_" + std::to_string(seed)));
  for (auto [name, cmd] : std::vector<std::pair<const char*, decltype(&cmd_gen)>>{{"gen", cmd_gen}, {"trace", cmd_trace}, {"vocab", cmd_vocab}})
    run_or_fail(name, cmd, base);
  auto scratch = base, dummy = base;
  scratch.dir = fresh("bench_" + std::to_string(seed) + "_scratch");
  dummy.dir = fresh("bench_" + std::to_string(seed) + "_dummy");
  fs::copy(base.dir, scratch.dir, fs::copy_options::recursive);
  fs::copy(base.dir, dummy.dir, fs::copy_options::recursive);
  scratch.scratch = true;
  dummy.dummy_only = true;

  ArmResult r;
  Stopwatch sw;
  for (auto [name, cmd] : std::vector<std::pair<const char*, decltype(&cmd_gen)>>{
           {"pretrain", cmd_pretrain}, {"finetune", cmd_finetune}, {"embed", cmd_embed}, {"eval", cmd_eval}})
    run_or_fail(name, cmd, base);
  for (auto [name, cmd] : std::vector<std::pair<const char*, decltype(&cmd_gen)>>{{"finetune", cmd_finetune}, {"embed", cmd_embed}, {"eval", cmd_eval}})
    run_or_fail(name, cmd, scratch);
  r.minutes_pretrained_vs_scratch = sw.minutes();
  for (auto [name, cmd] : std::vector<std::pair<const char*, decltype(&cmd_gen)>>{
           {"pretrain", cmd_pretrain}, {"finetune", cmd_finetune}, {"embed", cmd_embed}, {"eval", cmd_eval}})
    run_or_fail(name, cmd, dummy);
  r.pretrained = report_auc(base);
  r.scratch = report_auc(scratch);
  r.dummy_only = report_auc(dummy);
  r.test_pairs = nlohmann::json::parse(io::read_text(base.report_path()))["test_pairs"].get<std::size_t>();
  return r;
}

const std::vector<ArmResult>& benchmark_results() {
  static const std::vector<ArmResult> results = [] {
    std::vector<ArmResult> rs;
    for (std::uint64_t seed : {101, 202, 303}) {
      rs.push_back(run_benchmark(seed));
      const auto& r = rs.back();
      std::cout << "benchmark seed " << seed << ": pretrained " << num(r.pretrained) << ", scratch " << num(r.scratch) << ", dummy-only "
                << num(r.dummy_only) << std::endl;
    }
    return rs;
  }();
  return results;
}

TEST(Acceptance, C05_PretrainingHelps) {
  std::vector<ArmResult> rs;
  ASSERT_NO_THROW(rs = benchmark_results());
  double pre = 0, scr = 0, minutes = 0;
  for (const auto& r : rs) {
    pre += r.pretrained / 3;
    scr += r.scratch / 3;
    minutes += r.minutes_pretrained_vs_scratch;
    EXPECT_EQ(r.test_pairs, 500u);
  }
  note("C05", "mean AUC pretrained " + num(pre) + " vs scratch " + num(scr) + ", gap " + num(pre - scr) + " (need >= " + num(kAucGap, 2) +
                  "), " + num(minutes, 1) + " min");
  EXPECT_GE(pre - scr, kAucGap);
  EXPECT_LT(minutes, kBenchmarkMinutes);
}

TEST(Acceptance, C06_TraceValuesHelp) {
  std::vector<ArmResult> rs;
  ASSERT_NO_THROW(rs = benchmark_results());
  double pre = 0, dummy = 0;
  for (const auto& r : rs) {
    pre += r.pretrained / 3;
    dummy += r.dummy_only / 3;
  }
  note("C06", "mean AUC concrete " + num(pre) + " vs dummy-only " + num(dummy) + ", gap " + num(pre - dummy));
  EXPECT_GE(pre, dummy);
}

TEST(Acceptance, C07_LossFormulas) {
  double worst = 0;
  auto check = [&](double got, double want) {
    worst = std::max(worst, std::abs(got - want));
    EXPECT_NEAR(got, want, kFormulaTol);
  };
  // alpha = 1/8: eight byte terms of equal size weigh as much as the code term
  check(nn::pretrain_loss_value({2.0}, {{1, 1, 1, 1, 1, 1, 1, 1}}, {true}, 0.125), 3.0);
  check(nn::pretrain_loss_value({1.0}, {{1, 1, 1, 1, 1, 1, 1, 1}}, {true}, 0.125) - 1.0, 1.0);
  check(nn::pretrain_loss_value({2.0, 0.5}, {{9, 9, 9, 9, 9, 9, 9, 9}, {9, 9, 9, 9, 9, 9, 9, 9}}, {false, false}, 0.125), 2.5);
  check(finetune_loss({0.3, -2}, {0.3, -2}, 1, 0.1), 0.0);
  check(finetune_loss({1, 0}, {0.5, std::sqrt(0.75)}, -1, 0.1), 0.4);
  check(finetune_loss({1, 0}, {0.05, std::sqrt(1 - 0.05 * 0.05)}, -1, 0.1), 0.0);
  note("C07", "worst abs error " + num(worst, 16));
}

TEST(Acceptance, C08_Metrics) {
  semtrace::detail::Rng rng(808);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<ScoredPair> s;
    std::vector<double> pos, neg;
    const auto n = 10 + rng.below(100);
    for (std::size_t i = 0; i < n; ++i) {
      const double score = static_cast<double>(rng.below(20)) / 20.0;  // coarse grid forces ties
      const int label = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.below(2));
      s.push_back({score, label});
      (label ? pos : neg).push_back(score);
    }
    const double d = std::abs(roc_auc(s) - oracle::brute_auc(pos, neg));
    worst = std::max(worst, d);
    EXPECT_LE(d, kFormulaTol);
  }
  std::vector<FunctionEmbedding> es;
  std::map<std::string, std::string> gt;
  for (int i = 0; i < 50; ++i) {
    FunctionEmbedding e{"f" + std::to_string(i), "archA", "", {}};
    for (int k = 0; k < 16; ++k) e.vector.push_back(rng.uniform() - 0.5);
    gt[e.fn_id] = e.fn_id;
    es.push_back(e);
  }
  EmbeddingIndex index;
  for (const auto& e : es) index.add(e);
  const double p1 = precision_at_1(es, index, gt);
  const double self_err = topk_error(es, index, gt, 1);
  EXPECT_EQ(p1, 1.0);
  EXPECT_EQ(self_err, 0.0);
  std::vector<FunctionEmbedding> noisy = es;
  for (auto& e : noisy)
    for (auto& x : e.vector) x += 0.6 * (rng.uniform() - 0.5);
  bool monotone = true;
  double prev = 1.0;
  for (std::size_t k = 1; k <= 50; ++k) {
    const double err = topk_error(noisy, index, gt, k);
    monotone = monotone && err <= prev;
    prev = err;
  }
  EXPECT_TRUE(monotone);
  note("C08", "worst AUC difference " + num(worst, 16) + ", self-retrieval P@1 " + num(p1, 1) + ", top-1 error " + num(self_err, 1) +
                  ", top-k error " + (monotone ? "monotone" : "NOT monotone"));
}

TEST(Acceptance, C09_Determinism) {
  auto one_run = [](const std::string& name) {
    RunConfig c;
    c.dir = fresh(name);
    c.seed = 909;
    c.sources = 40;
    c.pretrain_sources = 40;
    c.pairs = 120;
    c.train_fraction = 0.5;
    c.pretrain_epochs = 1;
    c.finetune_epochs = 1;
    for (auto [n, cmd] : std::vector<std::pair<const char*, decltype(&cmd_gen)>>{{"gen", cmd_gen},
                                                                                {"trace", cmd_trace},
                                                                                {"vocab", cmd_vocab},
                                                                                {"pretrain", cmd_pretrain},
                                                                                {"finetune", cmd_finetune},
                                                                                {"embed", cmd_embed},
                                                                                {"eval", cmd_eval}})
      run_or_fail(n, cmd, c);
    return io::read_text(c.report_path());
  };
  std::string a, b;
  ASSERT_NO_THROW(a = one_run("c09_a"));
  ASSERT_NO_THROW(b = one_run("c09_b"));
  EXPECT_EQ(a, b);
  note("C09", "report " + std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "DIFFERENT"));
}

TEST(Acceptance, C10_EncodingInvariants) {
  std::vector<MicroTrace> ts;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto fn = gen_function(30000 + s, {2, 80}, s % 2 ? DialectId::arch_b : DialectId::arch_a);
    ts.push_back(s % 5 == 4 ? dummy_trace(fn) : micro_execute(fn, s));
  }
  const auto v = build_vocab(ts);
  std::size_t failures = 0;
  auto expect = [&](bool ok, const std::string& what) {
    failures += !ok;
    EXPECT_TRUE(ok) << what;
  };
  semtrace::detail::Rng rng(1010);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto e = tokenize_trace(ts[i], v);
    expect(e.aligned(), "five sequences aligned");
    const auto len = 8 + rng.below(120);
    const auto parts = split_subsequences(e, len);
    bool bounded = true;
    for (const auto& p : parts) bounded = bounded && p.size() <= len && p.aligned();
    expect(concat(parts) == e, "subsequences concatenate back");
    expect(bounded, "subsequences within length");
    const auto m = apply_mask(e, 0.15, i);
    expect(m.unmask() == e, "mask reversible");
    for (auto p : m.positions) expect(m.input.code[p] == Vocab::kMask && is_dummy(m.input.bytes[p]), "masked slot cleared");
    // big-endian: step values re-encode to the stored bytes
    std::size_t k = 0;
    for (const auto& st : ts[i].steps)
      for (const auto& val : st.values) {
        const auto bytes = encode_value_bytes(val);
        bool be = bytes == e.bytes[k++];
        if (val)
          for (std::size_t j = 0; j < 8; ++j) be = be && bytes[j] == ((*val >> (8 * (7 - j))) & 0xff);
        expect(be, "big-endian value bytes");
      }
  }
  note("C10", "1000 traces, " + std::to_string(failures) + " property failures");
}

namespace {

struct Criterion {
  const char* test;
  const char* key;
  const char* title;
};

constexpr Criterion kCriteria[] = {
    {"C01_GradientCorrectness", "C01", "gradient correctness"},
    {"C02_TracerMatchesReference", "C02", "micro-tracer matches reference interpreter"},
    {"C03_TransformsPreserveSemantics", "C03", "transform semantic preservation"},
    {"C04_PretrainingLearns", "C04", "pretraining learns"},
    {"C05_PretrainingHelps", "C05", "pretraining helps finetuning"},
    {"C06_TraceValuesHelp", "C06", "trace values help"},
    {"C07_LossFormulas", "C07", "loss formulas"},
    {"C08_Metrics", "C08", "metrics"},
    {"C09_Determinism", "C09", "determinism"},
    {"C10_EncodingInvariants", "C10", "encoding invariants"},
};

class Summary : public ::testing::EmptyTestEventListener {
 public:
  void OnTestEnd(const ::testing::TestInfo& info) override { passed_[info.name()] = info.result()->Passed(); }
  void OnTestProgramEnd(const ::testing::UnitTest&) override {
    std::cout << "\n==== acceptance summary ====\n";
    for (const auto& c : kCriteria) {
      const auto it = passed_.find(c.test);
      const char* status = it == passed_.end() ? "SKIP" : it->second ? "PASS" : "FAIL";
      std::cout << status << "  " << c.key << " " << c.title;
      if (auto d = details().find(c.key); d != details().end()) std::cout << ": " << d->second;
      std::cout << "\n";
    }
    std::cout.flush();
  }

 private:
  std::map<std::string, bool> passed_;
};

}  // namespace

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new Summary);
  return RUN_ALL_TESTS();
}
