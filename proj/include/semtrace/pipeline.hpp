#pragma once

// The batch pipeline behind the command-line tool. Every command reads and
// writes a run directory:
//
//   functions/<id>.irfn   manifest.json   traces.jsonl   vocab.txt
//   checkpoints/pretrain_epoch_<k>.ckpt   pretrain.ckpt   pretrain_log.json
//   finetune.ckpt   finetune_log.json   embeddings.jsonl   report.json   roc.txt

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "semtrace/corpus.hpp"
#include "semtrace/encoding.hpp"
#include "semtrace/io.hpp"
#include "semtrace/neural/checkpoint.hpp"
#include "semtrace/neural/model.hpp"
#include "semtrace/neural/optim.hpp"
#include "semtrace/similarity.hpp"
#include "semtrace/tracer.hpp"

namespace semtrace::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  fs::path dir = "run";
  std::string checkpoint;  // overrides the command's default input checkpoint
  std::string report;      // overrides <dir>/report.json
  std::uint64_t seed = 0;

  // corpus
  std::size_t sources = 100;           // sources behind the pair benchmark
  std::size_t pretrain_sources = 100;  // disjoint sources used only for pretraining
  std::size_t variants = 2;            // transformed variants per pretraining source
  std::size_t size_min = 8;
  std::size_t size_max = 24;
  std::size_t pairs = 600;
  double ratio = 5.0;  // dissimilar pairs per similar pair
  double train_fraction = 0.1;
  std::size_t max_pipeline = 3;

  // tracing
  TracerConfig tracer;
  std::size_t traces_per_fn = 3;

  // model and training
  std::string preset = "desk";
  std::map<std::string, std::string> model;  // overrides of ModelConfig fields
  double mask_percent = 0.15;
  double holdout = 0.1;
  std::size_t pretrain_epochs = 10;
  std::size_t finetune_epochs = 30;
  double pretrain_lr = 5e-4;
  double finetune_lr = 1e-4;
  std::size_t batch = 8;
  std::size_t finetune_batch = 8;
  std::size_t accum = 1;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  double margin = 0.1;
  bool dummy_only = false;  // pretrain on traces stripped of their values
  bool scratch = false;     // finetune from a fresh initialisation

  std::size_t jobs = 1;

  fs::path functions_dir() const { return dir / "functions"; }
  fs::path manifest_path() const { return dir / "manifest.json"; }
  fs::path traces_path() const { return dir / "traces.jsonl"; }
  fs::path vocab_path() const { return dir / "vocab.txt"; }
  fs::path pretrain_ckpt() const { return dir / "pretrain.ckpt"; }
  fs::path finetune_ckpt() const { return dir / "finetune.ckpt"; }
  fs::path pretrain_log() const { return dir / "pretrain_log.json"; }
  fs::path finetune_log() const { return dir / "finetune_log.json"; }
  fs::path embeddings_path() const { return dir / "embeddings.jsonl"; }
  fs::path report_path() const { return report.empty() ? dir / "report.json" : fs::path(report); }
  fs::path roc_path() const { return dir / "roc.txt"; }

  nn::ModelConfig model_config() const {
    auto c = nn::ModelConfig::preset(preset);
    c.apply_kv(model);
    c.validate();
    return c;
  }

  /// Applies `key = value` settings. Model fields use a `model.` prefix.
  void apply(const std::map<std::string, std::string>& kv);
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::uint64_t to_u64(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos, 0);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config '" + k + "': expected an unsigned integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config '" + k + "': expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& k, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("config '" + k + "': expected a boolean, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline void RunConfig::apply(const std::map<std::string, std::string>& kv) {
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k.rfind("model.", 0) == 0) model[k.substr(6)] = v;
    else if (k == "dir") dir = v;
    else if (k == "checkpoint") checkpoint = v;
    else if (k == "report") report = v;
    else if (k == "seed") seed = to_u64(k, v);
    else if (k == "sources") sources = to_u64(k, v);
    else if (k == "pretrain_sources") pretrain_sources = to_u64(k, v);
    else if (k == "variants") variants = to_u64(k, v);
    else if (k == "size_min") size_min = to_u64(k, v);
    else if (k == "size_max") size_max = to_u64(k, v);
    else if (k == "pairs") pairs = to_u64(k, v);
    else if (k == "ratio") ratio = to_double(k, v);
    else if (k == "train_fraction") train_fraction = to_double(k, v);
    else if (k == "max_pipeline") max_pipeline = to_u64(k, v);
    else if (k == "step_budget") tracer.step_budget = to_u64(k, v);
    else if (k == "stack_size") tracer.stack_size = to_u64(k, v);
    else if (k == "traces_per_fn") traces_per_fn = to_u64(k, v);
    else if (k == "preset") preset = v;
    else if (k == "mask_percent") mask_percent = to_double(k, v);
    else if (k == "holdout") holdout = to_double(k, v);
    else if (k == "pretrain_epochs") pretrain_epochs = to_u64(k, v);
    else if (k == "finetune_epochs") finetune_epochs = to_u64(k, v);
    else if (k == "pretrain_lr") pretrain_lr = to_double(k, v);
    else if (k == "finetune_lr") finetune_lr = to_double(k, v);
    else if (k == "batch") batch = to_u64(k, v);
    else if (k == "finetune_batch") finetune_batch = to_u64(k, v);
    else if (k == "accum") accum = to_u64(k, v);
    else if (k == "weight_decay") weight_decay = to_double(k, v);
    else if (k == "clip_norm") clip_norm = to_double(k, v);
    else if (k == "margin") margin = to_double(k, v);
    else if (k == "dummy_only") dummy_only = to_bool(k, v);
    else if (k == "scratch") scratch = to_bool(k, v);
    else if (k == "jobs") jobs = to_u64(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  if (margin < 0 || margin > 0.5) throw ConfigError("margin must be in [0, 0.5]");
  if (batch == 0 || finetune_batch == 0 || accum == 0) throw ConfigError("batch sizes and accum must be positive");
  if (holdout <= 0 || holdout >= 1) throw ConfigError("holdout must be in (0, 1)");
  if (mask_percent <= 0 || mask_percent > 1) throw ConfigError("mask_percent must be in (0, 1]");
  if (traces_per_fn == 0) throw ConfigError("traces_per_fn must be positive");
}

/// Flat `key = value` lines; `#` starts a comment.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

/// Config file settings, then SEMTRACE_SEED when no seed was given, then
/// flags, which win.
inline RunConfig resolve_config(const std::optional<std::string>& config_text, const std::map<std::string, std::string>& flags) {
  std::map<std::string, std::string> kv;
  if (config_text) kv = parse_config_text(*config_text);
  if (!kv.count("seed") && !flags.count("seed"))
    if (const char* env = std::getenv("SEMTRACE_SEED"); env && *env) kv["seed"] = env;
  for (const auto& [k, v] : flags) kv[k] = v;
  RunConfig cfg;
  cfg.apply(kv);
  return cfg;
}

// ---------------------------------------------------------------------------
// Helpers

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads. Exceptions are
/// collected per index instead of aborting the batch.
template <class F>
std::vector<std::string> parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  std::vector<std::string> errors(n);
  auto run = [&](std::size_t i) {
    try {
      f(i);
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (errors[i].empty()) errors[i] = "error";
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) run(i);
      });
    for (auto& th : pool) th.join();
  }
  return errors;
}

inline Vocab load_vocab(const RunConfig& c) { return Vocab::from_text(io::read_text(c.vocab_path())); }

inline std::string checkpoint_precision(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw nn::CheckpointError("cannot open checkpoint " + p.string());
  for (std::string line; std::getline(f, line) && line != "end";)
    if (line.rfind("config precision ", 0) == 0) return line.substr(17);
  throw nn::CheckpointError(p.string() + ": no precision recorded");
}

/// Calls f(Model<T>&) with the checkpoint loaded at its stored precision.
template <class F>
decltype(auto) with_checkpoint(const fs::path& p, const Vocab& vocab, F&& f) {
  if (checkpoint_precision(p) == "f64") {
    auto m = nn::load_checkpoint_for<double>(p.string(), vocab);
    return f(m);
  }
  auto m = nn::load_checkpoint_for<float>(p.string(), vocab);
  return f(m);
}

inline std::vector<MicroTrace> strip_values(std::vector<MicroTrace> ts) {
  for (auto& t : ts)
    for (auto& st : t.steps)
      for (auto& v : st.values) v.reset();
  return ts;
}

/// Traces grouped by function id, in file order.
inline std::map<std::string, std::vector<MicroTrace>> load_traces(const RunConfig& c) {
  std::map<std::string, std::vector<MicroTrace>> by_fn;
  for (auto& r : io::read_traces(c.traces_path())) by_fn[r.trace.fn_id].push_back(std::move(r.trace));
  return by_fn;
}

inline std::map<std::string, Function> load_functions(const RunConfig& c, const io::CorpusManifest& m) {
  std::map<std::string, Function> fns;
  for (const auto& e : m.functions) fns.emplace(e.id, io::read_function(io::function_path(c.functions_dir(), e.id)));
  return fns;
}

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// gen

inline int cmd_gen(const RunConfig& c, std::ostream& out, std::ostream& err) {
  try {
    const SizeRange size{c.size_min, c.size_max};
    std::vector<Function> sources;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < c.sources; ++i) {
      const auto s = semtrace::detail::mix_seed(c.seed, 2 * i);
      Function fn = gen_function(s, size, DialectId::arch_a, c.tracer);
      fn.id = "s" + std::to_string(i);
      sources.push_back(std::move(fn));
      seeds.push_back(s);
    }
    PairConfig pc;
    pc.num_pairs = c.pairs;
    pc.negatives_per_positive = c.ratio;
    pc.train_fraction = c.train_fraction;
    pc.max_pipeline = c.max_pipeline;
    pc.code_base = c.tracer.code_base;
    const auto ds = build_pairs(sources, seeds, pc, c.seed);

    io::CorpusManifest man;
    man.params = {{"seed", std::to_string(c.seed)},
                  {"sources", std::to_string(c.sources)},
                  {"pretrain_sources", std::to_string(c.pretrain_sources)},
                  {"variants", std::to_string(c.variants)},
                  {"size", std::to_string(c.size_min) + "-" + std::to_string(c.size_max)},
                  {"pairs", std::to_string(c.pairs)},
                  {"ratio", fmt(c.ratio, 3)},
                  {"train_fraction", fmt(c.train_fraction, 3)}};
    std::vector<Function> fns;

    semtrace::detail::Rng rng(semtrace::detail::mix_seed(c.seed, 0x70726574));
    for (std::size_t i = 0; i < c.pretrain_sources; ++i) {
      const auto s = semtrace::detail::mix_seed(c.seed, 2 * i + 1);
      Function src = gen_function(s, size, DialectId::arch_a, c.tracer);
      src.id = "p" + std::to_string(i);
      man.functions.push_back({src.id, src.dialect, s, {}, Split::pretrain});
      for (std::size_t k = 0; k < c.variants; ++k) {
        const Pipeline p = random_pipeline(rng, 1, c.max_pipeline);
        auto r = apply_pipeline(src, p, c.tracer.code_base);
        r.fn.id = src.id + "_v" + std::to_string(k);
        man.functions.push_back({r.fn.id, r.fn.dialect, s, p, Split::pretrain});
        fns.push_back(std::move(r.fn));
      }
      fns.push_back(std::move(src));
    }
    for (const auto& f : ds.functions) {
      man.functions.push_back({f.fn.id, f.fn.dialect, f.source_seed, f.pipeline, f.split});
      fns.push_back(f.fn);
    }
    for (const auto& p : ds.pairs) man.pairs.push_back({ds.functions[p.a].fn.id, ds.functions[p.b].fn.id, p.y, p.split});

    fs::remove_all(c.functions_dir());
    fs::create_directories(c.functions_dir());
    for (const auto& f : fns) io::write_function(c.functions_dir(), f);
    io::write_manifest(c.manifest_path(), man);

    std::map<Split, std::size_t> nf;
    for (const auto& e : man.functions) ++nf[e.split];
    out << "functions " << man.functions.size() << " (pretrain " << nf[Split::pretrain] << ", train " << nf[Split::train]
        << ", test " << nf[Split::test] << ")\n";
    out << "pairs " << man.pairs.size() << " (train " << ds.count(Split::train) << ", test " << ds.count(Split::test) << ")\n";
    return 0;
  } catch (const std::exception& e) {
    err << "gen: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// trace

inline std::vector<std::uint64_t> trace_seeds(const RunConfig& c, const std::string& fn_id) {
  std::vector<std::uint64_t> s;
  for (std::size_t k = 0; k < c.traces_per_fn; ++k) s.push_back(semtrace::detail::mix_seed(semtrace::detail::mix_seed(c.seed, fnv1a(fn_id)), k));
  return s;
}

inline int cmd_trace(const RunConfig& c, std::ostream& out, std::ostream& err) {
  io::CorpusManifest man;
  try {
    man = io::read_manifest(c.manifest_path());
  } catch (const std::exception& e) {
    err << "trace: " << e.what() << "\n";
    return 1;
  }
  std::vector<std::vector<io::TraceRecord>> per_fn(man.functions.size());
  const auto errors = parallel_for(man.functions.size(), c.jobs, [&](std::size_t i) {
    const auto& entry = man.functions[i];
    const Function fn = io::read_function(io::function_path(c.functions_dir(), entry.id));
    if (fn.id != entry.id) throw std::runtime_error("file declares id '" + fn.id + "', manifest expects '" + entry.id + "'");
    if (auto v = validate(fn); !v.empty()) throw std::runtime_error(v.front().message);
    const auto seeds = trace_seeds(c, fn.id);
    auto traces = trace_batch(fn, seeds, c.tracer);
    for (std::size_t k = 0; k < traces.size(); ++k)
      per_fn[i].push_back({std::move(traces[k]), k < seeds.size() ? std::optional(seeds[k]) : std::nullopt});
  });
  std::vector<io::TraceRecord> all;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < per_fn.size(); ++i) {
    if (!errors[i].empty()) {
      ++failed;
      err << "trace: " << man.functions[i].id << ": " << errors[i] << "\n";
      continue;
    }
    for (auto& r : per_fn[i]) all.push_back(std::move(r));
  }
  try {
    io::write_traces(c.traces_path(), all);
  } catch (const std::exception& e) {
    err << "trace: " << e.what() << "\n";
    return 1;
  }
  out << "traces " << all.size() << " for " << (man.functions.size() - failed) << " functions";
  if (failed) out << ", " << failed << " failed";
  out << "\n";
  return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// vocab

inline int cmd_vocab(const RunConfig& c, std::ostream& out, std::ostream& err) {
  try {
    std::vector<MicroTrace> ts;
    for (auto& [id, v] : load_traces(c))
      for (auto& t : v) ts.push_back(std::move(t));
    const Vocab v = build_vocab(ts);
    io::write_text(c.vocab_path(), v.to_text());
    out << "vocab " << v.size() << " tokens, hash " << nn::detail::hex64(v.hash()) << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "vocab: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainData {
  std::vector<EncodedInput> train;
  std::vector<MaskedInput> eval;  // fixed masks for held-out perplexity
  std::size_t train_functions = 0;
  std::size_t eval_functions = 0;
};

inline PretrainData pretrain_data(const RunConfig& c, const io::CorpusManifest& man, const Vocab& vocab, std::size_t max_len) {
  auto traces = load_traces(c);
  std::vector<std::string> ids;
  for (const auto& e : man.functions)
    if (e.split == Split::pretrain) ids.push_back(e.id);
  if (ids.empty())
    for (const auto& e : man.functions)
      if (e.split == Split::train) ids.push_back(e.id);
  if (ids.size() < 2) throw std::invalid_argument("pretrain: need at least two functions with traces");
  semtrace::detail::Rng rng(semtrace::detail::mix_seed(c.seed, 0x686f6c64));
  for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[rng.below(i + 1)]);
  const auto n_eval = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(c.holdout * static_cast<double>(ids.size()))), 1, ids.size() - 1);

  PretrainData d;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = traces.find(ids[i]);
    if (it == traces.end()) throw std::runtime_error("pretrain: no traces for " + ids[i]);
    const auto ts = c.dummy_only ? strip_values(it->second) : it->second;
    const bool eval = i < n_eval;
    (eval ? d.eval_functions : d.train_functions) += 1;
    for (const auto& t : ts)
      for (auto& part : split_subsequences(tokenize_trace(t, vocab), max_len)) {
        if (eval)
          d.eval.push_back(apply_mask(part, c.mask_percent, semtrace::detail::mix_seed(c.seed ^ 0x6576616c, d.eval.size())));
        else
          d.train.push_back(std::move(part));
      }
  }
  return d;
}

template <class T>
nn::CeStats evaluate_ppl(nn::Model<T>& m, const std::vector<MaskedInput>& eval, std::size_t jobs) {
  std::vector<nn::CeStats> stats(eval.size());
  const auto errors = parallel_for(eval.size(), jobs, [&](std::size_t i) {
    nn::Tape<T> tape;
    stats[i] = nn::pretrain_objective(tape, m, eval[i]).stats;
  });
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("perplexity: " + e);
  nn::CeStats total;
  for (const auto& s : stats) total.merge(s);
  return total;
}

inline json ppl_json(const nn::CeStats& s) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"code", num(s.code_ppl())}, {"byte", num(s.byte_ppl())}, {"combined", num(s.combined_ppl())}};
}

template <class T>
void pretrain_model(const RunConfig& c, nn::Model<T>& m, const PretrainData& d, std::uint64_t vocab_hash, std::ostream& out) {
  const std::size_t per_update = c.batch * c.accum;
  const std::size_t updates_per_epoch = std::max<std::size_t>(1, (d.train.size() + per_update - 1) / per_update);
  nn::AdamConfig ac;
  ac.lr = c.pretrain_lr;
  ac.weight_decay = c.weight_decay;
  ac.clip_norm = c.clip_norm;
  ac.warmup_steps = updates_per_epoch;  // ramp up over the first epoch
  nn::AdamW<T> opt(ac);
  semtrace::detail::Rng drop(semtrace::detail::mix_seed(c.seed, 0x64726f70));
  nn::ForwardOptions<T> fo{true, &drop, nullptr};

  json log = json::array();
  auto record = [&](std::size_t epoch, double train_loss) {
    const auto s = evaluate_ppl(m, d.eval, c.jobs);
    log.push_back({{"epoch", epoch}, {"train_loss", train_loss}, {"heldout_ppl", ppl_json(s)}});
    out << "epoch " << epoch << " loss " << fmt(train_loss) << " heldout ppl code " << fmt(s.code_ppl(), 3) << " byte "
        << fmt(s.byte_ppl(), 3) << "\n";
    return s.code_ppl();
  };
  // the kept weights are those of the epoch with the lowest held-out code PPL
  std::size_t best_epoch = 0;
  double best_ppl = std::numeric_limits<double>::infinity();
  record(0, std::nan(""));
  fs::create_directories(c.dir / "checkpoints");
  std::vector<std::size_t> order(d.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= c.pretrain_epochs; ++epoch) {
    semtrace::detail::Rng rng(semtrace::detail::mix_seed(c.seed, 0x65700000 + epoch));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    double loss_sum = 0;
    std::size_t in_update = 0;
    m.zero_grad();
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto mi = apply_mask(d.train[order[k]], c.mask_percent, rng.next());
      nn::Tape<T> tape;
      auto terms = nn::pretrain_objective(tape, m, mi, fo);
      const T w = T(1) / static_cast<T>(mi.positions.size() * per_update);
      tape.backward(tape.scale(terms.loss, w));
      loss_sum += static_cast<double>(tape.value(terms.loss)(0, 0)) / static_cast<double>(mi.positions.size());
      if (++in_update == per_update || k + 1 == order.size()) {
        opt.step(m, static_cast<double>(per_update) / static_cast<double>(in_update));
        in_update = 0;
      }
    }
    const double ppl = record(epoch, loss_sum / static_cast<double>(order.size()));
    const auto ckpt = c.dir / "checkpoints" / ("pretrain_epoch_" + std::to_string(epoch) + ".ckpt");
    nn::save_checkpoint(ckpt.string(), m, vocab_hash, {{"stage", "pretrain"}, {"epoch", std::to_string(epoch)}});
    if (ppl < best_ppl) {
      best_ppl = ppl;
      best_epoch = epoch;
    }
  }
  if (best_epoch == 0)
    nn::save_checkpoint(c.pretrain_ckpt().string(), m, vocab_hash, {{"stage", "pretrain"}, {"epoch", "0"}});
  else
    fs::copy_file(c.dir / "checkpoints" / ("pretrain_epoch_" + std::to_string(best_epoch) + ".ckpt"), c.pretrain_ckpt(),
                  fs::copy_options::overwrite_existing);
  out << "kept epoch " << best_epoch << "\n";
  json doc{{"train_sequences", d.train.size()},
           {"heldout_sequences", d.eval.size()},
           {"train_functions", d.train_functions},
           {"heldout_functions", d.eval_functions},
           {"dummy_only", c.dummy_only},
           {"best_epoch", best_epoch},
           {"epochs", log}};
  io::write_text(c.pretrain_log(), doc.dump(1) + "\n");
}

inline int cmd_pretrain(const RunConfig& c, std::ostream& out, std::ostream& err) {
  try {
    const auto vocab = load_vocab(c);
    const auto man = io::read_manifest(c.manifest_path());
    const auto cfg = c.model_config();
    const auto data = pretrain_data(c, man, vocab, cfg.max_len);
    out << "pretrain on " << data.train.size() << " sequences from " << data.train_functions << " functions, "
        << data.eval.size() << " held-out sequences\n";
    const auto init_seed = semtrace::detail::mix_seed(c.seed, 0x696e6974);
    if (cfg.precision == "f64") {
      auto m = nn::init_model<double>(cfg, vocab.size(), init_seed);
      pretrain_model(c, m, data, vocab.hash(), out);
    } else {
      auto m = nn::init_model<float>(cfg, vocab.size(), init_seed);
      pretrain_model(c, m, data, vocab.hash(), out);
    }
    return 0;
  } catch (const std::exception& e) {
    err << "pretrain: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// finetune

/// Static-code subsequences for every function in the manifest.
inline std::map<std::string, std::vector<EncodedInput>> static_inputs(const RunConfig& c, const io::CorpusManifest& man,
                                                                      const Vocab& vocab, std::size_t max_len,
                                                                      std::optional<Split> only = std::nullopt) {
  std::map<std::string, std::vector<EncodedInput>> out;
  for (const auto& e : man.functions)
    if (!only || e.split == *only)
      out.emplace(e.id, static_parts(io::read_function(io::function_path(c.functions_dir(), e.id)), vocab, max_len));
  return out;
}

template <class T>
void finetune_model(const RunConfig& c, nn::Model<T>& m, const io::CorpusManifest& man, const Vocab& vocab, std::ostream& out) {
  const auto inputs = static_inputs(c, man, vocab, m.cfg.max_len, Split::train);
  std::vector<PairExample> pairs;
  for (const auto& p : man.pairs)
    if (p.split == Split::train) pairs.push_back({&inputs.at(p.a), &inputs.at(p.b), p.y});
  if (pairs.empty()) throw std::invalid_argument("finetune: no training pairs");
  nn::AdamConfig ac;
  ac.lr = c.finetune_lr;
  ac.weight_decay = c.weight_decay;
  ac.clip_norm = c.clip_norm;
  nn::AdamW<T> opt(ac);
  json log = json::array();
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= c.finetune_epochs; ++epoch) {
    semtrace::detail::Rng rng(semtrace::detail::mix_seed(c.seed, 0x66740000 + epoch));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    double loss_sum = 0;
    std::size_t batches = 0, in_update = 0;
    m.zero_grad();
    for (std::size_t b = 0; b < order.size(); b += c.finetune_batch) {
      std::vector<PairExample> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + c.finetune_batch); ++k) batch.push_back(pairs[order[k]]);
      loss_sum += accumulate_pair_loss(m, batch, c.margin, 1.0 / static_cast<double>(c.accum));
      ++batches;
      if (++in_update == c.accum || b + c.finetune_batch >= order.size()) {
        opt.step(m, static_cast<double>(c.accum) / static_cast<double>(in_update));
        in_update = 0;
      }
    }
    const double mean = loss_sum / static_cast<double>(batches);
    log.push_back({{"epoch", epoch}, {"train_loss", mean}});
    out << "epoch " << epoch << " pair loss " << fmt(mean) << "\n";
  }
  nn::save_checkpoint(c.finetune_ckpt().string(), m, vocab.hash(),
                      {{"stage", "finetune"}, {"epoch", std::to_string(c.finetune_epochs)}, {"scratch", c.scratch ? "1" : "0"}});
  io::write_text(c.finetune_log(), json{{"train_pairs", pairs.size()}, {"scratch", c.scratch}, {"epochs", log}}.dump(1) + "\n");
}

inline int cmd_finetune(const RunConfig& c, std::ostream& out, std::ostream& err) {
  try {
    const auto vocab = load_vocab(c);
    const auto man = io::read_manifest(c.manifest_path());
    if (c.scratch) {
      const auto cfg = c.model_config();
      const auto init_seed = semtrace::detail::mix_seed(c.seed, 0x696e6974);
      out << "finetune from scratch\n";
      if (cfg.precision == "f64") {
        auto m = nn::init_model<double>(cfg, vocab.size(), init_seed);
        finetune_model(c, m, man, vocab, out);
      } else {
        auto m = nn::init_model<float>(cfg, vocab.size(), init_seed);
        finetune_model(c, m, man, vocab, out);
      }
    } else {
      const fs::path ck = c.checkpoint.empty() ? c.pretrain_ckpt() : fs::path(c.checkpoint);
      out << "finetune from " << ck.string() << "\n";
      with_checkpoint(ck, vocab, [&](auto& m) { finetune_model(c, m, man, vocab, out); });
    }
    return 0;
  } catch (const std::exception& e) {
    err << "finetune: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// embed / search

/// Embeddings stored at single precision, so queries are rounded the same way.
inline Vector as_stored(Vector v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
  return v;
}

template <class T>
std::vector<FunctionEmbedding> embed_functions(nn::Model<T>& m, const Vocab& vocab, const std::vector<Function>& fns,
                                               const std::vector<std::string>& pipelines, std::size_t jobs,
                                               std::vector<std::string>* errors = nullptr) {
  std::vector<FunctionEmbedding> out(fns.size());
  auto errs = parallel_for(fns.size(), jobs, [&](std::size_t i) {
    out[i] = {fns[i].id, dialect(fns[i].dialect).tag, pipelines[i], as_stored(function_embedding(m, vocab, fns[i]))};
  });
  if (errors) *errors = std::move(errs);
  else
    for (std::size_t i = 0; i < errs.size(); ++i)
      if (!errs[i].empty()) throw std::runtime_error(fns[i].id + ": " + errs[i]);
  return out;
}

inline fs::path model_for_embedding(const RunConfig& c) { return c.checkpoint.empty() ? c.finetune_ckpt() : fs::path(c.checkpoint); }

inline int cmd_embed(const RunConfig& c, std::ostream& out, std::ostream& err) {
  try {
    const auto vocab = load_vocab(c);
    const auto man = io::read_manifest(c.manifest_path());
    std::vector<Function> fns;
    std::vector<std::string> pipes;
    for (const auto& e : man.functions) {
      fns.push_back(io::read_function(io::function_path(c.functions_dir(), e.id)));
      pipes.push_back(io::pipeline_text(e.pipeline));
    }
    std::vector<std::string> errors;
    auto es = with_checkpoint(model_for_embedding(c), vocab, [&](auto& m) { return embed_functions(m, vocab, fns, pipes, c.jobs, &errors); });
    std::vector<FunctionEmbedding> ok;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < es.size(); ++i) {
      if (errors[i].empty()) ok.push_back(std::move(es[i]));
      else {
        ++failed;
        err << "embed: " << fns[i].id << ": " << errors[i] << "\n";
      }
    }
    io::write_embeddings(c.embeddings_path(), ok);
    out << "embeddings " << ok.size() << " written to " << c.embeddings_path().string() << "\n";
    return failed ? 1 : 0;
  } catch (const std::exception& e) {
    err << "embed: " << e.what() << "\n";
    return 1;
  }
}

inline int cmd_search(const RunConfig& c, const std::string& query_path, std::size_t k, std::ostream& out, std::ostream& err) {
  try {
    const auto vocab = load_vocab(c);
    const Function q = io::read_function(query_path);
    const Vector qv = with_checkpoint(model_for_embedding(c), vocab, [&](auto& m) { return as_stored(function_embedding(m, vocab, q)); });
    EmbeddingIndex index;
    for (auto& e : io::read_embeddings(c.embeddings_path())) index.add(std::move(e));
    const auto top = index.search(qv, std::min(k, index.size()));
    out << "query " << q.id << "\n";
    for (std::size_t r = 0; r < top.size(); ++r) out << (r + 1) << "\t" << top[r].fn_id << "\t" << fmt(top[r].score, 6) << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "search: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// eval

struct EvalResult {
  double auc = 0;
  double p_at_1 = 0;
  std::map<std::size_t, double> topk_error;
  json ppl;
  double kl = 0;
  std::vector<RocPoint> roc;
  std::size_t test_pairs = 0;
  std::size_t queries = 0;
};

inline json report_json(const EvalResult& r) {
  json tk = json::object();
  for (const auto& [k, v] : r.topk_error) tk[std::to_string(k)] = v;
  return {{"auc", r.auc},
          {"p_at_1", r.p_at_1},
          {"topk_error", tk},
          {"ppl", r.ppl},
          {"kl", r.kl},
          {"test_pairs", r.test_pairs},
          {"queries", r.queries}};
}

/// True-positive rate at each false-positive rate on a 0.05 grid.
inline std::string roc_table(const std::vector<RocPoint>& roc) {
  std::ostringstream os;
  os << "fpr     tpr\n";
  for (int g = 0; g <= 20; ++g) {
    const double x = g / 20.0;
    double best = 0;
    for (const auto& p : roc)
      if (p.fpr <= x + 1e-12) best = std::max(best, p.tpr);
    os << fmt(x, 2) << "    " << fmt(best, 4) << "\n";
  }
  return os.str();
}

template <class T>
EvalResult evaluate_model(const RunConfig& c, nn::Model<T>& m, const io::CorpusManifest& man, const Vocab& vocab) {
  std::vector<Function> fns;
  std::vector<std::string> pipes;
  std::map<std::string, std::size_t> at;
  for (const auto& e : man.functions)
    if (e.split == Split::test) {
      at[e.id] = fns.size();
      fns.push_back(io::read_function(io::function_path(c.functions_dir(), e.id)));
      pipes.push_back(io::pipeline_text(e.pipeline));
    }
  const auto es = embed_functions(m, vocab, fns, pipes, c.jobs);
  EvalResult r;
  std::vector<ScoredPair> scores;
  EmbeddingIndex targets;
  std::vector<FunctionEmbedding> queries;
  std::map<std::string, std::string> truth;
  for (const auto& p : man.pairs) {
    if (p.split != Split::test) continue;
    const auto& a = es.at(at.at(p.a));
    const auto& b = es.at(at.at(p.b));
    scores.push_back({cosine_similarity(a.vector, b.vector), p.y});
    if (p.y == 1 && !targets.contains(b.fn_id) && !truth.count(a.fn_id)) {
      targets.add(b);
      queries.push_back(a);
      truth[a.fn_id] = b.fn_id;
    }
  }
  r.test_pairs = scores.size();
  r.queries = queries.size();
  r.auc = roc_auc(scores);
  r.roc = roc_curve(scores);
  r.p_at_1 = precision_at_1(queries, targets, truth);
  for (std::size_t k : {1, 3, 5, 10}) r.topk_error[k] = topk_error(queries, targets, truth, k);

  r.ppl = nullptr;
  if (fs::exists(c.pretrain_log())) {
    const auto log = json::parse(io::read_text(c.pretrain_log()));
    r.ppl = log.at("epochs").back().at("heldout_ppl");
  }
  std::vector<std::string> ref_text, test_text;
  const bool has_pretrain = std::any_of(man.functions.begin(), man.functions.end(), [](const auto& e) { return e.split == Split::pretrain; });
  for (const auto& e : man.functions) {
    const auto fn = io::read_function(io::function_path(c.functions_dir(), e.id));
    if (e.split == Split::test) test_text.push_back(render(fn));
    else if (e.split == (has_pretrain ? Split::pretrain : Split::train)) ref_text.push_back(render(fn));
  }
  r.kl = byte_kl_divergence(ref_text, test_text);
  return r;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out, std::ostream& err) {
  try {
    const auto vocab = load_vocab(c);
    const auto man = io::read_manifest(c.manifest_path());
    const auto r = with_checkpoint(model_for_embedding(c), vocab, [&](auto& m) { return evaluate_model(c, m, man, vocab); });
    io::write_text(c.report_path(), report_json(r).dump(1) + "\n");
    io::write_text(c.roc_path(), roc_table(r.roc));
    out << "auc " << fmt(r.auc) << "  p@1 " << fmt(r.p_at_1) << "  top10 error " << fmt(r.topk_error.at(10)) << "  kl "
        << fmt(r.kl) << "\n";
    out << "report " << c.report_path().string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------------------
// probe

struct ProbeResult {
  std::string original_token;
  std::string original_value;
  std::vector<std::pair<std::string, double>> top;  // descending probability
  std::string predicted_value;
  std::array<double, kValueBytes> byte_confidence{};
};

template <class T>
ProbeResult probe_model(nn::Model<T>& m, const Vocab& vocab, const EncodedInput& full, std::size_t position) {
  if (position >= full.size())
    throw std::out_of_range("probe: position " + std::to_string(position) + " out of range, sequence has " +
                            std::to_string(full.size()) + " tokens");
  const auto parts = split_subsequences(full, m.cfg.max_len);
  std::size_t offset = 0, part = 0;
  while (position >= offset + parts[part].size()) offset += parts[part++].size();
  const auto mi = mask_positions(parts[part], {position - offset});

  nn::Tape<T> tape;
  const auto ctx = nn::encode(tape, m, mi.input);
  const auto pred = nn::predict_masked(tape, m, ctx, mi.positions);
  ProbeResult r;
  r.original_token = vocab.token(mi.original_code[0]);
  r.original_value = is_dummy(mi.original_bytes[0]) ? "##" : "";
  if (r.original_value.empty())
    for (auto b : mi.original_bytes[0]) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "%02x", static_cast<unsigned>(b));
      r.original_value += buf;
    }
  nn::Mat<T> code = tape.value(pred.code).leftCols(static_cast<Eigen::Index>(vocab.size()));
  nn::Tape<T>::softmax_rows(code);
  std::vector<std::pair<std::string, double>> all;
  for (std::size_t i = 0; i < vocab.size(); ++i) all.emplace_back(vocab.token(static_cast<std::int32_t>(i)), code(0, static_cast<Eigen::Index>(i)));
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  all.resize(std::min<std::size_t>(5, all.size()));
  r.top = all;
  for (std::size_t j = 0; j < kValueBytes; ++j) {
    nn::Mat<T> p = tape.value(pred.bytes[j]).leftCols(static_cast<Eigen::Index>(nn::kByteClasses));
    nn::Tape<T>::softmax_rows(p);
    Eigen::Index best = 0;
    p.row(0).maxCoeff(&best);
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02x", static_cast<unsigned>(best));
    r.predicted_value += buf;
    r.byte_confidence[j] = static_cast<double>(p(0, best));
  }
  return r;
}

inline int cmd_probe(const RunConfig& c, const std::string& fn_path, std::size_t position, std::ostream& out, std::ostream& err) {
  try {
    const auto vocab = load_vocab(c);
    const Function fn = io::read_function(fn_path);
    const auto seed = trace_seeds(c, fn.id).front();
    const auto e = tokenize_trace(micro_execute(fn, seed, c.tracer), vocab);
    const fs::path ck = c.checkpoint.empty() ? c.pretrain_ckpt() : fs::path(c.checkpoint);
    const auto r = with_checkpoint(ck, vocab, [&](auto& m) { return probe_model(m, vocab, e, position); });
    json top = json::array();
    for (const auto& [tok, p] : r.top) top.push_back({{"token", tok}, {"p", p}});
    json doc{{"fn_id", fn.id},
             {"position", position},
             {"original_token", r.original_token},
             {"original_value", r.original_value},
             {"top5", top},
             {"predicted_value", r.predicted_value},
             {"byte_confidence", r.byte_confidence}};
    out << doc.dump(1) << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "probe: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace semtrace::pipeline
