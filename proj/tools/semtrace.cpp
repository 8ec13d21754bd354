#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "semtrace/pipeline.hpp"

namespace {

using semtrace::pipeline::RunConfig;

// Flags mirror config-file keys; only flags given on the command line
// override the file.
class FlagSet {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = *values_.emplace_back(std::make_unique<std::string>());
    opts_.push_back({key, app->add_option(flag, slot, help), &slot, false});
  }
  void add_switch(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    opts_.push_back({key, app->add_flag(flag, help), nullptr, true});
  }
  std::map<std::string, std::string> collect() const {
    std::map<std::string, std::string> kv;
    for (const auto& o : opts_)
      if (o.opt->count()) kv[o.key] = o.is_switch ? "true" : *o.value;
    return kv;
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    const std::string* value;
    bool is_switch;
  };
  std::vector<std::unique_ptr<std::string>> values_;
  std::vector<Entry> opts_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semtrace: micro-trace pretraining and function similarity on a toy IR"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  FlagSet flags;
  app.add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override any config key, as key=value");
  flags.add(&app, "--dir", "dir", "run directory");
  flags.add(&app, "--seed", "seed", "seed (falls back to SEMTRACE_SEED)");
  flags.add(&app, "--jobs", "jobs", "worker threads for tracing and embedding");

  auto* gen = app.add_subcommand("gen", "generate source functions, variants and labelled pairs");
  flags.add(gen, "--sources", "sources", "sources behind the pair benchmark");
  flags.add(gen, "--pretrain-sources", "pretrain_sources", "disjoint sources for pretraining");
  flags.add(gen, "--variants", "variants", "variants per pretraining source");
  flags.add(gen, "--pairs", "pairs", "number of labelled pairs");
  flags.add(gen, "--ratio", "ratio", "dissimilar pairs per similar pair");
  flags.add(gen, "--train-fraction", "train_fraction", "fraction of pairs used for finetuning");

  auto* trace = app.add_subcommand("trace", "micro-execute every function");
  flags.add(trace, "--traces-per-fn", "traces_per_fn", "concrete traces per function");
  flags.add(trace, "--step-budget", "step_budget", "instruction budget per trace");

  app.add_subcommand("vocab", "build the token vocabulary from the traces");

  auto* pretrain = app.add_subcommand("pretrain", "masked-prediction pretraining");
  flags.add(pretrain, "--preset", "preset", "model preset: desk, paper or tiny");
  flags.add(pretrain, "--epochs", "pretrain_epochs", "epochs");
  flags.add(pretrain, "--lr", "pretrain_lr", "learning rate");
  flags.add(pretrain, "--batch", "batch", "sequences per batch");
  flags.add(pretrain, "--accum", "accum", "batches per optimizer update");
  flags.add(pretrain, "--mask-percent", "mask_percent", "fraction of tokens masked");
  flags.add_switch(pretrain, "--dummy-only", "dummy_only", "drop trace values");

  auto* finetune = app.add_subcommand("finetune", "train on labelled pairs");
  flags.add(finetune, "--checkpoint", "checkpoint", "starting checkpoint");
  flags.add(finetune, "--epochs", "finetune_epochs", "epochs");
  flags.add(finetune, "--lr", "finetune_lr", "learning rate");
  flags.add(finetune, "--batch", "finetune_batch", "pairs per batch");
  flags.add(finetune, "--accum", "accum", "batches per optimizer update");
  flags.add(finetune, "--margin", "margin", "dissimilar-pair margin");
  flags.add(finetune, "--preset", "preset", "model preset when starting from scratch");
  flags.add_switch(finetune, "--scratch", "scratch", "start from a fresh model");

  auto* embed = app.add_subcommand("embed", "write the embedding store");
  flags.add(embed, "--checkpoint", "checkpoint", "model checkpoint");

  std::string query;
  std::size_t k = 10;
  auto* search = app.add_subcommand("search", "rank stored functions against a query");
  search->add_option("--query", query, "query .irfn file")->required()->check(CLI::ExistingFile);
  search->add_option("--k", k, "number of matches");
  flags.add(search, "--checkpoint", "checkpoint", "model checkpoint");

  auto* eval = app.add_subcommand("eval", "metrics report over the test pairs");
  flags.add(eval, "--checkpoint", "checkpoint", "model checkpoint");
  flags.add(eval, "--report", "report", "report path");

  std::string probe_fn;
  std::size_t position = 0;
  auto* probe = app.add_subcommand("probe", "mask one token and show the model's predictions");
  probe->add_option("--fn", probe_fn, "function .irfn file")->required()->check(CLI::ExistingFile);
  probe->add_option("--position", position, "token index in the function's trace")->required();
  flags.add(probe, "--checkpoint", "checkpoint", "pretrained checkpoint");

  CLI11_PARSE(app, argc, argv);

  RunConfig cfg;
  try {
    auto kv = flags.collect();
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw semtrace::pipeline::ConfigError("--set expects key=value, got '" + s + "'");
      kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    std::optional<std::string> text;
    if (!config_path.empty()) text = semtrace::io::read_text(config_path);
    cfg = semtrace::pipeline::resolve_config(text, kv);
  } catch (const std::exception& e) {
    std::cerr << "config: " << e.what() << "\n";
    return 2;
  }

  namespace p = semtrace::pipeline;
  auto& out = std::cout;
  auto& err = std::cerr;
  if (*gen) return p::cmd_gen(cfg, out, err);
  if (*trace) return p::cmd_trace(cfg, out, err);
  if (app.got_subcommand("vocab")) return p::cmd_vocab(cfg, out, err);
  if (*pretrain) return p::cmd_pretrain(cfg, out, err);
  if (*finetune) return p::cmd_finetune(cfg, out, err);
  if (*embed) return p::cmd_embed(cfg, out, err);
  if (*search) return p::cmd_search(cfg, query, k, out, err);
  if (*eval) return p::cmd_eval(cfg, out, err);
  if (*probe) return p::cmd_probe(cfg, probe_fn, position, out, err);
  return 1;
}
