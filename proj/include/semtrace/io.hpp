#pragma once

// On-disk formats: `.irfn` function files, trace and embedding JSON lines,
// and the corpus manifest.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "semtrace/corpus.hpp"
#include "semtrace/similarity.hpp"
#include "semtrace/tracer.hpp"

namespace semtrace::io {

namespace fs = std::filesystem;
using nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + p.string());
}

// ---------------------------------------------------------------------------
// Functions

inline fs::path function_path(const fs::path& dir, const std::string& id) { return dir / (id + ".irfn"); }

inline void write_function(const fs::path& dir, const Function& fn) { write_text(function_path(dir, fn.id), render_file(fn)); }

inline Function read_function(const fs::path& p) {
  try {
    return parse_function_file(read_text(p));
  } catch (const ParseError& e) {
    throw ParseError(e.line(), p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Traces: one JSON object per line. Values are 16 lowercase hex digits or
// "##" for the dummy value.

inline std::string value_text(TraceValue v) {
  if (!v) return "##";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(*v));
  return buf;
}

inline TraceValue parse_value_text(const std::string& s) {
  if (s == "##") return std::nullopt;
  if (s.size() != 16) throw FormatError("trace value must be 16 hex digits or ##: '" + s + "'");
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc{} || p != s.data() + s.size()) throw FormatError("bad hex trace value '" + s + "'");
  return v;
}

struct TraceRecord {
  MicroTrace trace;
  std::optional<std::uint64_t> seed;  // nullopt for the dummy trace
};

inline json trace_to_json(const TraceRecord& r) {
  json steps = json::array();
  for (const auto& st : r.trace.steps) {
    json vals = json::array();
    for (const auto& v : st.values) vals.push_back(value_text(v));
    steps.push_back({{"index", st.index}, {"text", render(st.instr, r.trace.dialect)}, {"values", vals}});
  }
  return {{"fn_id", r.trace.fn_id},
          {"dialect", dialect(r.trace.dialect).tag},
          {"kind", r.seed ? "concrete" : "dummy"},
          {"seed", r.seed ? json(*r.seed) : json(nullptr)},
          {"terminated_by", to_string(r.trace.terminated_by)},
          {"steps", steps}};
}

inline TraceRecord trace_from_json(const json& j) {
  TraceRecord r;
  r.trace.fn_id = j.at("fn_id").get<std::string>();
  const auto d = find_dialect(j.at("dialect").get<std::string>());
  if (!d) throw FormatError("unknown dialect in trace of " + r.trace.fn_id);
  r.trace.dialect = *d;
  if (!j.at("seed").is_null()) r.seed = j.at("seed").get<std::uint64_t>();
  const auto term = termination_from_string(j.at("terminated_by").get<std::string>());
  if (!term) throw FormatError("unknown termination in trace of " + r.trace.fn_id);
  r.trace.terminated_by = *term;
  for (const auto& s : j.at("steps")) {
    TraceStep st;
    st.index = s.at("index").get<std::size_t>();
    st.instr = parse_instruction(s.at("text").get<std::string>(), *d);
    for (const auto& v : s.at("values")) st.values.push_back(parse_value_text(v.get<std::string>()));
    if (st.values.size() != tokenize(st.instr, *d).size())
      throw FormatError("trace of " + r.trace.fn_id + ": value count does not match tokens at step " + std::to_string(st.index));
    r.trace.steps.push_back(std::move(st));
  }
  return r;
}

template <class Record, class ToJson>
std::string to_jsonl(const std::vector<Record>& rs, ToJson&& f) {
  std::string out;
  for (const auto& r : rs) out += f(r).dump() + "\n";
  return out;
}

template <class FromJson>
auto from_jsonl(const std::string& text, FromJson&& f) {
  std::vector<decltype(f(json{}))> out;
  std::istringstream is(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(f(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_traces(const fs::path& p, const std::vector<TraceRecord>& rs) { write_text(p, to_jsonl(rs, trace_to_json)); }

inline std::vector<TraceRecord> read_traces(const fs::path& p) { return from_jsonl(read_text(p), trace_from_json); }

// ---------------------------------------------------------------------------
// Embedding store

inline json embedding_to_json(const FunctionEmbedding& e) {
  json v = json::array();
  for (double x : e.vector) v.push_back(static_cast<float>(x));
  return {{"fn_id", e.fn_id}, {"dialect", e.dialect}, {"pipeline", e.pipeline}, {"vector", v}};
}

inline FunctionEmbedding embedding_from_json(const json& j) {
  FunctionEmbedding e;
  e.fn_id = j.at("fn_id").get<std::string>();
  e.dialect = j.at("dialect").get<std::string>();
  e.pipeline = j.value("pipeline", "");
  for (const auto& x : j.at("vector")) e.vector.push_back(static_cast<double>(x.get<float>()));
  return e;
}

inline void write_embeddings(const fs::path& p, const std::vector<FunctionEmbedding>& es) {
  write_text(p, to_jsonl(es, embedding_to_json));
}

inline std::vector<FunctionEmbedding> read_embeddings(const fs::path& p) { return from_jsonl(read_text(p), embedding_from_json); }

// ---------------------------------------------------------------------------
// Corpus manifest: every function with its provenance, plus the labelled
// pairs by function id.

inline const char* to_string(Split s) { return s == Split::train ? "train" : s == Split::test ? "test" : "pretrain"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "pretrain") return Split::pretrain;
  throw FormatError("unknown split '" + s + "'");
}

inline std::string pipeline_text(const Pipeline& p) {
  std::string s;
  for (const auto& pass : p) s += (s.empty() ? "" : "+") + std::string(semtrace::to_string(pass.kind));
  return s;
}

struct ManifestEntry {
  std::string id;
  DialectId dialect = DialectId::arch_a;
  std::uint64_t source_seed = 0;
  Pipeline pipeline;
  Split split = Split::train;
};

struct ManifestPair {
  std::string a, b;
  int y = 1;
  Split split = Split::train;
};

struct CorpusManifest {
  std::map<std::string, std::string> params;
  std::vector<ManifestEntry> functions;
  std::vector<ManifestPair> pairs;
};

inline json manifest_to_json(const CorpusManifest& m) {
  json fns = json::array(), pairs = json::array();
  for (const auto& f : m.functions) {
    json passes = json::array();
    for (const auto& p : f.pipeline) passes.push_back({{"pass", semtrace::to_string(p.kind)}, {"seed", p.seed}});
    fns.push_back({{"id", f.id},
                   {"dialect", dialect(f.dialect).tag},
                   {"source_seed", f.source_seed},
                   {"pipeline", passes},
                   {"split", to_string(f.split)}});
  }
  for (const auto& p : m.pairs) pairs.push_back({{"a", p.a}, {"b", p.b}, {"y", p.y}, {"split", to_string(p.split)}});
  return {{"format", "semtrace-corpus 1"}, {"params", m.params}, {"functions", fns}, {"pairs", pairs}};
}

inline CorpusManifest manifest_from_json(const json& j) {
  if (j.value("format", "") != "semtrace-corpus 1") throw FormatError("not a corpus manifest");
  CorpusManifest m;
  m.params = j.at("params").get<std::map<std::string, std::string>>();
  for (const auto& f : j.at("functions")) {
    ManifestEntry e;
    e.id = f.at("id").get<std::string>();
    const auto d = find_dialect(f.at("dialect").get<std::string>());
    if (!d) throw FormatError("unknown dialect for " + e.id);
    e.dialect = *d;
    e.source_seed = f.at("source_seed").get<std::uint64_t>();
    for (const auto& p : f.at("pipeline")) {
      const auto k = pass_from_string(p.at("pass").get<std::string>());
      if (!k) throw FormatError("unknown pass for " + e.id);
      e.pipeline.push_back({*k, p.at("seed").get<std::uint64_t>()});
    }
    e.split = split_from_string(f.at("split").get<std::string>());
    m.functions.push_back(std::move(e));
  }
  for (const auto& p : j.at("pairs"))
    m.pairs.push_back({p.at("a").get<std::string>(), p.at("b").get<std::string>(), p.at("y").get<int>(),
                       split_from_string(p.at("split").get<std::string>())});
  return m;
}

inline void write_manifest(const fs::path& p, const CorpusManifest& m) { write_text(p, manifest_to_json(m).dump(1) + "\n"); }

inline CorpusManifest read_manifest(const fs::path& p) {
  try {
    return manifest_from_json(json::parse(read_text(p)));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace semtrace::io
