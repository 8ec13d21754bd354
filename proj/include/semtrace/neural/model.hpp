#pragma once

// Hierarchical Transformer over encoded traces.
//
// Each position's input is the sum of five embeddings: code token, value
// (the 8 bytes through a small value encoder), instruction position,
// operand position and dialect. L self-attention layers follow, then nine
// independent heads (one for the code token, one per value byte) that are
// evaluated only at masked positions. A separate pooling head maps a whole
// sequence to a function embedding.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semtrace/encoding.hpp"
#include "semtrace/neural/tape.hpp"
#include "semtrace/random.hpp"

namespace semtrace::nn {

enum class ValueCombiner : std::uint8_t { bilstm, mlp, sum };

inline const char* to_string(ValueCombiner c) {
  switch (c) {
    case ValueCombiner::bilstm: return "bilstm";
    case ValueCombiner::mlp: return "mlp";
    case ValueCombiner::sum: return "sum";
  }
  return "?";
}

inline ValueCombiner combiner_from_string(const std::string& s) {
  for (auto c : {ValueCombiner::bilstm, ValueCombiner::mlp, ValueCombiner::sum})
    if (s == to_string(c)) return c;
  throw std::invalid_argument("unknown value combiner '" + s + "'");
}

inline constexpr std::size_t kNumHeads = 1 + kValueBytes;
inline constexpr std::size_t kByteClasses = 256;

struct ModelConfig {
  std::size_t d_emb = 64;
  std::size_t d_func = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn = 128;
  double dropout = 0.1;
  double alpha = 0.125;
  ValueCombiner combiner = ValueCombiner::bilstm;
  std::size_t max_len = 128;
  std::size_t max_operands = 16;
  std::string precision = "f32";

  static ModelConfig desk() { return {}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.d_emb = 768;
    c.d_func = 768;
    c.layers = 12;
    c.heads = 8;
    c.ffn = 3072;
    c.max_len = 512;
    return c;
  }

  /// Small enough for exhaustive finite differences.
  static ModelConfig tiny() {
    ModelConfig c;
    c.d_emb = 8;
    c.d_func = 4;
    c.layers = 1;
    c.heads = 2;
    c.ffn = 12;
    c.dropout = 0.0;
    c.max_len = 8;
    c.max_operands = 10;
    c.precision = "f64";
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    if (name == "tiny") return tiny();
    throw std::invalid_argument("unknown model preset '" + name + "'");
  }

  void validate() const {
    if (d_emb == 0 || heads == 0 || d_emb % heads != 0) throw std::invalid_argument("d_emb must be a positive multiple of heads");
    if (d_emb % 2 != 0) throw std::invalid_argument("d_emb must be even for the bidirectional value encoder");
    if (d_func == 0 || d_func > d_emb) throw std::invalid_argument("d_func must be in [1, d_emb]");
    if (!(alpha > 0)) throw std::invalid_argument("alpha must be positive");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("dropout must be in [0, 1)");
    if (max_len == 0 || max_operands == 0 || layers == 0 || ffn == 0) throw std::invalid_argument("sizes must be positive");
    if (precision != "f32" && precision != "f64") throw std::invalid_argument("precision must be f32 or f64");
  }

  std::map<std::string, std::string> to_kv() const {
    std::ostringstream a, dr;
    a.precision(17);
    dr.precision(17);
    a << alpha;
    dr << dropout;
    return {{"d_emb", std::to_string(d_emb)},     {"d_func", std::to_string(d_func)},
            {"layers", std::to_string(layers)},   {"heads", std::to_string(heads)},
            {"ffn", std::to_string(ffn)},         {"dropout", dr.str()},
            {"alpha", a.str()},                   {"combiner", to_string(combiner)},
            {"max_len", std::to_string(max_len)}, {"max_operands", std::to_string(max_operands)},
            {"precision", precision}};
  }

  /// Overrides fields named in `kv`; unknown keys are an error.
  void apply_kv(const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "d_emb") d_emb = std::stoul(v);
      else if (k == "d_func") d_func = std::stoul(v);
      else if (k == "layers") layers = std::stoul(v);
      else if (k == "heads") heads = std::stoul(v);
      else if (k == "ffn") ffn = std::stoul(v);
      else if (k == "dropout") dropout = std::stod(v);
      else if (k == "alpha") alpha = std::stod(v);
      else if (k == "combiner") combiner = combiner_from_string(v);
      else if (k == "max_len") max_len = std::stoul(v);
      else if (k == "max_operands") max_operands = std::stoul(v);
      else if (k == "precision") precision = v;
      else throw std::invalid_argument("unknown model config key '" + k + "'");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct LstmCell {
  Tensor<T> wx, wh, b;  // gates ordered input, forget, cell, output
};

template <class T>
struct AttentionLayer {
  Tensor<T> wq, wk, wv, wo, bo, w1, b1, w2, b2;
};

template <class T>
struct PredictionHead {
  Tensor<T> w1, w2;
};

template <class T>
struct Model {
  ModelConfig cfg;
  std::size_t vocab_size = 0;

  Tensor<T> e_f, e_c, e_o, e_a, e_byte;
  std::vector<std::array<LstmCell<T>, 2>> lstm;  // [layer][direction]
  Tensor<T> val_proj, val_proj_b;
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::vector<AttentionLayer<T>> layers;
  std::array<PredictionHead<T>, kNumHeads> heads;
  Tensor<T> sim_w1, sim_w2;

  /// Visits every parameter the configured architecture uses, in a fixed order.
  template <class F>
  void for_each_tensor(F&& f) {
    for (auto* t : {&e_f, &e_c, &e_o, &e_a, &e_byte}) f(*t);
    switch (cfg.combiner) {
      case ValueCombiner::bilstm:
        for (auto& layer : lstm)
          for (auto& c : layer)
            for (auto* t : {&c.wx, &c.wh, &c.b}) f(*t);
        f(val_proj);
        f(val_proj_b);
        break;
      case ValueCombiner::mlp:
        for (auto* t : {&mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2}) f(*t);
        break;
      case ValueCombiner::sum:
        break;
    }
    for (auto& l : layers)
      for (auto* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.bo, &l.w1, &l.b1, &l.w2, &l.b2}) f(*t);
    for (auto& h : heads) {
      f(h.w1);
      f(h.w2);
    }
    f(sim_w1);
    f(sim_w2);
  }

  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<Model*>(this)->for_each_tensor([&](Tensor<T>& t) { f(static_cast<const Tensor<T>&>(t)); });
  }

  void zero_grad() {
    for_each_tensor([](Tensor<T>& t) { t.zero_grad(); });
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for_each_tensor([&](const Tensor<T>& t) { n += static_cast<std::size_t>(t.value.size()); });
    return n;
  }
};

namespace detail {

template <class T>
void init_uniform(Tensor<T>& t, double bound, semtrace::detail::Rng& rng) {
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
}

template <class T>
void init_xavier(Tensor<T>& t, semtrace::detail::Rng& rng) {
  init_uniform(t, std::sqrt(6.0 / static_cast<double>(t.value.rows() + t.value.cols())), rng);
}

}  // namespace detail

/// Fresh parameters: Xavier-uniform weights, uniform(-0.1, 0.1) embedding
/// tables, small output layers in the prediction heads, zero biases.
template <class T>
Model<T> init_model(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t seed) {
  cfg.validate();
  if (vocab_size < Vocab::kSpecials.size()) throw std::invalid_argument("vocabulary too small");
  using semtrace::detail::Rng;
  Rng rng(semtrace::detail::mix_seed(seed, 0x6d6f64656c));
  const auto d = static_cast<Eigen::Index>(cfg.d_emb);
  const auto hd = d / 2;
  Model<T> m;
  m.cfg = cfg;
  m.vocab_size = vocab_size;
  auto emb = [&](Tensor<T>& t, const char* name, Eigen::Index rows) {
    t = Tensor<T>(name, rows, d);
    detail::init_uniform(t, 0.1, rng);
  };
  emb(m.e_f, "e_f", static_cast<Eigen::Index>(vocab_size));
  emb(m.e_c, "e_c", static_cast<Eigen::Index>(cfg.max_len));
  emb(m.e_o, "e_o", static_cast<Eigen::Index>(cfg.max_operands));
  emb(m.e_a, "e_a", static_cast<Eigen::Index>(num_dialects()));
  emb(m.e_byte, "e_byte", static_cast<Eigen::Index>(kByteVocab));

  auto lin = [&](Tensor<T>& t, const std::string& name, Eigen::Index r, Eigen::Index c) {
    t = Tensor<T>(name, r, c);
    detail::init_xavier(t, rng);
  };
  auto bias = [&](Tensor<T>& t, const std::string& name, Eigen::Index c) { t = Tensor<T>(name, 1, c); };

  switch (cfg.combiner) {
    case ValueCombiner::bilstm:
      m.lstm.resize(2);
      for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t dir = 0; dir < 2; ++dir) {
          auto& c = m.lstm[l][dir];
          const std::string p = "lstm" + std::to_string(l) + (dir ? "b" : "f") + ".";
          lin(c.wx, p + "wx", d, 4 * hd);
          lin(c.wh, p + "wh", hd, 4 * hd);
          bias(c.b, p + "b", 4 * hd);
          c.b.value.middleCols(hd, hd).setOnes();  // forget gate starts open
        }
      lin(m.val_proj, "val_proj", d, d);
      bias(m.val_proj_b, "val_proj_b", d);
      break;
    case ValueCombiner::mlp:
      lin(m.mlp_w1, "mlp_w1", static_cast<Eigen::Index>(kValueBytes) * d, d);
      bias(m.mlp_b1, "mlp_b1", d);
      lin(m.mlp_w2, "mlp_w2", d, d);
      bias(m.mlp_b2, "mlp_b2", d);
      break;
    case ValueCombiner::sum:
      break;
  }

  const auto ffn = static_cast<Eigen::Index>(cfg.ffn);
  m.layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto& L = m.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    lin(L.wq, p + "wq", d, d);
    lin(L.wk, p + "wk", d, d);
    lin(L.wv, p + "wv", d, d);
    lin(L.wo, p + "wo", d, d);
    bias(L.bo, p + "bo", d);
    lin(L.w1, p + "w1", d, ffn);
    bias(L.b1, p + "b1", ffn);
    lin(L.w2, p + "w2", ffn, d);
    bias(L.b2, p + "b2", d);
  }
  for (std::size_t h = 0; h < kNumHeads; ++h) {
    const std::string p = h == 0 ? std::string("head_code.") : "head_byte" + std::to_string(h - 1) + ".";
    const Eigen::Index out = h == 0 ? static_cast<Eigen::Index>(vocab_size) : static_cast<Eigen::Index>(kByteVocab);
    lin(m.heads[h].w1, p + "w1", d, d);
    m.heads[h].w2 = Tensor<T>(p + "w2", d, out);
    detail::init_uniform(m.heads[h].w2, 0.02, rng);
  }
  lin(m.sim_w1, "sim_w1", d, d);
  lin(m.sim_w2, "sim_w2", d, static_cast<Eigen::Index>(cfg.d_func));
  return m;
}

/// Converts parameters to another scalar type.
template <class To, class From>
Model<To> cast_model(const Model<From>& src) {
  Model<To> dst = init_model<To>(src.cfg, src.vocab_size, 0);
  std::vector<const Tensor<From>*> from;
  src.for_each_tensor([&](const Tensor<From>& t) { from.push_back(&t); });
  std::size_t i = 0;
  dst.for_each_tensor([&](Tensor<To>& t) {
    t.value = from[i++]->value.template cast<To>();
    t.zero_grad();
  });
  return dst;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct ForwardOptions {
  bool train = false;
  semtrace::detail::Rng* rng = nullptr;         // required when train && dropout > 0
  std::vector<std::vector<Mat<T>>>* attention = nullptr;  // per layer, per head
};

namespace detail {

template <class T>
Var maybe_dropout(Tape<T>& tape, Var x, const ModelConfig& cfg, const ForwardOptions<T>& opt) {
  if (!opt.train || cfg.dropout <= 0) return x;
  if (!opt.rng) throw std::invalid_argument("training forward needs an rng for dropout");
  return tape.dropout(x, cfg.dropout, [&] { return opt.rng->uniform(); });
}

template <class T>
Var lstm_direction(Tape<T>& tape, LstmCell<T>& cell, const std::vector<Var>& xs, bool reverse, std::vector<Var>& hs) {
  const Eigen::Index rows = tape.value(xs[0]).rows();
  const Eigen::Index hd = cell.wh.value.rows();
  Var wx = tape.param(cell.wx), wh = tape.param(cell.wh), b = tape.param(cell.b);
  Var h = tape.constant(Mat<T>::Zero(rows, hd));
  Var c = tape.constant(Mat<T>::Zero(rows, hd));
  hs.assign(xs.size(), Var{});
  for (std::size_t s = 0; s < xs.size(); ++s) {
    const std::size_t t = reverse ? xs.size() - 1 - s : s;
    Var gates = tape.add_row(tape.add(tape.matmul(xs[t], wx), tape.matmul(h, wh)), b);
    Var i = tape.sigmoid(tape.slice_cols(gates, 0, hd));
    Var f = tape.sigmoid(tape.slice_cols(gates, hd, hd));
    Var g = tape.tanh(tape.slice_cols(gates, 2 * hd, hd));
    Var o = tape.sigmoid(tape.slice_cols(gates, 3 * hd, hd));
    c = tape.add(tape.mul(f, c), tape.mul(i, g));
    h = tape.mul(o, tape.tanh(c));
    hs[t] = h;
  }
  return h;
}

}  // namespace detail

/// Value vectors (rows x d_emb) for a list of byte sequences.
template <class T>
Var value_encoder(Tape<T>& tape, Model<T>& m, const std::vector<ByteSeq>& values) {
  if (values.empty()) throw std::invalid_argument("value_encoder: no values");
  Var table = tape.param(m.e_byte);
  std::vector<Var> xs;
  for (std::size_t j = 0; j < kValueBytes; ++j) {
    std::vector<std::int32_t> ids(values.size());
    for (std::size_t r = 0; r < values.size(); ++r) ids[r] = values[r][j];
    xs.push_back(tape.gather_rows(table, std::move(ids)));
  }
  switch (m.cfg.combiner) {
    case ValueCombiner::sum:
      return tape.sum(xs);
    case ValueCombiner::mlp: {
      Var h = tape.gelu(tape.add_row(tape.matmul(tape.concat_cols(xs), tape.param(m.mlp_w1)), tape.param(m.mlp_b1)));
      return tape.add_row(tape.matmul(h, tape.param(m.mlp_w2)), tape.param(m.mlp_b2));
    }
    case ValueCombiner::bilstm: {
      std::vector<Var> in = xs;
      Var last_f{}, last_b{};
      for (auto& layer : m.lstm) {
        std::vector<Var> hf, hb;
        last_f = detail::lstm_direction(tape, layer[0], in, false, hf);
        last_b = detail::lstm_direction(tape, layer[1], in, true, hb);
        for (std::size_t t = 0; t < in.size(); ++t) in[t] = tape.concat_cols({hf[t], hb[t]});
      }
      Var both = tape.concat_cols({last_f, last_b});
      return tape.add_row(tape.matmul(both, tape.param(m.val_proj)), tape.param(m.val_proj_b));
    }
  }
  throw std::logic_error("unreachable");
}

/// Summed input embeddings, n x d_emb. Instruction positions are counted from
/// the first instruction of the sequence; operand positions past the table
/// share its last row.
template <class T>
Var embed_input(Tape<T>& tape, Model<T>& m, const EncodedInput& e) {
  if (!e.aligned()) throw std::invalid_argument("embed_input: misaligned input");
  if (e.size() == 0) throw std::invalid_argument("embed_input: empty input");
  if (e.size() > m.cfg.max_len)
    throw std::invalid_argument("embed_input: length " + std::to_string(e.size()) + " exceeds max_len " + std::to_string(m.cfg.max_len));

  // distinct values are encoded once
  std::map<ByteSeq, std::int32_t> index;
  std::vector<ByteSeq> uniq;
  std::vector<std::int32_t> value_ids(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (auto b : e.bytes[i])
      if (b >= kByteVocab) throw std::out_of_range("embed_input: byte id out of range");
    auto [it, inserted] = index.emplace(e.bytes[i], static_cast<std::int32_t>(uniq.size()));
    if (inserted) uniq.push_back(e.bytes[i]);
    value_ids[i] = it->second;
  }
  Var values = tape.gather_rows(value_encoder(tape, m, uniq), std::move(value_ids));

  std::vector<std::int32_t> ip(e.size()), op(e.size());
  const auto max_ip = static_cast<std::int32_t>(m.cfg.max_len) - 1;
  const auto max_op = static_cast<std::int32_t>(m.cfg.max_operands) - 1;
  for (std::size_t i = 0; i < e.size(); ++i) {
    ip[i] = std::clamp(e.inst_pos[i] - e.inst_pos[0], 0, max_ip);
    op[i] = std::clamp(e.op_pos[i], 0, max_op);
  }
  Var x = tape.gather_rows(tape.param(m.e_f), e.code);
  x = tape.add(x, values);
  x = tape.add(x, tape.gather_rows(tape.param(m.e_c), std::move(ip)));
  x = tape.add(x, tape.gather_rows(tape.param(m.e_o), std::move(op)));
  x = tape.add(x, tape.gather_rows(tape.param(m.e_a), e.arch));
  return x;
}

template <class T>
Var attention_layer(Tape<T>& tape, Model<T>& m, AttentionLayer<T>& L, Var x, const ForwardOptions<T>& opt) {
  std::vector<Mat<T>> probs;
  Var q = tape.matmul(x, tape.param(L.wq));
  Var k = tape.matmul(x, tape.param(L.wk));
  Var v = tape.matmul(x, tape.param(L.wv));
  Var a = tape.attention(q, k, v, m.cfg.heads, static_cast<T>(m.cfg.d_emb), opt.attention ? &probs : nullptr);
  if (opt.attention) opt.attention->push_back(std::move(probs));
  Var proj = tape.add_row(tape.matmul(a, tape.param(L.wo)), tape.param(L.bo));
  Var h = tape.add(x, detail::maybe_dropout(tape, proj, m.cfg, opt));
  Var f = tape.gelu(tape.add_row(tape.matmul(h, tape.param(L.w1)), tape.param(L.b1)));
  f = tape.add_row(tape.matmul(f, tape.param(L.w2)), tape.param(L.b2));
  return tape.add(h, detail::maybe_dropout(tape, f, m.cfg, opt));
}

/// Contextual embeddings, n x d_emb.
template <class T>
Var encode(Tape<T>& tape, Model<T>& m, const EncodedInput& e, const ForwardOptions<T>& opt = {}) {
  Var x = detail::maybe_dropout(tape, embed_input(tape, m, e), m.cfg, opt);
  for (auto& L : m.layers) x = attention_layer(tape, m, L, x, opt);
  return x;
}

/// softmax(tanh(R W1) W2) logits of head `h` for the rows R.
template <class T>
Var head_logits(Tape<T>& tape, Model<T>& m, Var rows, std::size_t h) {
  auto& H = m.heads.at(h);
  return tape.matmul(tape.tanh(tape.matmul(rows, tape.param(H.w1))), tape.param(H.w2));
}

template <class T>
struct Predictions {
  Var code;                             // |MP| x |V|
  std::array<Var, kValueBytes> bytes;   // each |MP| x 257
};

template <class T>
Predictions<T> predict_masked(Tape<T>& tape, Model<T>& m, Var ctx, const std::vector<std::size_t>& positions) {
  if (positions.empty()) throw std::invalid_argument("predict_masked: no masked positions");
  std::vector<std::int32_t> ids(positions.begin(), positions.end());
  Var rows = tape.gather_rows(ctx, std::move(ids));
  Predictions<T> p;
  p.code = head_logits(tape, m, rows, 0);
  for (std::size_t j = 0; j < kValueBytes; ++j) p.bytes[j] = head_logits(tape, m, rows, j + 1);
  return p;
}

// ---------------------------------------------------------------------------
// Masked-prediction objective

/// Cross-entropy sums over masked targets; perplexities are exp of the means.
struct CeStats {
  double code_ce = 0;
  std::size_t code_n = 0;
  double byte_ce = 0;
  std::size_t byte_n = 0;

  void merge(const CeStats& o) {
    code_ce += o.code_ce;
    code_n += o.code_n;
    byte_ce += o.byte_ce;
    byte_n += o.byte_n;
  }
  double code_ppl() const { return code_n ? std::exp(code_ce / static_cast<double>(code_n)) : std::nan(""); }
  double byte_ppl() const { return byte_n ? std::exp(byte_ce / static_cast<double>(byte_n)) : std::nan(""); }
  double combined_ppl() const {
    const auto n = code_n + byte_n;
    return n ? std::exp((code_ce + byte_ce) / static_cast<double>(n)) : std::nan("");
  }
};

/// sum over masked positions of code CE + alpha * sum_j byte_j CE, where the
/// byte terms of a position whose original value is the dummy are dropped.
inline double pretrain_loss_value(const std::vector<double>& code_ce, const std::vector<std::array<double, kValueBytes>>& byte_ce,
                                  const std::vector<bool>& has_value, double alpha) {
  if (byte_ce.size() != code_ce.size() || has_value.size() != code_ce.size())
    throw std::invalid_argument("pretrain_loss_value: size mismatch");
  double loss = 0;
  for (std::size_t i = 0; i < code_ce.size(); ++i) {
    loss += code_ce[i];
    if (!has_value[i]) continue;
    for (double b : byte_ce[i]) loss += alpha * b;
  }
  return loss;
}

template <class T>
struct PretrainTerms {
  Var loss;  // summed over masked positions
  CeStats stats;
};

/// Records the masked-prediction loss for one masked sequence.
template <class T>
PretrainTerms<T> pretrain_objective(Tape<T>& tape, Model<T>& m, const MaskedInput& mi, const ForwardOptions<T>& opt = {}) {
  Var ctx = encode(tape, m, mi.input, opt);
  auto pred = predict_masked(tape, m, ctx, mi.positions);
  const std::size_t k = mi.positions.size();
  PretrainTerms<T> out;
  std::vector<T> ce;
  Var code = tape.softmax_xent(pred.code, mi.original_code, std::vector<T>(k, T(1)),
                               static_cast<Eigen::Index>(m.vocab_size), &ce);
  for (auto c : ce) out.stats.code_ce += static_cast<double>(c);
  out.stats.code_n += k;
  std::vector<Var> terms{code};
  for (std::size_t j = 0; j < kValueBytes; ++j) {
    std::vector<std::int32_t> targets(k);
    std::vector<T> w(k);
    for (std::size_t i = 0; i < k; ++i) {
      const bool valued = !is_dummy(mi.original_bytes[i]);
      targets[i] = valued ? mi.original_bytes[i][j] : 0;
      w[i] = valued ? static_cast<T>(m.cfg.alpha) : T(0);
    }
    terms.push_back(tape.softmax_xent(pred.bytes[j], std::move(targets), w, static_cast<Eigen::Index>(kByteClasses), &ce));
    for (std::size_t i = 0; i < k; ++i)
      if (w[i] != T(0)) {
        out.stats.byte_ce += static_cast<double>(ce[i]);
        ++out.stats.byte_n;
      }
  }
  out.loss = tape.sum(terms);
  return out;
}

// ---------------------------------------------------------------------------
// Function embeddings

/// tanh(mean_i E_i W1) W2 for one contextual sequence.
template <class T>
Var pool(Tape<T>& tape, Model<T>& m, Var ctx) {
  return tape.matmul(tape.tanh(tape.matmul(tape.mean_rows(ctx), tape.param(m.sim_w1))), tape.param(m.sim_w2));
}

/// 1 x d_func embedding averaged over the subsequences of one function.
template <class T>
Var embed_function(Tape<T>& tape, Model<T>& m, const std::vector<EncodedInput>& parts, const ForwardOptions<T>& opt = {}) {
  if (parts.empty()) throw std::invalid_argument("embed_function: no subsequences");
  std::vector<Var> pooled;
  for (const auto& p : parts) pooled.push_back(pool(tape, m, encode(tape, m, p, opt)));
  Var s = tape.sum(pooled);
  return parts.size() == 1 ? s : tape.scale(s, T(1) / static_cast<T>(parts.size()));
}

}  // namespace semtrace::nn
