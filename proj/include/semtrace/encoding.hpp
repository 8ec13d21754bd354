#pragma once

// Model inputs built from micro-traces: five aligned sequences per trace
// (code tokens, 8-byte values, instruction position, operand position,
// dialect), the shared code vocabulary, subsequence splitting, and span
// masking for the masked-LM objective.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "semtrace/ir.hpp"
#include "semtrace/random.hpp"
#include "semtrace/tracer.hpp"

namespace semtrace {

inline constexpr std::uint16_t kDummyByte = 256;
inline constexpr std::size_t kByteVocab = 257;
inline constexpr std::size_t kValueBytes = 8;

using ByteSeq = std::array<std::uint16_t, kValueBytes>;

inline constexpr ByteSeq kDummyBytes{kDummyByte, kDummyByte, kDummyByte, kDummyByte,
                                     kDummyByte, kDummyByte, kDummyByte, kDummyByte};

/// Big-endian, zero-padded; the dummy value becomes eight DUMMY ids.
inline ByteSeq encode_value_bytes(TraceValue v) {
  if (!v) return kDummyBytes;
  ByteSeq out{};
  for (std::size_t i = 0; i < kValueBytes; ++i) out[i] = static_cast<std::uint16_t>((*v >> (8 * (7 - i))) & 0xff);
  return out;
}

inline bool is_dummy(const ByteSeq& b) { return b == kDummyBytes; }

// ---------------------------------------------------------------------------
// Vocabulary

class UnknownToken : public std::out_of_range {
 public:
  explicit UnknownToken(const std::string& tok) : std::out_of_range("token not in vocabulary: '" + tok + "'"), token_(tok) {}
  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kMask = 1;
  static constexpr std::int32_t kNum = 2;
  static constexpr std::array<std::string_view, 3> kSpecials{"<pad>", "<mask>", "num"};

  Vocab() {
    for (auto s : kSpecials) add(std::string(s));
  }

  explicit Vocab(const std::vector<std::string>& tokens) {
    for (std::size_t i = 0; i < kSpecials.size(); ++i)
      if (i >= tokens.size() || tokens[i] != kSpecials[i]) throw std::invalid_argument("vocab must start with <pad>, <mask>, num");
    for (const auto& t : tokens) add(t);
  }

  std::int32_t id(const std::string& tok) const {
    auto it = ids_.find(tok);
    if (it == ids_.end()) throw UnknownToken(tok);
    return it->second;
  }
  bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; the line number is the id.
  std::string to_text() const {
    std::string s;
    for (const auto& t : tokens_) s += t + "\n";
    return s;
  }

  static Vocab from_text(std::string_view text) {
    std::vector<std::string> toks;
    std::istringstream is{std::string(text)};
    for (std::string line; std::getline(is, line);)
      if (!line.empty()) toks.push_back(line);
    return Vocab(toks);
  }

  /// FNV-1a over the text form; checkpoints record it to detect mismatches.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : to_text()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& t) {
    if (ids_.count(t)) throw std::invalid_argument("duplicate vocab token '" + t + "'");
    ids_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// The vocabulary text of a token: numeric literals collapse to `num`.
inline std::string vocab_text(const Token& t) { return t.kind == TokenKind::num ? std::string(Vocab::kSpecials[2]) : t.text; }

/// Every token seen in the traces plus the specials, ordered by descending
/// frequency then lexicographically.
inline Vocab build_vocab(const std::vector<MicroTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& tr : traces)
    for (const auto& st : tr.steps)
      for (const auto& tok : tokenize(st.instr, tr.dialect)) ++counts[vocab_text(tok)];
  std::vector<std::pair<std::string, std::size_t>> sorted;
  for (auto& [tok, n] : counts)
    if (std::find(Vocab::kSpecials.begin(), Vocab::kSpecials.end(), tok) == Vocab::kSpecials.end()) sorted.emplace_back(tok, n);
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> toks(Vocab::kSpecials.begin(), Vocab::kSpecials.end());
  for (auto& [tok, n] : sorted) toks.push_back(tok);
  return Vocab(toks);
}

// ---------------------------------------------------------------------------
// Encoded sequences

struct EncodedInput {
  std::vector<std::int32_t> code;
  std::vector<ByteSeq> bytes;
  std::vector<std::int32_t> inst_pos;
  std::vector<std::int32_t> op_pos;
  std::vector<std::int32_t> arch;

  std::size_t size() const { return code.size(); }

  bool aligned() const {
    const auto n = code.size();
    return bytes.size() == n && inst_pos.size() == n && op_pos.size() == n && arch.size() == n;
  }

  void push(std::int32_t c, const ByteSeq& b, std::int32_t ip, std::int32_t op, std::int32_t a) {
    code.push_back(c);
    bytes.push_back(b);
    inst_pos.push_back(ip);
    op_pos.push_back(op);
    arch.push_back(a);
  }

  friend bool operator==(const EncodedInput&, const EncodedInput&) = default;
};

/// Splits every executed instruction into tokens. Register tokens carry their
/// pre-execution values, numeric literals become `num` with the literal moved
/// into the value sequence, and everything else carries the dummy value.
inline EncodedInput tokenize_trace(const MicroTrace& trace, const Vocab& vocab) {
  EncodedInput e;
  const auto arch = static_cast<std::int32_t>(trace.dialect);
  for (std::size_t s = 0; s < trace.steps.size(); ++s) {
    const auto& st = trace.steps[s];
    const auto toks = tokenize(st.instr, trace.dialect);
    if (st.values.size() != toks.size())
      throw std::invalid_argument("tokenize_trace: step " + std::to_string(s) + " has " + std::to_string(st.values.size()) +
                                  " values for " + std::to_string(toks.size()) + " tokens");
    for (std::size_t k = 0; k < toks.size(); ++k)
      e.push(vocab.id(vocab_text(toks[k])), encode_value_bytes(st.values[k]), static_cast<std::int32_t>(s),
             static_cast<std::int32_t>(k), arch);
  }
  return e;
}

inline EncodedInput slice(const EncodedInput& e, std::size_t begin, std::size_t end) {
  EncodedInput out;
  for (std::size_t i = begin; i < end; ++i) out.push(e.code[i], e.bytes[i], e.inst_pos[i], e.op_pos[i], e.arch[i]);
  return out;
}

inline EncodedInput concat(const std::vector<EncodedInput>& parts) {
  EncodedInput out;
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.size(); ++i) out.push(p.code[i], p.bytes[i], p.inst_pos[i], p.op_pos[i], p.arch[i]);
  return out;
}

class SplitError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Contiguous chunks of at most max_len tokens. Boundaries snap back to the
/// start of an instruction, so an instruction is never cut in two.
inline std::vector<EncodedInput> split_subsequences(const EncodedInput& e, std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("split_subsequences: max_len must be positive");
  std::vector<EncodedInput> out;
  std::size_t begin = 0;
  const std::size_t n = e.size();
  while (begin < n) {
    std::size_t end = std::min(n, begin + max_len);
    if (end < n) {
      while (end > begin && e.inst_pos[end] == e.inst_pos[end - 1]) --end;
      if (end == begin)
        throw SplitError("instruction " + std::to_string(e.inst_pos[begin]) + " is longer than max_len " +
                         std::to_string(max_len));
    }
    out.push_back(slice(e, begin, end));
    begin = end;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskedInput {
  EncodedInput input;                    // code = MASK and bytes = DUMMY at masked positions
  std::vector<std::size_t> positions;    // sorted
  std::vector<std::int32_t> original_code;
  std::vector<ByteSeq> original_bytes;

  EncodedInput unmask() const {
    EncodedInput e = input;
    for (std::size_t k = 0; k < positions.size(); ++k) {
      e.code[positions[k]] = original_code[k];
      e.bytes[positions[k]] = original_bytes[k];
    }
    return e;
  }
};

/// Positions covered by a window of `window` tokens centred on `center`,
/// clipped to [0, n).
inline std::vector<std::size_t> mask_window(std::size_t center, std::size_t window, std::size_t n) {
  std::vector<std::size_t> out;
  const std::size_t half = window / 2;
  const std::size_t lo = center >= half ? center - half : 0;
  const std::size_t hi = std::min(n, center + half + 1);
  for (std::size_t i = lo; i < hi; ++i) out.push_back(i);
  return out;
}

inline MaskedInput mask_positions(const EncodedInput& e, std::vector<std::size_t> positions) {
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  MaskedInput m{e, positions, {}, {}};
  for (auto p : positions) {
    if (p >= e.size()) throw std::out_of_range("mask position " + std::to_string(p) + " outside sequence of " + std::to_string(e.size()));
    m.original_code.push_back(e.code[p]);
    m.original_bytes.push_back(e.bytes[p]);
    m.input.code[p] = Vocab::kMask;
    m.input.bytes[p] = kDummyBytes;
  }
  return m;
}

/// Span masking. Centres are drawn uniformly, each grows to a window drawn
/// from `windows`, and the last window is trimmed so that exactly
/// max(1, round(percent * n)) positions end up masked.
inline MaskedInput apply_mask(const EncodedInput& e, double percent, const std::vector<std::size_t>& windows,
                              std::uint64_t seed) {
  if (!(percent > 0.0 && percent < 1.0)) throw std::invalid_argument("apply_mask: percent must be in (0, 1)");
  if (windows.empty()) throw std::invalid_argument("apply_mask: no window sizes");
  const std::size_t n = e.size();
  if (n == 0) return mask_positions(e, {});
  const auto target = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(percent * static_cast<double>(n))));
  detail::Rng rng(seed);
  std::set<std::size_t> chosen;
  while (chosen.size() < target) {
    const std::size_t center = rng.below(n);
    const std::size_t window = windows[rng.below(windows.size())];
    // centre first, then outward, so trimming keeps the span contiguous
    auto span = mask_window(center, window, n);
    std::stable_sort(span.begin(), span.end(), [&](std::size_t a, std::size_t b) {
      auto da = a > center ? a - center : center - a;
      auto db = b > center ? b - center : center - b;
      return da < db;
    });
    for (auto p : span) {
      if (chosen.size() == target) break;
      chosen.insert(p);
    }
  }
  return mask_positions(e, {chosen.begin(), chosen.end()});
}

inline MaskedInput apply_mask(const EncodedInput& e, double percent, std::uint64_t seed) {
  return apply_mask(e, percent, {1, 3, 5}, seed);
}

// ---------------------------------------------------------------------------
// Encoded dataset container: `<prefix>.bin` holds fixed-width little-endian
// records; `<prefix>.manifest` lists one `index length offset tag` line per
// sequence after a header line.

struct EncodedRecord {
  std::string tag;  // e.g. function id and trace kind
  EncodedInput input;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw std::runtime_error("encoded container truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t{static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])} << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace detail

inline constexpr std::size_t kEncodedTokenBytes = 4 * 4 + 2 * kValueBytes;

inline void write_encoded(const std::string& prefix, const std::vector<EncodedRecord>& records) {
  std::string bin;
  std::ostringstream manifest;
  manifest << "semtrace-encoded 1 " << records.size() << "\n";
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& e = records[r].input;
    manifest << r << " " << e.size() << " " << bin.size() << " " << records[r].tag << "\n";
    for (std::size_t i = 0; i < e.size(); ++i) {
      detail::put_le(bin, static_cast<std::uint32_t>(e.code[i]), 4);
      detail::put_le(bin, static_cast<std::uint32_t>(e.inst_pos[i]), 4);
      detail::put_le(bin, static_cast<std::uint32_t>(e.op_pos[i]), 4);
      detail::put_le(bin, static_cast<std::uint32_t>(e.arch[i]), 4);
      for (auto b : e.bytes[i]) detail::put_le(bin, b, 2);
    }
  }
  detail::write_file(prefix + ".bin", bin);
  detail::write_file(prefix + ".manifest", manifest.str());
}

inline std::vector<EncodedRecord> read_encoded(const std::string& prefix) {
  const std::string bin = detail::read_file(prefix + ".bin");
  std::istringstream manifest(detail::read_file(prefix + ".manifest"));
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  manifest >> magic >> version >> count;
  if (magic != "semtrace-encoded" || version != 1) throw std::runtime_error(prefix + ".manifest: not an encoded container");
  std::vector<EncodedRecord> out;
  for (std::size_t r = 0; r < count; ++r) {
    std::size_t idx = 0, len = 0, offset = 0;
    std::string tag;
    if (!(manifest >> idx >> len >> offset >> tag) || idx != r) throw std::runtime_error(prefix + ".manifest: bad record line");
    std::size_t pos = offset;
    EncodedRecord rec{tag, {}};
    for (std::size_t i = 0; i < len; ++i) {
      const auto c = static_cast<std::int32_t>(detail::get_le(bin, pos, 4));
      const auto ip = static_cast<std::int32_t>(detail::get_le(bin, pos, 4));
      const auto op = static_cast<std::int32_t>(detail::get_le(bin, pos, 4));
      const auto a = static_cast<std::int32_t>(detail::get_le(bin, pos, 4));
      ByteSeq b{};
      for (auto& x : b) x = static_cast<std::uint16_t>(detail::get_le(bin, pos, 2));
      rec.input.push(c, b, ip, op, a);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace semtrace
