#pragma once

// Low-level IR shared by the tracer, the transform passes and the encoder.
//
// Concrete syntax, one instruction per line:
//
//   dst := expr          dst := load(expr)      store(value, addr)
//   jmp cond, target     call target            ret      nop
//
// expr is a constant, a register, or `reg <op> reg-or-const`. Keywords and
// operator spellings depend on the dialect; registers, punctuation and
// constants are shared in shape only (r0..r15 vs s0..s15).

#include <array>
#include <charconv>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace semtrace {

enum class DialectId : std::uint8_t { arch_a = 0, arch_b = 1 };

inline constexpr std::size_t kNumRegisters = 16;
inline constexpr std::uint8_t kStackRegister = 15;
inline constexpr std::size_t kDefaultMaxInstructions = 4096;

enum class BinOpKind : std::uint8_t { add, sub, mul, bit_and, bit_or, bit_xor, shl, shr };
inline constexpr std::size_t kNumBinOps = 8;

struct Keywords {
  std::string load, store, jmp, call, ret, nop;
  std::array<std::string, kNumBinOps> binops;
};

struct Dialect {
  DialectId id;
  std::string tag;
  char register_prefix;
  Keywords keywords;
};

inline const std::vector<Dialect>& dialects() {
  static const std::vector<Dialect> table = {
      {DialectId::arch_a, "archA", 'r',
       {"load", "store", "jmp", "call", "ret", "nop",
        {"+", "-", "*", "&", "|", "^", "<<", ">>"}}},
      {DialectId::arch_b, "archB", 's',
       {"ld", "st", "br", "bl", "rts", "skip",
        {"plus", "minus", "times", "band", "bor", "bxor", "lsl", "lsr"}}},
  };
  return table;
}

inline const Dialect& dialect(DialectId id) { return dialects().at(static_cast<std::size_t>(id)); }

inline std::optional<DialectId> find_dialect(std::string_view tag) {
  for (const auto& d : dialects())
    if (d.tag == tag) return d.id;
  return std::nullopt;
}

inline std::size_t num_dialects() { return dialects().size(); }

struct Register {
  DialectId dialect = DialectId::arch_a;
  std::uint8_t index = 0;
  friend bool operator==(const Register&, const Register&) = default;
};

inline std::string register_name(Register r) {
  return dialect(r.dialect).register_prefix + std::to_string(r.index);
}

struct Const {
  std::uint64_t value = 0;
  friend bool operator==(const Const&, const Const&) = default;
};

using Operand = std::variant<Register, Const>;

struct BinOp {
  BinOpKind op = BinOpKind::add;
  Register left;
  Operand right;
  friend bool operator==(const BinOp&, const BinOp&) = default;
};

using Expr = std::variant<Const, Register, BinOp>;

struct Assign {
  Register dst;
  Expr src;
  friend bool operator==(const Assign&, const Assign&) = default;
};
struct Load {
  Register dst;
  Expr addr;
  friend bool operator==(const Load&, const Load&) = default;
};
struct Store {
  Expr value;
  Expr addr;
  friend bool operator==(const Store&, const Store&) = default;
};
struct Jmp {
  Expr cond;
  Expr target;
  friend bool operator==(const Jmp&, const Jmp&) = default;
};
struct Call {
  Expr target;
  friend bool operator==(const Call&, const Call&) = default;
};
struct Ret {
  friend bool operator==(const Ret&, const Ret&) = default;
};
struct Nop {
  friend bool operator==(const Nop&, const Nop&) = default;
};

using Instruction = std::variant<Assign, Load, Store, Jmp, Call, Ret, Nop>;

struct Function {
  std::string id;
  DialectId dialect = DialectId::arch_a;
  std::vector<Instruction> body;
  friend bool operator==(const Function&, const Function&) = default;
};

template <class... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

// ---------------------------------------------------------------------------
// Errors

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Tokens

enum class TokenKind : std::uint8_t { keyword, op, punct, reg, num };

struct Token {
  std::string text;
  TokenKind kind = TokenKind::punct;
  Register reg{};            // valid when kind == reg
  std::uint64_t value = 0;   // valid when kind == num
};

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

namespace detail {

inline void emit_operand(std::vector<Token>& out, const Operand& o) {
  std::visit(overloaded{[&](const Register& r) { out.push_back({register_name(r), TokenKind::reg, r, 0}); },
                        [&](const Const& c) { out.push_back({hex(c.value), TokenKind::num, {}, c.value}); }},
             o);
}

inline void emit_expr(std::vector<Token>& out, const Expr& e, const Keywords& kw) {
  std::visit(overloaded{[&](const Const& c) { emit_operand(out, c); },
                        [&](const Register& r) { emit_operand(out, r); },
                        [&](const BinOp& b) {
                          emit_operand(out, b.left);
                          out.push_back({kw.binops[static_cast<std::size_t>(b.op)], TokenKind::op});
                          emit_operand(out, b.right);
                        }},
             e);
}

inline Token punct(std::string_view s) { return {std::string(s), TokenKind::punct}; }

}  // namespace detail

/// Token sequence of one instruction as the model sees it. Rendering joins
/// these with fixed spacing, and lexing the rendered text gives back the same
/// token texts.
inline std::vector<Token> tokenize(const Instruction& instr, DialectId d) {
  const Keywords& kw = dialect(d).keywords;
  std::vector<Token> out;
  auto keyword = [&](const std::string& k) { out.push_back({k, TokenKind::keyword}); };
  std::visit(overloaded{
                 [&](const Assign& a) {
                   detail::emit_operand(out, a.dst);
                   out.push_back(detail::punct(":="));
                   detail::emit_expr(out, a.src, kw);
                 },
                 [&](const Load& l) {
                   detail::emit_operand(out, l.dst);
                   out.push_back(detail::punct(":="));
                   keyword(kw.load);
                   out.push_back(detail::punct("("));
                   detail::emit_expr(out, l.addr, kw);
                   out.push_back(detail::punct(")"));
                 },
                 [&](const Store& s) {
                   keyword(kw.store);
                   out.push_back(detail::punct("("));
                   detail::emit_expr(out, s.value, kw);
                   out.push_back(detail::punct(","));
                   detail::emit_expr(out, s.addr, kw);
                   out.push_back(detail::punct(")"));
                 },
                 [&](const Jmp& j) {
                   keyword(kw.jmp);
                   detail::emit_expr(out, j.cond, kw);
                   out.push_back(detail::punct(","));
                   detail::emit_expr(out, j.target, kw);
                 },
                 [&](const Call& c) {
                   keyword(kw.call);
                   detail::emit_expr(out, c.target, kw);
                 },
                 [&](const Ret&) { keyword(kw.ret); },
                 [&](const Nop&) { keyword(kw.nop); },
             },
             instr);
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

inline std::string render(const Instruction& instr, DialectId d) {
  const auto toks = tokenize(instr, d);
  std::string s;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto& t = toks[i].text;
    // parentheses only follow load/store keywords: `load(x)`, `store(a, b)`
    if (i > 0 && t != "(" && t != ")" && t != "," && toks[i - 1].text != "(") s += ' ';
    s += t;
  }
  return s;
}

/// Body only, one instruction per line, no trailing newline.
inline std::string render(const Function& fn) {
  std::string s;
  for (std::size_t i = 0; i < fn.body.size(); ++i) {
    if (i) s += '\n';
    s += render(fn.body[i], fn.dialect);
  }
  return s;
}

/// Full `.irfn` file contents with the `fn <id> @<dialect>` header.
inline std::string render_file(const Function& fn) {
  std::string s = "fn " + fn.id + " @" + dialect(fn.dialect).tag + "\n";
  s += render(fn);
  s += '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Lexing and parsing

namespace detail {

inline bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

inline std::optional<std::uint64_t> parse_number(std::string_view s) {
  std::uint64_t v = 0;
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    s.remove_prefix(2);
    base = 16;
  }
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec == std::errc::result_out_of_range) throw std::out_of_range("constant overflow");
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<Register> parse_register(std::string_view w, DialectId d) {
  if (w.size() < 2 || w[0] != dialect(d).register_prefix) return std::nullopt;
  if (w.size() > 2 && w[1] == '0') return std::nullopt;
  unsigned idx = 0;
  auto [ptr, ec] = std::from_chars(w.data() + 1, w.data() + w.size(), idx);
  if (ec != std::errc() || ptr != w.data() + w.size() || idx >= kNumRegisters) return std::nullopt;
  return Register{d, static_cast<std::uint8_t>(idx)};
}

inline Token classify(std::string_view w, DialectId d, std::size_t line) {
  const Keywords& kw = dialect(d).keywords;
  if (w[0] >= '0' && w[0] <= '9') {
    try {
      if (auto v = parse_number(w)) return {std::string(w), TokenKind::num, {}, *v};
    } catch (const std::out_of_range&) {
      throw ParseError(line, "constant overflow: " + std::string(w));
    }
    throw ParseError(line, "malformed number: " + std::string(w));
  }
  if (auto r = parse_register(w, d)) return {std::string(w), TokenKind::reg, *r, 0};
  for (const auto& k : {kw.load, kw.store, kw.jmp, kw.call, kw.ret, kw.nop})
    if (w == k) return {std::string(w), TokenKind::keyword};
  for (const auto& op : kw.binops)
    if (w == op) return {std::string(w), TokenKind::op};
  throw ParseError(line, "unknown token '" + std::string(w) + "' for dialect " + dialect(d).tag);
}

inline std::vector<Token> lex_line(std::string_view text, DialectId d, std::size_t line) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
    } else if (c == '(' || c == ')' || c == ',') {
      out.push_back(punct(std::string_view(&text[i], 1)));
      ++i;
    } else if (c == ':' && i + 1 < text.size() && text[i + 1] == '=') {
      out.push_back(punct(":="));
      i += 2;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(text[j])) ++j;
      out.push_back(classify(text.substr(i, j - i), d, line));
      i = j;
    } else {
      // symbolic operators: longest match against the dialect's table
      std::string best;
      for (const auto& op : dialect(d).keywords.binops)
        if (!is_word_char(op[0]) && text.substr(i, op.size()) == op && op.size() > best.size()) best = op;
      if (best.empty()) throw ParseError(line, std::string("unexpected character '") + c + "'");
      out.push_back({best, TokenKind::op});
      i += best.size();
    }
  }
  return out;
}

class LineParser {
 public:
  LineParser(std::vector<Token> toks, DialectId d, std::size_t line)
      : toks_(std::move(toks)), kw_(dialect(d).keywords), line_(line) {}

  Instruction parse() {
    Instruction out = parse_instruction();
    if (pos_ != toks_.size()) fail("trailing token '" + toks_[pos_].text + "'");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(line_, msg); }

  const Token* peek() const { return pos_ < toks_.size() ? &toks_[pos_] : nullptr; }

  const Token& next(const char* what) {
    if (pos_ >= toks_.size()) fail(std::string("expected ") + what + " at end of line");
    return toks_[pos_++];
  }

  void expect(std::string_view text) {
    const Token& t = next(std::string(text).c_str());
    if (t.text != text) fail("expected '" + std::string(text) + "', got '" + t.text + "'");
  }

  bool is_keyword(const Token& t, const std::string& k) const { return t.kind == TokenKind::keyword && t.text == k; }

  Operand operand() {
    const Token& t = next("operand");
    if (t.kind == TokenKind::reg) return t.reg;
    if (t.kind == TokenKind::num) return Const{t.value};
    fail("expected register or constant, got '" + t.text + "'");
  }

  Expr expr() {
    Operand first = operand();
    const Token* t = peek();
    if (!t || t->kind != TokenKind::op) {
      if (auto* r = std::get_if<Register>(&first)) return *r;
      return std::get<Const>(first);
    }
    ++pos_;
    auto* left = std::get_if<Register>(&first);
    if (!left) fail("left operand of '" + t->text + "' must be a register");
    std::size_t op = 0;
    while (kw_.binops[op] != t->text) ++op;
    return BinOp{static_cast<BinOpKind>(op), *left, operand()};
  }

  Instruction parse_instruction() {
    const Token& head = next("instruction");
    if (head.kind == TokenKind::reg) {
      expect(":=");
      const Token* t = peek();
      if (t && is_keyword(*t, kw_.load)) {
        ++pos_;
        expect("(");
        Expr addr = expr();
        expect(")");
        return Load{head.reg, addr};
      }
      return Assign{head.reg, expr()};
    }
    if (is_keyword(head, kw_.store)) {
      expect("(");
      Expr v = expr();
      expect(",");
      Expr a = expr();
      expect(")");
      return Store{v, a};
    }
    if (is_keyword(head, kw_.jmp)) {
      Expr c = expr();
      expect(",");
      return Jmp{c, expr()};
    }
    if (is_keyword(head, kw_.call)) return Call{expr()};
    if (is_keyword(head, kw_.ret)) return Ret{};
    if (is_keyword(head, kw_.nop)) return Nop{};
    fail("unexpected '" + head.text + "' at start of instruction");
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
  const Keywords& kw_;
  std::size_t line_;
};

inline bool skippable(std::string_view line) {
  const auto p = line.find_first_not_of(" \t\r");
  return p == std::string_view::npos || line[p] == '#';
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

}  // namespace detail

/// Lexes rendered instruction text back into tokens.
inline std::vector<Token> lex(std::string_view line, DialectId d) { return detail::lex_line(line, d, 1); }

inline Instruction parse_instruction(std::string_view line, DialectId d, std::size_t line_no = 1) {
  return detail::LineParser(detail::lex_line(line, d, line_no), d, line_no).parse();
}

/// Parses a function body. Blank lines and `#` comment lines are skipped;
/// errors carry the 1-based line number within `text`.
inline Function parse_function(std::string_view text, DialectId d, std::string id = {}) {
  Function fn{std::move(id), d, {}};
  const auto lines = detail::split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::skippable(lines[i])) continue;
    fn.body.push_back(parse_instruction(lines[i], d, i + 1));
  }
  return fn;
}

/// Parses a `.irfn` file: header line `fn <id> @<dialect>` then the body.
inline Function parse_function_file(std::string_view text) {
  const auto lines = detail::split_lines(text);
  std::size_t i = 0;
  while (i < lines.size() && detail::skippable(lines[i])) ++i;
  if (i == lines.size()) throw ParseError(1, "missing 'fn <id> @<dialect>' header");
  std::istringstream header{std::string(lines[i])};
  std::string fn_kw, id, tag;
  header >> fn_kw >> id >> tag;
  if (fn_kw != "fn" || id.empty() || tag.size() < 2 || tag[0] != '@')
    throw ParseError(i + 1, "malformed header, expected 'fn <id> @<dialect>'");
  auto d = find_dialect(tag.substr(1));
  if (!d) throw ParseError(i + 1, "unknown dialect '" + tag.substr(1) + "'");
  Function fn{id, *d, {}};
  for (std::size_t j = i + 1; j < lines.size(); ++j) {
    if (detail::skippable(lines[j])) continue;
    fn.body.push_back(parse_instruction(lines[j], *d, j + 1));
  }
  return fn;
}

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind : std::uint8_t { non_empty, dialect, register_range, too_long };

struct Violation {
  ViolationKind kind;
  std::size_t instruction = 0;
  std::string message;
};

template <class F>
void for_each_register(const Instruction& instr, F&& f) {
  auto operand = [&](const Operand& o) {
    if (auto* r = std::get_if<Register>(&o)) f(*r);
  };
  auto expr = [&](const Expr& e) {
    std::visit(overloaded{[](const Const&) {}, [&](const Register& r) { f(r); },
                          [&](const BinOp& b) {
                            f(b.left);
                            operand(b.right);
                          }},
               e);
  };
  std::visit(overloaded{[&](const Assign& a) {
                          f(a.dst);
                          expr(a.src);
                        },
                        [&](const Load& l) {
                          f(l.dst);
                          expr(l.addr);
                        },
                        [&](const Store& s) {
                          expr(s.value);
                          expr(s.addr);
                        },
                        [&](const Jmp& j) {
                          expr(j.cond);
                          expr(j.target);
                        },
                        [&](const Call& c) { expr(c.target); }, [](const Ret&) {}, [](const Nop&) {}},
             instr);
}

inline std::vector<Violation> validate(const Function& fn, std::size_t max_instructions = kDefaultMaxInstructions) {
  std::vector<Violation> out;
  if (fn.body.empty()) out.push_back({ViolationKind::non_empty, 0, "function has no instructions"});
  if (fn.body.size() > max_instructions)
    out.push_back({ViolationKind::too_long, max_instructions,
                   "function has " + std::to_string(fn.body.size()) + " instructions, limit " +
                       std::to_string(max_instructions)});
  for (std::size_t i = 0; i < fn.body.size(); ++i) {
    for_each_register(fn.body[i], [&](Register r) {
      if (r.dialect != fn.dialect)
        out.push_back({ViolationKind::dialect, i,
                       "register of dialect " + dialect(r.dialect).tag + " in " + dialect(fn.dialect).tag + " function"});
      if (r.index >= kNumRegisters)
        out.push_back({ViolationKind::register_range, i, "register index " + std::to_string(r.index) + " out of range"});
    });
  }
  return out;
}

inline bool is_valid(const Function& fn, std::size_t max_instructions = kDefaultMaxInstructions) {
  return validate(fn, max_instructions).empty();
}

}  // namespace semtrace
