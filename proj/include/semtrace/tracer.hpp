#pragma once

// Micro-execution of a single IR function under a randomized initial state.
//
// Registers other than the stack pointer start from a seeded stream, memory
// is mapped on first touch, and reads of never-written bytes see seeded
// random bytes. Jumps and calls whose target lies outside the function's code
// region are skipped, nops are skipped, and execution stops at `ret`, at the
// end of the code, or when the step budget runs out.

#include <algorithm>
#include <array>
#include <bitset>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "semtrace/ir.hpp"

namespace semtrace {

struct TracerConfig {
  std::uint64_t step_budget = 4096;
  std::uint64_t stack_size = 4096;
  std::uint64_t code_base = 0x1000;
  std::uint64_t stack_base = 0x7fff0000;
};

/// A dynamic value attached to a token; nullopt is the dummy value `##`.
using TraceValue = std::optional<std::uint64_t>;

class Memory {
 public:
  static constexpr std::uint64_t kPageSize = 4096;

  struct Page {
    std::array<std::uint8_t, kPageSize> bytes{};
    std::bitset<kPageSize> written;
  };

  void map(std::uint64_t addr, std::uint64_t size) {
    for (std::uint64_t off = 0; off < size;) {
      const std::uint64_t a = addr + off;
      pages_.try_emplace(a / kPageSize);
      off += kPageSize - a % kPageSize;
    }
  }

  bool is_mapped(std::uint64_t addr, std::uint64_t size) const {
    for (std::uint64_t off = 0; off < size;) {
      const std::uint64_t a = addr + off;
      if (!pages_.count(a / kPageSize)) return false;
      off += kPageSize - a % kPageSize;
    }
    return true;
  }

  /// Little-endian 8-byte store. The range must be mapped.
  void store(std::uint64_t addr, std::uint64_t value) {
    for (std::uint64_t k = 0; k < 8; ++k) {
      const std::uint64_t a = addr + k;
      Page& p = pages_.at(a / kPageSize);
      p.bytes[a % kPageSize] = static_cast<std::uint8_t>(value >> (8 * k));
      p.written.set(a % kPageSize);
    }
  }

  /// Little-endian 8-byte load. Bytes never written are first filled from
  /// `rng`, lowest address first, so the same read sequence consumes the
  /// stream identically.
  template <class Rng>
  std::uint64_t load(std::uint64_t addr, Rng& rng) {
    std::uint64_t v = 0;
    for (std::uint64_t k = 0; k < 8; ++k) {
      const std::uint64_t a = addr + k;
      Page& p = pages_.at(a / kPageSize);
      const auto off = a % kPageSize;
      if (!p.written.test(off)) {
        p.bytes[off] = static_cast<std::uint8_t>(rng() & 0xff);
        p.written.set(off);
      }
      v |= std::uint64_t{p.bytes[off]} << (8 * k);
    }
    return v;
  }

  /// Every byte that has been written or filled, keyed by address.
  std::map<std::uint64_t, std::uint8_t> contents() const {
    std::map<std::uint64_t, std::uint8_t> out;
    for (const auto& [page, p] : pages_)
      for (std::size_t i = 0; i < kPageSize; ++i)
        if (p.written.test(i)) out.emplace(page * kPageSize + i, p.bytes[i]);
    return out;
  }

  std::size_t mapped_pages() const { return pages_.size(); }

 private:
  std::map<std::uint64_t, Page> pages_;
};

struct MachineState {
  std::array<std::uint64_t, kNumRegisters> regs{};
  Memory memory;
  std::size_t pc = 0;
  std::mt19937_64 rng;
  std::uint64_t steps = 0;
  std::uint64_t code_base = 0;
  std::uint64_t code_size = 0;

  bool in_code(std::uint64_t addr) const { return addr >= code_base && addr - code_base < code_size; }
};

enum class Termination : std::uint8_t { ret, end_of_code, budget_exhausted };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::ret: return "ret";
    case Termination::end_of_code: return "end_of_code";
    case Termination::budget_exhausted: return "budget_exhausted";
  }
  return "?";
}

inline std::optional<Termination> termination_from_string(std::string_view s) {
  for (auto t : {Termination::ret, Termination::end_of_code, Termination::budget_exhausted})
    if (s == to_string(t)) return t;
  return std::nullopt;
}

/// One executed instruction. `values` is aligned with tokenize(instr): the
/// pre-execution value of each register token, the literal of each constant
/// token, and dummy elsewhere.
struct TraceStep {
  std::size_t index = 0;
  Instruction instr;
  std::vector<TraceValue> values;
  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct MicroTrace {
  std::string fn_id;
  DialectId dialect = DialectId::arch_a;
  std::vector<TraceStep> steps;
  Termination terminated_by = Termination::end_of_code;
  friend bool operator==(const MicroTrace&, const MicroTrace&) = default;
};

/// Stack and code regions mapped, pc at entry, sp in the middle of the
/// stack, every other register drawn uniformly from [0, 2^32) in index order.
inline MachineState init_state(const Function& fn, std::uint64_t seed, const TracerConfig& cfg = {}) {
  MachineState s;
  s.rng.seed(seed);
  s.code_base = cfg.code_base;
  s.code_size = fn.body.size();
  s.memory.map(cfg.stack_base, cfg.stack_size);
  s.memory.map(cfg.code_base, std::max<std::uint64_t>(s.code_size, 1));
  for (std::size_t i = 0; i < kNumRegisters; ++i) {
    if (i == kStackRegister) continue;
    s.regs[i] = s.rng() & 0xffffffffULL;
  }
  s.regs[kStackRegister] = cfg.stack_base + cfg.stack_size / 2;
  return s;
}

inline std::uint64_t apply(BinOpKind op, std::uint64_t a, std::uint64_t b) {
  switch (op) {
    case BinOpKind::add: return a + b;
    case BinOpKind::sub: return a - b;
    case BinOpKind::mul: return a * b;
    case BinOpKind::bit_and: return a & b;
    case BinOpKind::bit_or: return a | b;
    case BinOpKind::bit_xor: return a ^ b;
    case BinOpKind::shl: return a << (b & 63);
    case BinOpKind::shr: return a >> (b & 63);
  }
  return 0;
}

inline std::uint64_t eval(const Expr& e, const std::array<std::uint64_t, kNumRegisters>& regs) {
  return std::visit(overloaded{[](const Const& c) { return c.value; },
                               [&](const Register& r) { return regs[r.index]; },
                               [&](const BinOp& b) {
                                 const std::uint64_t rhs = std::visit(
                                     overloaded{[&](const Register& r) { return regs[r.index]; },
                                                [](const Const& c) { return c.value; }},
                                     b.right);
                                 return apply(b.op, regs[b.left.index], rhs);
                               }},
                    e);
}

inline std::vector<TraceValue> pre_values(const Instruction& instr, DialectId d,
                                          const std::array<std::uint64_t, kNumRegisters>& regs) {
  std::vector<TraceValue> out;
  for (const Token& t : tokenize(instr, d)) {
    if (t.kind == TokenKind::reg)
      out.emplace_back(regs[t.reg.index]);
    else if (t.kind == TokenKind::num)
      out.emplace_back(t.value);
    else
      out.emplace_back(std::nullopt);
  }
  return out;
}

struct StepOutcome {
  std::optional<TraceStep> record;  // empty when the instruction was skipped
  bool halted = false;
  std::optional<std::uint64_t> access_addr;
};

/// Executes the instruction at state.pc and advances pc.
inline StepOutcome step(MachineState& s, const Instruction& instr, DialectId d) {
  StepOutcome out;
  auto record = [&] { out.record = TraceStep{s.pc, instr, pre_values(instr, d, s.regs)}; };
  std::size_t next = s.pc + 1;
  std::visit(overloaded{
                 [&](const Assign& a) {
                   record();
                   s.regs[a.dst.index] = eval(a.src, s.regs);
                 },
                 [&](const Load& l) {
                   record();
                   const auto addr = eval(l.addr, s.regs);
                   s.memory.map(addr, 8);
                   out.access_addr = addr;
                   s.regs[l.dst.index] = s.memory.load(addr, s.rng);
                 },
                 [&](const Store& st) {
                   record();
                   const auto value = eval(st.value, s.regs);
                   const auto addr = eval(st.addr, s.regs);
                   s.memory.map(addr, 8);
                   out.access_addr = addr;
                   s.memory.store(addr, value);
                 },
                 [&](const Jmp& j) {
                   const auto target = eval(j.target, s.regs);
                   if (!s.in_code(target)) return;  // forced execution: fall through
                   record();
                   if (eval(j.cond, s.regs) != 0) next = static_cast<std::size_t>(target - s.code_base);
                 },
                 [&](const Call& c) {
                   // in-range calls are recorded but never transfer control
                   if (s.in_code(eval(c.target, s.regs))) record();
                 },
                 [&](const Ret&) {
                   record();
                   out.halted = true;
                 },
                 [](const Nop&) {},
             },
             instr);
  s.pc = next;
  ++s.steps;
  return out;
}

struct ExecutionResult {
  MicroTrace trace;
  MachineState final_state;
};

/// Runs `fn` from an explicit starting state.
inline ExecutionResult execute(const Function& fn, MachineState state, const TracerConfig& cfg = {}) {
  ExecutionResult r{{fn.id, fn.dialect, {}, Termination::end_of_code}, {}};
  while (true) {
    if (state.pc >= fn.body.size()) {
      r.trace.terminated_by = Termination::end_of_code;
      break;
    }
    if (state.steps >= cfg.step_budget) {
      r.trace.terminated_by = Termination::budget_exhausted;
      break;
    }
    auto out = step(state, fn.body[state.pc], fn.dialect);
    if (out.record) r.trace.steps.push_back(std::move(*out.record));
    if (out.halted) {
      r.trace.terminated_by = Termination::ret;
      break;
    }
  }
  r.final_state = std::move(state);
  return r;
}

inline MicroTrace micro_execute(const Function& fn, std::uint64_t seed, const TracerConfig& cfg = {}) {
  return execute(fn, init_state(fn, seed, cfg), cfg).trace;
}

/// The static code in order with every value dummy.
inline MicroTrace dummy_trace(const Function& fn) {
  MicroTrace t{fn.id, fn.dialect, {}, Termination::end_of_code};
  for (std::size_t i = 0; i < fn.body.size(); ++i) {
    t.steps.push_back({i, fn.body[i], std::vector<TraceValue>(tokenize(fn.body[i], fn.dialect).size())});
    if (std::holds_alternative<Ret>(fn.body[i]) && i + 1 == fn.body.size()) t.terminated_by = Termination::ret;
  }
  return t;
}

/// One concrete trace per seed followed by the dummy trace.
inline std::vector<MicroTrace> trace_batch(const Function& fn, const std::vector<std::uint64_t>& seeds,
                                           const TracerConfig& cfg = {}) {
  std::vector<MicroTrace> out;
  out.reserve(seeds.size() + 1);
  for (auto s : seeds) out.push_back(micro_execute(fn, s, cfg));
  out.push_back(dummy_trace(fn));
  return out;
}

inline bool is_dummy(const MicroTrace& t) {
  for (const auto& st : t.steps)
    for (const auto& v : st.values)
      if (v) return false;
  return true;
}

}  // namespace semtrace
