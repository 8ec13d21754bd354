#pragma once

// Synthetic function generator, semantics-preserving rewrite passes, and
// labeled pair datasets built from them.
//
// Functions derived from the same generator seed are "similar"; the passes
// stand in for cross-architecture, cross-optimization and obfuscation
// variants. Every pass keeps final register and memory state identical under
// the register mapping it reports, as long as control flow only uses
// constant targets (which is all the generator emits).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "semtrace/ir.hpp"
#include "semtrace/random.hpp"
#include "semtrace/tracer.hpp"

namespace semtrace {


// ---------------------------------------------------------------------------
// Generator

struct SizeRange {
  std::size_t min = 8;
  std::size_t max = 24;
};

inline constexpr std::size_t kMaxGeneratedSize = 512;

namespace detail {

class FunctionBuilder {
 public:
  FunctionBuilder(std::uint64_t seed, std::size_t size, DialectId d, std::uint64_t code_base)
      : rng_(seed), size_(size), d_(d), base_(code_base) {}

  Function build(std::string id) {
    while (items_.size() + 1 < size_) {
      const std::size_t room = size_ - 1 - items_.size();
      const auto roll = rng_.below(100);
      if (roll < 8 && room >= 5)
        counted_loop(room);
      else if (roll < 20 && room >= 3)
        forward_jump();
      else if (roll < 25)
        items_.push_back({Call{Const{0x400000 + 16 * rng_.below(0x10000)}}, {}});
      else if (roll < 28)
        items_.push_back({Nop{}, {}});
      else
        straight(std::nullopt);
    }
    if (rng_.chance(0.9)) {
      items_.push_back({Ret{}, {}});
    } else {
      straight(std::nullopt);
    }
    resolve_jumps();
    Function fn{std::move(id), d_, {}};
    for (auto& it : items_) fn.body.push_back(std::move(it.instr));
    return fn;
  }

 private:
  struct Item {
    Instruction instr;
    std::optional<std::size_t> pending_forward;  // max distance for an unresolved forward jump
  };

  Register reg(std::uint8_t i) const { return Register{d_, i}; }
  Register sp() const { return reg(kStackRegister); }

  Register general(std::optional<std::uint8_t> avoid) {
    while (true) {
      auto r = static_cast<std::uint8_t>(rng_.below(8));  // a small working set keeps data flow dense
      if (!avoid || r != *avoid) return reg(r);
    }
  }

  std::uint64_t small_const() { return rng_.range(1, 16); }

  Expr stack_slot() {
    const std::uint64_t off = 8 * rng_.range(1, 8);
    return BinOp{rng_.chance(0.5) ? BinOpKind::add : BinOpKind::sub, sp(), Const{off}};
  }

  // One straight-line instruction that never writes `avoid`.
  void straight(std::optional<std::uint8_t> avoid) {
    const Register dst = general(avoid);
    const auto roll = rng_.below(100);
    Instruction ins;
    if (roll < 12) {
      ins = Assign{dst, Const{rng_.chance(0.2) ? 0 : (rng_.chance(0.5) ? small_const() : rng_.next() & 0xffff)}};
    } else if (roll < 18) {
      ins = Assign{dst, general(std::nullopt)};
    } else if (roll < 48) {
      const std::array ops{BinOpKind::add, BinOpKind::sub, BinOpKind::bit_and, BinOpKind::bit_or, BinOpKind::bit_xor};
      ins = Assign{dst, BinOp{ops[rng_.below(ops.size())], general(std::nullopt), general(std::nullopt)}};
    } else if (roll < 66) {
      const auto op = static_cast<BinOpKind>(rng_.below(kNumBinOps));
      std::uint64_t c = small_const();
      if (op == BinOpKind::mul) c = std::uint64_t{1} << rng_.range(1, 3);
      if (op == BinOpKind::shl || op == BinOpKind::shr) c = rng_.range(1, 12);
      if (op == BinOpKind::bit_and) c = rng_.chance(0.5) ? 0xff : 0xffff;
      ins = Assign{dst, BinOp{op, general(std::nullopt), Const{c}}};
    } else if (roll < 80) {
      ins = Load{dst, rng_.chance(0.85) ? stack_slot() : Expr{general(std::nullopt)}};
    } else {
      Expr value = rng_.chance(0.8) ? Expr{general(std::nullopt)} : Expr{Const{small_const()}};
      ins = Store{value, stack_slot()};
    }
    items_.push_back({std::move(ins), {}});
  }

  void forward_jump() {
    Expr cond = rng_.chance(0.7) ? Expr{BinOp{BinOpKind::bit_and, general(std::nullopt), Const{1}}}
                                 : Expr{general(std::nullopt)};
    items_.push_back({Jmp{cond, Const{0}}, rng_.range(2, 6)});
  }

  // counter := k; body; counter := counter - 1; jmp counter, body
  void counted_loop(std::size_t room) {
    const auto counter = static_cast<std::uint8_t>(8 + rng_.below(7));  // disjoint from the working set
    const std::size_t body = std::min<std::size_t>(rng_.range(1, 3), room - 3);
    items_.push_back({Assign{reg(counter), Const{rng_.range(2, 4)}}, {}});
    const std::size_t start = items_.size();
    for (std::size_t i = 0; i < body; ++i) straight(counter);
    items_.push_back({Assign{reg(counter), BinOp{BinOpKind::sub, reg(counter), Const{1}}}, {}});
    items_.push_back({Jmp{reg(counter), Const{base_ + start}}, {}});
    for (std::size_t i = start; i < items_.size(); ++i) loop_interior_.insert(i);
  }

  void resolve_jumps() {
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto& it = items_[i];
      if (!it.pending_forward) continue;
      std::vector<std::size_t> allowed;
      for (std::size_t t = i + 2; t < items_.size() && t <= i + *it.pending_forward; ++t)
        if (!loop_interior_.count(t)) allowed.push_back(t);
      if (allowed.empty()) {
        it.instr = Nop{};
      } else {
        std::get<Jmp>(it.instr).target = Const{base_ + rng_.pick(allowed)};
      }
    }
  }

  Rng rng_;
  std::size_t size_;
  DialectId d_;
  std::uint64_t base_;
  std::vector<Item> items_;
  std::set<std::size_t> loop_interior_;
};

}  // namespace detail

inline std::string source_id(std::uint64_t seed) { return "f" + std::to_string(seed); }

/// Deterministic in (seed, size, dialect). Candidates that fail to terminate
/// within the tracer budget on three probe seeds are regenerated.
inline Function gen_function(std::uint64_t seed, SizeRange size = {}, DialectId d = DialectId::arch_a,
                             const TracerConfig& cfg = {}) {
  if (size.min < 1 || size.min > size.max || size.max > kMaxGeneratedSize)
    throw std::invalid_argument("gen_function: size range must satisfy 1 <= min <= max <= " +
                                std::to_string(kMaxGeneratedSize));
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t s = detail::mix_seed(seed, attempt);
    const std::size_t n = size.min + s % (size.max - size.min + 1);
    Function fn = detail::FunctionBuilder(s, n, d, cfg.code_base).build(source_id(seed));
    bool ok = true;
    for (std::uint64_t probe = 1; probe <= 3 && ok; ++probe)
      ok = micro_execute(fn, probe, cfg).terminated_by != Termination::budget_exhausted;
    if (ok || attempt >= 16) return fn;
  }
}

// ---------------------------------------------------------------------------
// Transform passes

enum class PassKind : std::uint8_t {
  dialect_translate,
  register_rename,
  instruction_substitute,
  bogus_flow_insert,
  block_split,
  strength_reduce,
};

inline constexpr std::array kAllPasses{PassKind::dialect_translate,      PassKind::register_rename,
                                       PassKind::instruction_substitute, PassKind::bogus_flow_insert,
                                       PassKind::block_split,            PassKind::strength_reduce};

inline const char* to_string(PassKind k) {
  switch (k) {
    case PassKind::dialect_translate: return "dialect_translate";
    case PassKind::register_rename: return "register_rename";
    case PassKind::instruction_substitute: return "instruction_substitute";
    case PassKind::bogus_flow_insert: return "bogus_flow_insert";
    case PassKind::block_split: return "block_split";
    case PassKind::strength_reduce: return "strength_reduce";
  }
  return "?";
}

inline std::optional<PassKind> pass_from_string(std::string_view s) {
  for (auto k : kAllPasses)
    if (s == to_string(k)) return k;
  return std::nullopt;
}

struct TransformPass {
  PassKind kind = PassKind::register_rename;
  std::uint64_t seed = 0;
  friend bool operator==(const TransformPass&, const TransformPass&) = default;
};

using Pipeline = std::vector<TransformPass>;

/// Where each register of the input function lives in the output function.
struct RegisterMap {
  DialectId to = DialectId::arch_a;
  std::array<std::uint8_t, kNumRegisters> index{};

  static RegisterMap identity(DialectId d) {
    RegisterMap m{d, {}};
    std::iota(m.index.begin(), m.index.end(), std::uint8_t{0});
    return m;
  }

  Register operator()(Register r) const { return Register{to, index[r.index]}; }

  RegisterMap then(const RegisterMap& next) const {
    RegisterMap out{next.to, {}};
    for (std::size_t i = 0; i < kNumRegisters; ++i) out.index[i] = next.index[index[i]];
    return out;
  }
};

struct TransformResult {
  Function fn;
  bool applied = false;
  RegisterMap mapping;
};

namespace detail {

struct Slot {
  Instruction instr;
  std::optional<std::size_t> origin;  // index in the input function; empty for inserted code
};

inline Expr relocate_target(const Expr& e, const std::vector<std::size_t>& new_index, std::size_t old_n,
                            std::size_t new_n, std::uint64_t base) {
  const auto* c = std::get_if<Const>(&e);
  if (!c || c->value < base) return e;
  const std::uint64_t off = c->value - base;
  if (off < old_n) return Const{base + new_index[off]};
  // keep out-of-range targets out of range when the code grows
  if (new_n > old_n && off < new_n) return Const{c->value + (new_n - old_n)};
  return e;
}

/// Assembles `slots` into a function, rewriting constant jump/call targets of
/// original instructions to follow their targets' new positions. Removed
/// instructions map to the next surviving one.
inline Function assemble(const Function& in, const std::vector<Slot>& slots, std::uint64_t base) {
  const std::size_t old_n = in.body.size();
  std::vector<std::size_t> new_index(old_n + 1, slots.size());
  for (std::size_t j = slots.size(); j-- > 0;)
    if (slots[j].origin) new_index[*slots[j].origin] = j;
  for (std::size_t i = old_n; i-- > 0;)
    if (new_index[i] == slots.size()) new_index[i] = new_index[i + 1];
  Function out{in.id, in.dialect, {}};
  for (const auto& s : slots) {
    Instruction ins = s.instr;
    if (s.origin) {
      if (auto* j = std::get_if<Jmp>(&ins)) j->target = relocate_target(j->target, new_index, old_n, slots.size(), base);
      if (auto* c = std::get_if<Call>(&ins)) c->target = relocate_target(c->target, new_index, old_n, slots.size(), base);
    }
    out.body.push_back(std::move(ins));
  }
  return out;
}

inline std::set<std::size_t> jump_targets(const Function& fn, std::uint64_t base) {
  std::set<std::size_t> out;
  for (const auto& ins : fn.body) {
    const Expr* t = nullptr;
    if (auto* j = std::get_if<Jmp>(&ins)) t = &j->target;
    if (auto* c = std::get_if<Call>(&ins)) t = &c->target;
    if (t)
      if (auto* c = std::get_if<Const>(t); c && c->value >= base && c->value - base < fn.body.size())
        out.insert(c->value - base);
  }
  return out;
}

template <class F>
Instruction map_registers(const Instruction& ins, F&& f) {
  auto op = [&](const Operand& o) -> Operand {
    if (auto* r = std::get_if<Register>(&o)) return f(*r);
    return o;
  };
  auto ex = [&](const Expr& e) -> Expr {
    return std::visit(overloaded{[](const Const& c) -> Expr { return c; }, [&](const Register& r) -> Expr { return f(r); },
                                 [&](const BinOp& b) -> Expr { return BinOp{b.op, f(b.left), op(b.right)}; }},
                      e);
  };
  return std::visit(overloaded{[&](const Assign& a) -> Instruction { return Assign{f(a.dst), ex(a.src)}; },
                               [&](const Load& l) -> Instruction { return Load{f(l.dst), ex(l.addr)}; },
                               [&](const Store& s) -> Instruction { return Store{ex(s.value), ex(s.addr)}; },
                               [&](const Jmp& j) -> Instruction { return Jmp{ex(j.cond), ex(j.target)}; },
                               [&](const Call& c) -> Instruction { return Call{ex(c.target)}; },
                               [](const Ret& r) -> Instruction { return r; }, [](const Nop& n) -> Instruction { return n; }},
                    ins);
}

inline TransformResult dialect_translate(const Function& fn) {
  const auto to = static_cast<DialectId>((static_cast<std::size_t>(fn.dialect) + 1) % num_dialects());
  RegisterMap m = RegisterMap::identity(to);
  Function out{fn.id, to, {}};
  for (const auto& ins : fn.body) out.body.push_back(map_registers(ins, m));
  return {std::move(out), to != fn.dialect, m};
}

inline TransformResult register_rename(const Function& fn, std::uint64_t seed) {
  Rng rng(seed);
  RegisterMap m = RegisterMap::identity(fn.dialect);
  for (std::size_t i = kStackRegister - 1; i > 0; --i) std::swap(m.index[i], m.index[rng.below(i + 1)]);
  Function out{fn.id, fn.dialect, {}};
  bool changed = false;
  for (const auto& ins : fn.body) {
    out.body.push_back(map_registers(ins, m));
    changed = changed || !(out.body.back() == ins);
  }
  return {std::move(out), changed, m};
}

// add/sub by a constant flip to the opposite op with the negated constant
inline std::optional<Expr> substitute_expr(const Expr& e) {
  const auto* b = std::get_if<BinOp>(&e);
  if (!b) return std::nullopt;
  const auto* c = std::get_if<Const>(&b->right);
  if (!c || (b->op != BinOpKind::add && b->op != BinOpKind::sub)) return std::nullopt;
  return BinOp{b->op == BinOpKind::add ? BinOpKind::sub : BinOpKind::add, b->left, Const{~c->value + 1}};
}

inline TransformResult instruction_substitute(const Function& fn, std::uint64_t seed) {
  Rng rng(seed);
  Function out{fn.id, fn.dialect, {}};
  bool applied = false;
  for (const auto& ins : fn.body) {
    Instruction next = ins;
    if (const auto* a = std::get_if<Assign>(&ins)) {
      if (auto e = substitute_expr(a->src)) {
        next = Assign{a->dst, *e};
      } else if (const auto* c = std::get_if<Const>(&a->src); c && c->value == 0) {
        next = Assign{a->dst, BinOp{BinOpKind::bit_xor, a->dst, a->dst}};  // r := r ^ r
      } else if (const auto* r = std::get_if<Register>(&a->src)) {
        if (rng.chance(0.5))
          next = Assign{a->dst, BinOp{BinOpKind::bit_or, *r, *r}};
        else
          next = Assign{a->dst, BinOp{BinOpKind::add, *r, Const{0}}};
      }
    } else if (const auto* l = std::get_if<Load>(&ins)) {
      if (auto e = substitute_expr(l->addr)) next = Load{l->dst, *e};
    } else if (const auto* s = std::get_if<Store>(&ins)) {
      if (auto e = substitute_expr(s->addr)) next = Store{s->value, *e};
    }
    applied = applied || !(next == ins);
    out.body.push_back(std::move(next));
  }
  return {std::move(out), applied, RegisterMap::identity(fn.dialect)};
}

inline Instruction dead_instruction(Rng& rng, DialectId d) {
  const Register dst{d, static_cast<std::uint8_t>(rng.below(kStackRegister))};
  const Register src{d, static_cast<std::uint8_t>(rng.below(kStackRegister))};
  switch (rng.below(3)) {
    case 0: return Assign{dst, BinOp{static_cast<BinOpKind>(rng.below(kNumBinOps)), src, Const{rng.range(1, 255)}}};
    case 1: return Store{src, BinOp{BinOpKind::sub, Register{d, kStackRegister}, Const{8 * rng.range(1, 8)}}};
    default: return Assign{dst, BinOp{BinOpKind::bit_xor, src, dst}};
  }
}

inline TransformResult bogus_flow_insert(const Function& fn, std::uint64_t seed, std::uint64_t base) {
  Rng rng(seed);
  const std::size_t n = fn.body.size();
  const std::size_t guards = 1 + rng.below(2);
  std::set<std::size_t> points;
  for (std::size_t g = 0; g < guards; ++g) points.insert(rng.below(n));

  // layout: body with a guard before each point, [ret barrier], dead blocks
  const bool needs_barrier = !std::holds_alternative<Ret>(fn.body.back());
  std::vector<Slot> slots;
  std::vector<std::size_t> guard_slots;
  for (std::size_t i = 0; i < n; ++i) {
    if (points.count(i)) {
      guard_slots.push_back(slots.size());
      slots.push_back({Nop{}, {}});
    }
    slots.push_back({fn.body[i], i});
  }
  if (needs_barrier) slots.push_back({Ret{}, {}});
  for (std::size_t g : guard_slots) {
    const std::size_t dead_start = slots.size();
    const std::size_t dead_len = 2 + rng.below(3);
    for (std::size_t k = 0; k < dead_len; ++k) slots.push_back({dead_instruction(rng, fn.dialect), {}});
    slots.push_back({Jmp{Const{1}, Const{base + g + 1}}, {}});
    // never-taken opaque predicate: constant zero or r ^ r
    Expr cond = Const{0};
    if (rng.chance(0.5)) {
      const Register r{fn.dialect, static_cast<std::uint8_t>(rng.below(kStackRegister))};
      cond = BinOp{BinOpKind::bit_xor, r, r};
    }
    slots[g].instr = Jmp{cond, Const{base + dead_start}};
  }
  return {assemble(fn, slots, base), true, RegisterMap::identity(fn.dialect)};
}

inline TransformResult block_split(const Function& fn, std::uint64_t seed, std::uint64_t base) {
  Rng rng(seed);
  const std::size_t n = fn.body.size();
  if (n < 2) return {fn, false, RegisterMap::identity(fn.dialect)};
  std::set<std::size_t> points;
  const std::size_t splits = 1 + rng.below(2);
  for (std::size_t k = 0; k < splits; ++k) points.insert(1 + rng.below(n - 1));
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < n; ++i) {
    if (points.count(i)) {
      // unconditional jump to the next instruction
      const std::size_t at = slots.size();
      slots.push_back({Jmp{Const{1}, Const{base + at + 1}}, {}});
    }
    slots.push_back({fn.body[i], i});
  }
  return {assemble(fn, slots, base), true, RegisterMap::identity(fn.dialect)};
}

inline bool is_power_of_two(std::uint64_t v) { return v && !(v & (v - 1)); }

inline TransformResult strength_reduce(const Function& fn, std::uint64_t base) {
  const auto targets = jump_targets(fn, base);
  std::vector<Slot> slots;
  bool applied = false;
  for (std::size_t i = 0; i < fn.body.size(); ++i) {
    const Instruction& ins = fn.body[i];
    // fold `r := c1; r := r op c2` into one constant assignment
    if (const auto* a = std::get_if<Assign>(&ins); a && i + 1 < fn.body.size() && !targets.count(i + 1)) {
      const auto* c1 = std::get_if<Const>(&a->src);
      const auto* nxt = std::get_if<Assign>(&fn.body[i + 1]);
      if (c1 && nxt && nxt->dst == a->dst) {
        const auto* b = std::get_if<BinOp>(&nxt->src);
        const Const* c2 = b ? std::get_if<Const>(&b->right) : nullptr;
        if (b && c2 && b->left == a->dst) {
          slots.push_back({Assign{a->dst, Const{apply(b->op, c1->value, c2->value)}}, i});
          ++i;
          applied = true;
          continue;
        }
      }
    }
    Instruction next = ins;
    if (const auto* a = std::get_if<Assign>(&ins)) {
      if (const auto* b = std::get_if<BinOp>(&a->src)) {
        const auto* c = std::get_if<Const>(&b->right);
        const auto* r = std::get_if<Register>(&b->right);
        if (b->op == BinOpKind::mul && c && c->value == 2) {
          next = Assign{a->dst, BinOp{BinOpKind::add, b->left, b->left}};
        } else if (b->op == BinOpKind::mul && c && is_power_of_two(c->value) && c->value > 2) {
          next = Assign{a->dst, BinOp{BinOpKind::shl, b->left, Const{static_cast<std::uint64_t>(std::countr_zero(c->value))}}};
        } else if (b->op == BinOpKind::add && r && *r == b->left) {
          next = Assign{a->dst, BinOp{BinOpKind::shl, b->left, Const{1}}};
        } else if (b->op == BinOpKind::shl && c && c->value >= 1 && c->value <= 3) {
          next = Assign{a->dst, BinOp{BinOpKind::mul, b->left, Const{std::uint64_t{1} << c->value}}};
        }
      }
    }
    applied = applied || !(next == ins);
    slots.push_back({std::move(next), i});
  }
  if (!applied) return {fn, false, RegisterMap::identity(fn.dialect)};
  return {assemble(fn, slots, base), true, RegisterMap::identity(fn.dialect)};
}

}  // namespace detail

/// Applies one pass. `applied` is false when nothing in `fn` matched, in
/// which case `fn` comes back unchanged.
inline TransformResult apply_transform(const Function& fn, const TransformPass& pass, std::uint64_t code_base = 0x1000) {
  if (fn.body.empty()) return {fn, false, RegisterMap::identity(fn.dialect)};
  switch (pass.kind) {
    case PassKind::dialect_translate: return detail::dialect_translate(fn);
    case PassKind::register_rename: return detail::register_rename(fn, pass.seed);
    case PassKind::instruction_substitute: return detail::instruction_substitute(fn, pass.seed);
    case PassKind::bogus_flow_insert: return detail::bogus_flow_insert(fn, pass.seed, code_base);
    case PassKind::block_split: return detail::block_split(fn, pass.seed, code_base);
    case PassKind::strength_reduce: return detail::strength_reduce(fn, code_base);
  }
  return {fn, false, RegisterMap::identity(fn.dialect)};
}

inline TransformResult apply_pipeline(const Function& fn, const Pipeline& passes, std::uint64_t code_base = 0x1000) {
  TransformResult acc{fn, false, RegisterMap::identity(fn.dialect)};
  for (const auto& p : passes) {
    auto r = apply_transform(acc.fn, p, code_base);
    acc.fn = std::move(r.fn);
    acc.applied = acc.applied || r.applied;
    acc.mapping = acc.mapping.then(r.mapping);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Differential execution

struct EndState {
  std::array<std::uint64_t, kNumRegisters> regs{};
  std::map<std::uint64_t, std::uint8_t> memory;
  Termination terminated_by = Termination::end_of_code;
};

/// Runs `original` from the seeded state and `variant` from the same state
/// with registers moved through `mapping`, then reports both end states with
/// the variant's registers pulled back into the original's numbering.
inline std::pair<EndState, EndState> differential_run(const Function& original, const Function& variant,
                                                      const RegisterMap& mapping, std::uint64_t seed,
                                                      const TracerConfig& cfg = {}) {
  MachineState a = init_state(original, seed, cfg);
  MachineState b = init_state(variant, seed, cfg);
  for (std::size_t i = 0; i < kNumRegisters; ++i) b.regs[mapping.index[i]] = a.regs[i];
  auto ra = execute(original, std::move(a), cfg);
  auto rb = execute(variant, std::move(b), cfg);
  EndState ea{ra.final_state.regs, ra.final_state.memory.contents(), ra.trace.terminated_by};
  EndState eb{{}, rb.final_state.memory.contents(), rb.trace.terminated_by};
  for (std::size_t i = 0; i < kNumRegisters; ++i) eb.regs[i] = rb.final_state.regs[mapping.index[i]];
  return {std::move(ea), std::move(eb)};
}

inline bool equivalent_on(const Function& original, const Function& variant, const RegisterMap& mapping,
                          std::uint64_t seed, const TracerConfig& cfg = {}) {
  auto [a, b] = differential_run(original, variant, mapping, seed, cfg);
  return a.regs == b.regs && a.memory == b.memory;
}

// ---------------------------------------------------------------------------
// Pair datasets

enum class Split : std::uint8_t { train, test, pretrain };

struct Pair {
  std::size_t a = 0;  // indices into PairDataset::functions
  std::size_t b = 0;
  int y = 1;          // +1 similar, -1 dissimilar
  Split split = Split::train;
};

struct FunctionRecord {
  Function fn;
  std::uint64_t source_seed = 0;
  Pipeline pipeline;
  Split split = Split::train;
};

struct PairDataset {
  std::vector<FunctionRecord> functions;
  std::vector<Pair> pairs;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [&](const Pair& p) { return p.split == s; }));
  }
};

struct PairConfig {
  std::size_t num_pairs = 600;
  double negatives_per_positive = 5.0;
  double train_fraction = 0.1;
  std::size_t max_pipeline = 3;
  std::uint64_t code_base = 0x1000;
};

class InsufficientFunctions : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Pipeline random_pipeline(detail::Rng& rng, std::size_t min_len, std::size_t max_len) {
  std::vector<PassKind> kinds(kAllPasses.begin(), kAllPasses.end());
  for (std::size_t i = kinds.size() - 1; i > 0; --i) std::swap(kinds[i], kinds[rng.below(i + 1)]);
  const std::size_t len = rng.range(min_len, std::min(max_len, kinds.size()));
  Pipeline p;
  for (std::size_t i = 0; i < len; ++i) p.push_back({kinds[i], rng.next()});
  return p;
}

/// Builds similar pairs (two variants of one source) and dissimilar pairs
/// (variants of two distinct sources) in a positive:negative ratio of
/// 1:negatives_per_positive. Sources are split before pairing, so train and
/// test never share a function.
inline PairDataset build_pairs(const std::vector<Function>& sources, const std::vector<std::uint64_t>& source_seeds,
                               const PairConfig& cfg, std::uint64_t seed) {
  if (sources.size() != source_seeds.size()) throw std::invalid_argument("build_pairs: sources and seeds differ in length");
  const std::set<std::uint64_t> distinct(source_seeds.begin(), source_seeds.end());
  if (distinct.size() < 2)
    throw InsufficientFunctions("build_pairs: need at least 2 distinct source seeds for dissimilar pairs");
  if (distinct.size() != source_seeds.size()) throw std::invalid_argument("build_pairs: source seeds must be unique");
  detail::Rng rng(detail::mix_seed(seed, 0x7061697273));

  std::vector<std::size_t> order(sources.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  const auto train_pairs = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(cfg.num_pairs)));
  const std::size_t test_pairs = cfg.num_pairs - train_pairs;
  auto n_train_src = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(sources.size())));
  if (train_pairs > 0) n_train_src = std::max<std::size_t>(n_train_src, 2);
  if (test_pairs > 0 && sources.size() - std::min(n_train_src, sources.size()) < 2)
    throw InsufficientFunctions("build_pairs: not enough sources to give both splits two distinct functions");

  PairDataset ds;
  std::map<std::uint64_t, std::size_t> variant_counter;
  auto add_variant = [&](std::size_t src, Split split, const Pipeline& p) {
    auto r = apply_pipeline(sources[src], p, cfg.code_base);
    const auto k = variant_counter[source_seeds[src]]++;
    r.fn.id = sources[src].id + "_v" + std::to_string(k);
    ds.functions.push_back({std::move(r.fn), source_seeds[src], p, split});
    return ds.functions.size() - 1;
  };

  auto fill = [&](const std::vector<std::size_t>& pool, std::size_t total, Split split) {
    if (total == 0) return;
    const auto positives =
        static_cast<std::size_t>(std::llround(static_cast<double>(total) / (1.0 + cfg.negatives_per_positive)));
    for (std::size_t k = 0; k < total; ++k) {
      const bool similar = k < positives;
      const std::size_t i = pool[rng.below(pool.size())];
      std::size_t j = i;
      if (!similar)
        while (source_seeds[j] == source_seeds[i]) j = pool[rng.below(pool.size())];
      const Pipeline pa = random_pipeline(rng, 0, cfg.max_pipeline - 1);
      const Pipeline pb = random_pipeline(rng, similar ? 1 : 0, cfg.max_pipeline);
      const std::size_t a = add_variant(i, split, pa);
      const std::size_t b = add_variant(j, split, pb);
      ds.pairs.push_back({a, b, similar ? 1 : -1, split});
    }
  };

  std::vector<std::size_t> train_pool(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train_src, order.size())));
  std::vector<std::size_t> test_pool(order.begin() + static_cast<std::ptrdiff_t>(train_pool.size()), order.end());
  fill(train_pool, train_pairs, Split::train);
  fill(test_pool, test_pairs, Split::test);
  return ds;
}

}  // namespace semtrace
