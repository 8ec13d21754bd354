#pragma once

#include "semtrace/encoding.hpp"
#include "semtrace/tracer.hpp"

namespace fixture {

using namespace semtrace;

struct TinyExample {
  Vocab vocab;
  EncodedInput input;   // 6 tokens
  MaskedInput masked;   // a register and a literal masked
  EncodedInput other;   // a second 6-token input for pair losses
};

// `r1 := r2 + 0x3; ret` traced with a concrete seed: six tokens, one masked
// register with a value, one masked literal.
inline TinyExample tiny_example() {
  const auto fn = parse_function("r1 := r2 + 0x3\nret", DialectId::arch_a, "tiny");
  const auto fn2 = parse_function("r2 := r1 + 0x5\nret", DialectId::arch_a, "tiny2");
  const auto t = micro_execute(fn, 1);
  const auto t2 = dummy_trace(fn2);
  TinyExample ex{build_vocab({t, t2}), {}, {}, {}};
  ex.input = tokenize_trace(t, ex.vocab);
  ex.other = tokenize_trace(t2, ex.vocab);
  ex.masked = mask_positions(ex.input, {0, 4});
  return ex;
}

}  // namespace fixture
