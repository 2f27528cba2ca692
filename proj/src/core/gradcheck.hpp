#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "core/tensor.hpp"

namespace scat {

// Central-difference gradient checker. Runs on f64 tapes regardless of what
// the training precision is. Callers are responsible for keeping test points
// away from kinks (abs/clamp corners, bilinear cell borders) or masking the
// offending coordinates; anything within 2*step of a kink is not trustworthy.
struct FdOptions {
  double step = 1e-5;
  double denom_floor = 1e-6;  // rel err denominator: max(|analytic|, |fd|, floor)
  // optional per-leaf coordinate masks, 0 = skip; empty = check everything
  std::vector<std::vector<uint8_t>> masks;
};

struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t skipped = 0;
};

// f builds a scalar loss from the leaves on the given tape
using GraphFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

FdReport finite_difference_check(const GraphFn& f, const std::vector<Tensor>& x0,
                                 const FdOptions& opts = {});

}  // namespace scat
