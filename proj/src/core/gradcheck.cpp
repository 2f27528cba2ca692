#include "core/gradcheck.hpp"

#include <cmath>

namespace scat {

FdReport finite_difference_check(const GraphFn& f, const std::vector<Tensor>& x0,
                                 const FdOptions& opts) {
  // analytic gradients once
  Tape tape(Precision::f64);
  std::vector<Tensor> leaves;
  leaves.reserve(x0.size());
  for (const Tensor& x : x0) leaves.push_back(tape.leaf(x));
  Tensor loss = f(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(leaves.size());
  for (const Tensor& l : leaves) grads.push_back(tape.grad(l));

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t(Precision::f64);
    std::vector<Tensor> ls;
    ls.reserve(xs.size());
    for (const Tensor& x : xs) ls.push_back(t.leaf(x));
    return f(t, ls).value();
  };

  FdReport report;
  std::vector<Tensor> work;
  work.reserve(x0.size());
  for (const Tensor& x : x0) work.push_back(x.detach());

  for (size_t li = 0; li < x0.size(); ++li) {
    const std::vector<uint8_t>* mask =
        (li < opts.masks.size() && !opts.masks[li].empty()) ? &opts.masks[li] : nullptr;
    auto& vals = work[li].mutable_data();
    for (size_t c = 0; c < vals.size(); ++c) {
      if (mask && (*mask)[c] == 0) {
        ++report.skipped;
        continue;
      }
      const double saved = vals[c];
      vals[c] = saved + opts.step;
      const double fp = eval(work);
      vals[c] = saved - opts.step;
      const double fm = eval(work);
      vals[c] = saved;
      const double fd = (fp - fm) / (2.0 * opts.step);
      const double an = grads[li].data()[c];
      const double denom = std::max({std::fabs(an), std::fabs(fd), opts.denom_floor});
      const double rel = std::fabs(an - fd) / denom;
      if (rel > report.max_rel_err) report.max_rel_err = rel;
      ++report.checked;
    }
  }
  return report;
}

}  // namespace scat
