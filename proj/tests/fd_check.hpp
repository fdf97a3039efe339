#pragma once

// Central finite-difference gradient oracle shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pclab/diff/tensor.hpp"

namespace fdcheck {

using LossFn = std::function<pclab::diff::Tensor(pclab::diff::Tape&)>;

struct Result {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

// Compares tape gradients with (f(p+eps) - f(p-eps)) / 2eps for every entry
// of every parameter (or a strided subset when stride > 1).
inline Result check(const std::vector<pclab::diff::Parameter*>& params, const LossFn& loss,
                    double eps = 1e-4, std::size_t stride = 1) {
  for (auto* p : params) p->zero_grad();
  {
    pclab::diff::Tape tape;
    auto l = loss(tape);
    tape.backward(l);
  }
  auto eval = [&] {
    pclab::diff::Tape tape;
    return loss(tape).item();
  };
  Result r;
  for (auto* p : params) {
    auto analytic = p->grad();
    for (std::size_t i = 0; i < p->size(); i += stride) {
      const double orig = p->value()[i];
      p->value()[i] = orig + eps;
      const double up = eval();
      p->value()[i] = orig - eps;
      const double down = eval();
      p->value()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic[i], numeric));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace fdcheck
