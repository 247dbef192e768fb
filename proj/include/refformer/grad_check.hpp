#pragma once

// Central finite-difference oracle for reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "refformer/ops.hpp"
#include "refformer/tensor.hpp"

namespace refformer {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// gradient is at noise level from dominating the metric.
inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return denom == 0.0 ? 0.0 : std::abs(analytic - numeric) / denom;
}

/// A single scalar coordinate inside a tensor (usually a model parameter).
template <class T>
struct GradProbe {
  Tensor<T> tensor;
  std::size_t index = 0;
};

/// Compares the tape gradient of `loss_fn()` against central differences at
/// each probe. `loss_fn` must be deterministic and read the probed tensors.
template <class T, class LossFn>
GradCheckReport grad_check_probes(LossFn&& loss_fn, std::vector<GradProbe<T>> probes, T step,
                                  double floor = 1e-6) {
  if (!(step > T(0))) throw ContractError("grad_check: step must be positive");
  for (auto& p : probes) p.tensor.zero_grad();
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckReport report;
  for (auto& p : probes) {
    const double analytic = p.tensor.has_grad() ? static_cast<double>(p.tensor.grad()[p.index]) : 0.0;
    T& slot = p.tensor.mutable_data()[p.index];
    const T original = slot;
    double plus = 0.0, minus = 0.0;
    {
      NoGradScope<T> no_grad;
      slot = original + step;
      plus = static_cast<double>(loss_fn().item());
      slot = original - step;
      minus = static_cast<double>(loss_fn().item());
    }
    slot = original;
    const double numeric = (plus - minus) / (2.0 * static_cast<double>(step));
    report.analytic.push_back(analytic);
    report.numeric.push_back(numeric);
    report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic, numeric, floor));
  }
  for (auto& p : probes) p.tensor.zero_grad();
  return report;
}

/// Checks every coordinate of x for f: Tensor -> scalar Tensor. Returns the
/// maximum relative error between tape and central-difference gradients.
template <class T, class F>
GradCheckReport grad_check_report(F&& f, const Tensor<T>& x, T step, double floor = 1e-6) {
  Tensor<T> leaf = x.detach();
  leaf.set_requires_grad(true);
  std::vector<GradProbe<T>> probes;
  for (std::size_t i = 0; i < leaf.numel(); ++i) probes.push_back({leaf, i});
  return grad_check_probes<T>([&] { return f(leaf); }, std::move(probes), step, floor);
}

template <class T, class F>
double grad_check(F&& f, const Tensor<T>& x, T step, double floor = 1e-6) {
  return grad_check_report<T>(std::forward<F>(f), x, step, floor).max_rel_error;
}

}  // namespace refformer
