#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mudeep/autodiff.hpp"

namespace mudeep {

// A variable whose gradient is compared against central differences.
template <class T>
struct GradTarget {
  std::string name;
  Var<T> var;
  bool frozen = false;
  // Explicit coordinates to check; when empty, GradCheckOptions::samples applies.
  std::vector<std::size_t> coords = {};
};

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates sampled per target; 0 checks every coordinate.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  // Denominator floor: |a - n| / max(|a|, |n|, floor). Keeps coordinates with
  // structurally zero gradients from turning round-off into huge ratios.
  double floor = 1e-6;
  // When nonzero, a stencil whose +-step passes take a different relu or
  // max-pool branch than the unperturbed pass is retried with step / 10, up to
  // this many times. A coordinate that never gets a kink-free stencil is
  // counted as non-differentiable rather than compared.
  std::size_t kink_refinements = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  bool skipped = false;  // frozen
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t refined = 0;            // compared with a step below GradCheckOptions::step
  std::size_t nondifferentiable = 0;  // not compared: every stencil crossed a kink
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

double relative_error(double analytic, double numeric, double floor);

// Evaluates `loss(graph)` once with a tape to get analytic gradients, then
// perturbs sampled coordinates by +-step and compares. The loss function is
// called with a fresh graph every time and must be deterministic (seed any
// dropout from the graph it receives). Values are restored bitwise.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>(Graph<T>&)>& loss, const std::vector<GradTarget<T>>& targets,
                           const GradCheckOptions& options);

template <class T>
GradTarget<T> target_of(Parameter<T>& p) {
  return {p.name(), p.var(), p.frozen(), {}};
}

}  // namespace mudeep
