#include "mudeep/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "mudeep/errors.hpp"

namespace mudeep {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <class T>
GradCheckResult grad_check(const std::function<Var<T>(Graph<T>&)>& loss, const std::vector<GradTarget<T>>& targets,
                           const GradCheckOptions& options) {
  // Analytic pass. Gradients already sitting in the accumulators are saved and
  // put back afterwards.
  std::vector<Tensor<T>> saved(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto& node = *targets[t].var;
    saved[t] = node.grad;
    if (!node.grad.empty()) node.grad.fill(T(0));
  }
  std::vector<Tensor<T>> analytic(targets.size());
  const bool track = options.kink_refinements > 0;
  std::uint64_t base_kinks = 0;
  {
    Graph<T> g(Mode::train);
    g.track_kinks = track;
    auto l = loss(g);
    base_kinks = g.kinks.value();
    g.tape.backward(l);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto& node = *targets[t].var;
      analytic[t] = node.grad.empty() ? Tensor<T>(node.value.shape()) : node.grad;
    }
  }
  for (std::size_t t = 0; t < targets.size(); ++t) targets[t].var->grad = saved[t];

  // Returns the loss and whether the pass stayed on the unperturbed linear piece.
  auto eval = [&] {
    Graph<T> g(Mode::train);
    g.track_kinks = track;
    const double v = static_cast<double>(loss(g)->value[0]);
    return std::pair{v, g.kinks.value() == base_kinks};
  };

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& target = targets[t];
    GradCheckEntry entry;
    entry.name = target.name;
    if (target.frozen || !target.var->requires_grad) {
      entry.skipped = true;
      result.entries.push_back(entry);
      continue;
    }
    Tensor<T>& value = target.var->value;
    std::vector<std::size_t> coords = target.coords;
    if (!coords.empty()) {
      for (std::size_t i : coords)
        if (i >= value.numel()) throw InvalidArgument("grad_check: coordinate out of range for " + target.name);
    } else if (options.samples == 0 || options.samples >= value.numel()) {
      coords.resize(value.numel());
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, value.numel() - 1);
      for (std::size_t s = 0; s < options.samples; ++s) coords.push_back(pick(rng));
    }
    for (std::size_t i : coords) {
      const T original = value[i];
      double step = options.step;
      std::optional<double> numeric;
      for (std::size_t r = 0; r <= options.kink_refinements; ++r, step /= 10.0) {
        value[i] = original + static_cast<T>(step);
        const auto [plus, plus_smooth] = eval();
        value[i] = original - static_cast<T>(step);
        const auto [minus, minus_smooth] = eval();
        value[i] = original;
        if (!track || (plus_smooth && minus_smooth)) {
          numeric = (plus - minus) / (2.0 * step);
          if (r > 0) ++entry.refined;
          break;
        }
      }
      if (!numeric) {
        ++entry.nondifferentiable;
        continue;
      }
      const double a = static_cast<double>(analytic[t][i]);
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - *numeric));
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(a, *numeric, options.floor));
      ++entry.checked;
    }
    result.max_rel_error = std::max(result.max_rel_error, entry.max_rel_error);
    result.entries.push_back(entry);
  }
  return result;
}

template GradCheckResult grad_check(const std::function<Var<float>(Graph<float>&)>&,
                                    const std::vector<GradTarget<float>>&, const GradCheckOptions&);
template GradCheckResult grad_check(const std::function<Var<double>(Graph<double>&)>&,
                                    const std::vector<GradTarget<double>>&, const GradCheckOptions&);

}  // namespace mudeep
