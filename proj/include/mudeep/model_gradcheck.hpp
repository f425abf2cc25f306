#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mudeep/grad_check.hpp"
#include "mudeep/model.hpp"

namespace mudeep {

// Coarse group of a parameter name: the stage prefix before the first dot,
// e.g. "msB" for "msB.s2.c1.conv.weight" or "fusion" for the saliency weights.
std::string parameter_group(const std::string& name);

struct ModelGradCheckOptions {
  std::size_t pairs = 4;  // with 2 the flat batch norms in the heads are too curved for differencing
  std::size_t samples_per_group = 20;
  std::uint64_t seed = 0;
  double step = 1e-5;
  // See GradCheckOptions::kink_refinements. Non-differentiable coordinates
  // are replaced by fresh draws, up to `max_draw_rounds` rounds.
  std::size_t kink_refinements = 3;
  std::size_t max_draw_rounds = 5;
  double cls_loss_weight = 1.0;
  double ver_loss_weight = 0.5;
};

struct GroupReport {
  std::string group;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t refined = 0;
  std::size_t nondifferentiable = 0;
};

// Finite-difference check of the joint loss w_cls*(L_clsA + L_clsB) +
// w_ver*L_ver on a seeded random pair batch. Coordinates are drawn uniformly
// over each group's trainable scalars until `samples_per_group` of them have
// been compared. Running statistics are left untouched.
template <class T>
std::vector<GroupReport> grad_check_model(Model<T>& model, const ModelGradCheckOptions& options);

}  // namespace mudeep
