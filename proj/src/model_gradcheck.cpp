#include "mudeep/model_gradcheck.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "mudeep/errors.hpp"
#include "mudeep/ops.hpp"

namespace mudeep {

std::string parameter_group(const std::string& name) { return name.substr(0, name.find('.')); }

template <class T>
std::vector<GroupReport> grad_check_model(Model<T>& model, const ModelGradCheckOptions& options) {
  if (!model.has_heads()) throw ConfigError("gradcheck needs a model with heads");
  if (options.pairs < 2) throw InvalidArgument("gradcheck needs at least 2 pairs (batch normalisation)");
  const ModelConfig& cfg = model.config();
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  const Shape shape{options.pairs, cfg.input_channels, cfg.input_h, cfg.input_w};
  Tensor<T> images_a(shape), images_b(shape);
  for (auto& v : images_a.data()) v = static_cast<T>(normal(rng));
  for (auto& v : images_b.data()) v = static_cast<T>(normal(rng));
  std::vector<int> same, label_a, label_b;
  const int classes = static_cast<int>(std::max<std::size_t>(cfg.num_identities, 2));
  for (std::size_t i = 0; i < options.pairs; ++i) {
    same.push_back(static_cast<int>(i % 2));
    label_a.push_back(std::uniform_int_distribution<int>(0, classes - 1)(rng));
    label_b.push_back(same.back() ? label_a.back() : (label_a.back() + 1) % classes);
  }
  const Var<T> a = constant(images_a), b = constant(images_b);

  auto loss = [&](Graph<T>& g) {
    g.update_running_stats = false;
    const bool cls = cfg.use_classnet;
    auto out = model.forward_pair(g, a, b, cls);
    auto lver = softmax_cross_entropy(g, out.verification_logits, same);
    if (!cls) return lver;
    auto lcls = add(g, softmax_cross_entropy(g, out.class_logits_a, label_a),
                    softmax_cross_entropy(g, out.class_logits_b, label_b));
    return add(g, scale(g, lcls, static_cast<T>(options.cls_loss_weight)),
               scale(g, lver, static_cast<T>(options.ver_loss_weight)));
  };

  std::map<std::string, std::vector<std::shared_ptr<Parameter<T>>>> groups;
  std::vector<std::string> order;
  for (const auto& p : model.registry().all()) {
    if (!p->trainable()) continue;
    const std::string grp = parameter_group(p->name());
    if (!groups.count(grp)) order.push_back(grp);
    groups[grp].push_back(p);
  }

  std::vector<GroupReport> reports;
  for (const auto& grp : order) reports.push_back({grp, 0, 0.0, 0.0});

  GradCheckOptions go;
  go.step = options.step;
  go.kink_refinements = options.kink_refinements;
  for (std::size_t round = 0; round < options.max_draw_rounds; ++round) {
    std::vector<GradTarget<T>> targets;
    std::vector<std::size_t> target_group;
    for (std::size_t gi = 0; gi < order.size(); ++gi) {
      if (reports[gi].checked >= options.samples_per_group) continue;
      const auto& members = groups[order[gi]];
      std::size_t total = 0;
      for (const auto& p : members) total += p->value().numel();
      std::map<std::size_t, std::vector<std::size_t>> picks;
      std::uniform_int_distribution<std::size_t> pick(0, total - 1);
      for (std::size_t s = reports[gi].checked; s < options.samples_per_group; ++s) {
        std::size_t flat = pick(rng);
        std::size_t m = 0;
        while (flat >= members[m]->value().numel()) flat -= members[m++]->value().numel();
        picks[m].push_back(flat);
      }
      for (auto& [m, coords] : picks) {
        auto t = target_of(*members[m]);
        t.coords = std::move(coords);
        targets.push_back(std::move(t));
        target_group.push_back(gi);
      }
    }
    if (targets.empty()) break;
    const auto result = grad_check<T>(loss, targets, go);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      auto& r = reports[target_group[t]];
      const auto& e = result.entries[t];
      r.checked += e.checked;
      r.refined += e.refined;
      r.nondifferentiable += e.nondifferentiable;
      r.max_rel_error = std::max(r.max_rel_error, e.max_rel_error);
      r.max_abs_error = std::max(r.max_abs_error, e.max_abs_error);
    }
  }
  return reports;
}

template std::vector<GroupReport> grad_check_model(Model<float>&, const ModelGradCheckOptions&);
template std::vector<GroupReport> grad_check_model(Model<double>&, const ModelGradCheckOptions&);

}  // namespace mudeep
