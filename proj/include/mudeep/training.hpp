#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mudeep/dataset.hpp"
#include "mudeep/model.hpp"

namespace mudeep {

struct StageIters {
  std::size_t s1 = 6000;
  std::size_t s2 = 1000;
  std::size_t s3 = 3000;

  std::size_t total() const noexcept { return s1 + s2 + s3; }
  // 60% / 10% / 30% split; rounding goes to stage 3.
  static StageIters from_total(std::size_t total);
  friend bool operator==(const StageIters&, const StageIters&) = default;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr0 = 0.001;
  std::size_t decay_every = 50000;
  double decay_factor = 0.1;
  double neg_pos_ratio = 2.0;
  std::size_t aug_copies = 5;  // copy 0 is the untranslated original
  double max_shift = 0.05;     // fraction of each image axis
  StageIters stages;
  double cls_loss_weight = 1.0;
  double ver_loss_weight = 0.5;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// lr0 * decay_factor^floor(iter / decay_every) on the global iteration count.
double learning_rate(const TrainConfig& cfg, std::size_t iter);

// 1, 2 or 3 for a global iteration index.
int stage_of(const StageIters& stages, std::size_t iter);

struct Shift {
  long dy = 0;
  long dx = 0;
  friend bool operator==(const Shift&, const Shift&) = default;
};

// Output pixel (r,c) reads source pixel clamp(r-dy, c-dx); borders replicate
// the edge. Works on [C,H,W].
template <class T>
Tensor<T> translate(const Tensor<T>& image, Shift s);

// Uniform integer shift in [-max_frac*dim, +max_frac*dim] per axis.
Shift random_shift(std::size_t height, std::size_t width, double max_frac, std::mt19937_64& rng);

struct PairSpec {
  std::size_t a = 0;  // dataset indices
  std::size_t b = 0;
  int same = 0;       // 1 when both images show one identity
  Shift shift_a, shift_b;
  friend bool operator==(const PairSpec&, const PairSpec&) = default;
};

// Every same-identity pair across two different cameras (the lower camera
// id on side A).
std::vector<PairSpec> positive_pairs(const std::vector<SampleRecord>& records);

// One epoch: all positives plus round(neg_pos_ratio * P) random
// different-identity cross-camera negatives, replicated aug_copies times with
// fresh random translations on copies >= 1, then shuffled.
std::vector<PairSpec> sample_pairs(const Dataset& ds, const TrainConfig& cfg, std::mt19937_64& rng);

template <class T>
struct PairBatch {
  Tensor<T> images_a;  // [B,3,H,W]
  Tensor<T> images_b;
  std::vector<int> same;
  std::vector<int> label_a;  // dense identity labels 0..N-1
  std::vector<int> label_b;
};

// Endless seeded pair stream; epoch e is drawn from its own generator, so
// the batch sequence depends only on (seed, dataset, config).
class PairStream {
 public:
  PairStream(const Dataset& ds, const TrainConfig& cfg);

  std::vector<PairSpec> next(std::size_t count);
  void skip(std::size_t count);
  int dense_label(int identity) const { return labels_.at(identity); }
  std::size_t num_identities() const noexcept { return labels_.size(); }

 private:
  void refill();

  const Dataset& ds_;
  TrainConfig cfg_;
  std::map<int, int> labels_;
  std::vector<PairSpec> epoch_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_index_ = 0;
};

template <class T>
PairBatch<T> materialize(const Dataset& ds, const PairStream& stream, const std::vector<PairSpec>& specs);

template <class T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  // Updates every trainable, unfrozen parameter from its accumulated gradient.
  void step(const std::vector<std::shared_ptr<Parameter<T>>>& params, double lr);

 private:
  double momentum_, weight_decay_;
  std::map<const Parameter<T>*, Tensor<T>> velocity_;
};

struct MetricsRow {
  std::size_t iter = 0;
  int stage = 0;
  double lr = 0;
  std::optional<double> loss_ver;
  std::optional<double> loss_cls;  // sum of both branches' losses
  std::optional<double> acc_ver;   // on the batch

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

std::string metrics_header();  // "iter,stage,lr,loss_ver,loss_cls,acc_ver"
std::string format_metrics_row(const MetricsRow& row);

using MetricsSink = std::function<void(const MetricsRow&)>;

struct TrainSummary {
  std::size_t iterations = 0;  // global counter after the run
  std::vector<MetricsRow> rows;
};

// Runs global iterations [start_iter, stages.total()). Stage 1 optimises the
// verification loss, stage 2 only the classifier with everything else frozen
// and running statistics held, stage 3 the weighted joint loss. Without a
// classification subnet stages 2 and 3 reduce to verification training.
template <class T>
TrainSummary train(Model<T>& model, const Dataset& ds, const TrainConfig& cfg, const MetricsSink& sink = {},
                   std::size_t start_iter = 0);

}  // namespace mudeep
