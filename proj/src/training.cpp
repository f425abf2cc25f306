#include "mudeep/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mudeep/errors.hpp"
#include "mudeep/hash.hpp"
#include "mudeep/ops.hpp"

namespace mudeep {

StageIters StageIters::from_total(std::size_t total) {
  StageIters s;
  s.s1 = total * 6 / 10;
  s.s2 = total / 10;
  s.s3 = total - s.s1 - s.s2;
  return s;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train.batch_size must be at least 2 (batch normalisation)");
  if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
  if (decay_every == 0) throw ConfigError("train.decay_every must be positive");
  if (!(decay_factor > 0)) throw ConfigError("train.decay_factor must be positive");
  if (!(neg_pos_ratio >= 0)) throw ConfigError("train.neg_pos_ratio must be non-negative");
  if (aug_copies == 0) throw ConfigError("train.aug_copies must be at least 1");
  if (!(max_shift >= 0 && max_shift < 0.5)) throw ConfigError("train.max_shift must lie in [0,0.5)");
  if (!(cls_loss_weight > 0) || !(ver_loss_weight > 0)) throw ConfigError("loss weights must be positive");
  if (stages.s3 > 0 && !(cls_loss_weight > ver_loss_weight))
    throw ConfigError("stage 3 needs train.cls_loss_weight > train.ver_loss_weight");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must lie in [0,1)");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be non-negative");
}

double learning_rate(const TrainConfig& cfg, std::size_t iter) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(iter / cfg.decay_every));
}

int stage_of(const StageIters& stages, std::size_t iter) {
  if (iter < stages.s1) return 1;
  if (iter < stages.s1 + stages.s2) return 2;
  return 3;
}

template <class T>
Tensor<T> translate(const Tensor<T>& image, Shift s) {
  if (image.rank() != 3) throw ShapeError("translate expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (s.dy == 0 && s.dx == 0) return image;
  Tensor<T> out(image.shape());
  for (std::size_t y = 0; y < H; ++y) {
    const auto sy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) - s.dy, 0, static_cast<long>(H) - 1));
    for (std::size_t x = 0; x < W; ++x) {
      const auto sx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) - s.dx, 0, static_cast<long>(W) - 1));
      for (std::size_t c = 0; c < C; ++c) out[(c * H + y) * W + x] = image[(c * H + sy) * W + sx];
    }
  }
  return out;
}

Shift random_shift(std::size_t height, std::size_t width, double max_frac, std::mt19937_64& rng) {
  const auto my = static_cast<long>(std::floor(max_frac * static_cast<double>(height)));
  const auto mx = static_cast<long>(std::floor(max_frac * static_cast<double>(width)));
  Shift s;
  s.dy = std::uniform_int_distribution<long>(-my, my)(rng);
  s.dx = std::uniform_int_distribution<long>(-mx, mx)(rng);
  return s;
}

std::vector<PairSpec> positive_pairs(const std::vector<SampleRecord>& records) {
  std::vector<PairSpec> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = 0; j < records.size(); ++j)
      if (records[i].identity == records[j].identity && records[i].camera < records[j].camera)
        out.push_back({i, j, 1, {}, {}});
  return out;
}

std::vector<PairSpec> sample_pairs(const Dataset& ds, const TrainConfig& cfg, std::mt19937_64& rng) {
  if (ds.identities().size() < 2) throw DataError("pair sampling needs at least 2 identities");
  std::vector<PairSpec> base = positive_pairs(ds.records);
  if (base.empty()) throw DataError("no identity has images in two different cameras");

  const auto neg_count = static_cast<std::size_t>(std::llround(cfg.neg_pos_ratio * static_cast<double>(base.size())));
  std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
  std::size_t attempts = 0;
  for (std::size_t n = 0; n < neg_count;) {
    if (++attempts > 1000 * (neg_count + 10)) throw DataError("cannot draw cross-camera negative pairs");
    std::size_t i = pick(rng), j = pick(rng);
    const auto& ri = ds.records[i];
    const auto& rj = ds.records[j];
    if (ri.identity == rj.identity || ri.camera == rj.camera) continue;
    if (ri.camera > rj.camera) std::swap(i, j);
    base.push_back({i, j, 0, {}, {}});
    ++n;
  }

  std::vector<PairSpec> epoch;
  epoch.reserve(base.size() * cfg.aug_copies);
  for (std::size_t copy = 0; copy < cfg.aug_copies; ++copy)
    for (PairSpec p : base) {
      if (copy > 0) {
        const auto& img = ds.images[p.a];
        p.shift_a = random_shift(img.dim(1), img.dim(2), cfg.max_shift, rng);
        p.shift_b = random_shift(img.dim(1), img.dim(2), cfg.max_shift, rng);
      }
      epoch.push_back(p);
    }
  std::shuffle(epoch.begin(), epoch.end(), rng);
  return epoch;
}

PairStream::PairStream(const Dataset& ds, const TrainConfig& cfg) : ds_(ds), cfg_(cfg) {
  int next = 0;
  for (int id : ds.identities()) labels_[id] = next++;
}

void PairStream::refill() {
  Fnv1a h;
  h.update_value(cfg_.seed);
  h.update("pairs");
  h.update_value(epoch_index_++);
  std::mt19937_64 rng(h.value());
  epoch_ = sample_pairs(ds_, cfg_, rng);
  cursor_ = 0;
}

std::vector<PairSpec> PairStream::next(std::size_t count) {
  std::vector<PairSpec> out;
  out.reserve(count);
  while (out.size() < count) {
    if (cursor_ == epoch_.size()) refill();
    out.push_back(epoch_[cursor_++]);
  }
  return out;
}

void PairStream::skip(std::size_t count) {
  while (count > 0) {
    if (cursor_ == epoch_.size()) refill();
    const std::size_t n = std::min(count, epoch_.size() - cursor_);
    cursor_ += n;
    count -= n;
  }
}

template <class T>
PairBatch<T> materialize(const Dataset& ds, const PairStream& stream, const std::vector<PairSpec>& specs) {
  if (specs.empty()) throw InvalidArgument("materialize: empty batch");
  const Shape img = ds.images[specs[0].a].shape();
  const std::size_t per = shape_numel(img);
  PairBatch<T> batch;
  batch.images_a = Tensor<T>({specs.size(), img[0], img[1], img[2]});
  batch.images_b = Tensor<T>({specs.size(), img[0], img[1], img[2]});
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const Tensor<float> a = translate(ds.images[s.a], s.shift_a);
    const Tensor<float> b = translate(ds.images[s.b], s.shift_b);
    std::copy(a.storage().begin(), a.storage().end(), batch.images_a.ptr() + i * per);
    std::copy(b.storage().begin(), b.storage().end(), batch.images_b.ptr() + i * per);
    batch.same.push_back(s.same);
    batch.label_a.push_back(stream.dense_label(ds.records[s.a].identity));
    batch.label_b.push_back(stream.dense_label(ds.records[s.b].identity));
  }
  return batch;
}

template <class T>
void Sgd<T>::step(const std::vector<std::shared_ptr<Parameter<T>>>& params, double lr) {
  const T rate = static_cast<T>(lr);
  const T wd = static_cast<T>(weight_decay_);
  const T mom = static_cast<T>(momentum_);
  for (const auto& p : params) {
    if (!p->trainable() || p->frozen()) continue;
    auto w = p->value().data();
    auto g = p->grad().data();
    if (momentum_ == 0.0) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= rate * (g[i] + wd * w[i]);
      continue;
    }
    auto [it, inserted] = velocity_.try_emplace(p.get(), p->value().shape());
    auto v = it->second.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mom * v[i] + (g[i] + wd * w[i]);
      w[i] -= rate * v[i];
    }
  }
}

namespace {

std::string fmt_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <class T>
double batch_accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int pred = logits[i * 2 + 1] > logits[i * 2] ? 1 : 0;
    hit += pred == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

template <class T>
void check_finite(const Var<T>& loss, const char* term, std::size_t iter, double lr) {
  const double v = static_cast<double>(loss->value[0]);
  if (!std::isfinite(v))
    throw NumericError("non-finite " + std::string(term) + " loss (" + fmt_number(v) + ") at iteration " +
                       std::to_string(iter) + ", lr " + fmt_number(lr));
}

std::uint64_t iteration_seed(std::uint64_t seed, std::size_t iter) {
  Fnv1a h;
  h.update_value(seed);
  h.update("dropout");
  h.update_value(static_cast<std::uint64_t>(iter));
  return h.value();
}

}  // namespace

std::string metrics_header() { return "iter,stage,lr,loss_ver,loss_cls,acc_ver"; }

std::string format_metrics_row(const MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt_number(*v) : std::string(); };
  return std::to_string(r.iter) + "," + std::to_string(r.stage) + "," + fmt_number(r.lr) + "," + opt(r.loss_ver) +
         "," + opt(r.loss_cls) + "," + opt(r.acc_ver);
}

template <class T>
TrainSummary train(Model<T>& model, const Dataset& ds, const TrainConfig& cfg, const MetricsSink& sink,
                   std::size_t start_iter) {
  cfg.validate();
  const bool classnet = model.config().use_classnet;
  if (!model.has_heads()) throw ConfigError("training needs a model with heads");
  PairStream stream(ds, cfg);
  if (classnet && stream.num_identities() > model.config().num_identities)
    throw ConfigError("dataset has " + std::to_string(stream.num_identities()) +
                      " identities but the classifier has only " + std::to_string(model.config().num_identities) +
                      " outputs");

  auto consumes = [&](std::size_t it) { return classnet || stage_of(cfg.stages, it) != 2; };
  std::size_t consumed = 0;
  for (std::size_t it = 0; it < start_iter && it < cfg.stages.total(); ++it) consumed += consumes(it);
  stream.skip(consumed * cfg.batch_size);

  Sgd<T> opt(cfg.momentum, cfg.weight_decay);
  const auto& params = model.registry().all();
  TrainSummary summary;
  summary.iterations = start_iter;
  int current_stage = 0;
  for (std::size_t it = start_iter; it < cfg.stages.total(); ++it) {
    const int stage = stage_of(cfg.stages, it);
    if (!consumes(it)) {
      summary.iterations = it + 1;
      continue;
    }
    if (stage != current_stage) {
      for (const auto& p : params) {
        const bool cls = model.is_classifier_parameter(*p);
        p->set_frozen(stage == 1 ? cls : stage == 2 ? !cls : false);
      }
      current_stage = stage;
    }
    const double lr = learning_rate(cfg, it);
    const PairBatch<T> batch = materialize<T>(ds, stream, stream.next(cfg.batch_size));

    Graph<T> g(Mode::train, iteration_seed(cfg.seed, it));
    g.update_running_stats = stage != 2;
    MetricsRow row;
    row.iter = it;
    row.stage = stage;
    row.lr = lr;
    Var<T> loss;
    if (stage == 2) {
      auto ta = model.run_branch(g, Branch::a, constant(batch.images_a));
      auto tb = model.run_branch(g, Branch::b, constant(batch.images_b));
      auto la = softmax_cross_entropy(g, model.classification_logits(g, Branch::a, ta.embedding), batch.label_a);
      auto lb = softmax_cross_entropy(g, model.classification_logits(g, Branch::b, tb.embedding), batch.label_b);
      loss = add(g, la, lb);
      check_finite(loss, "classification", it, lr);
      row.loss_cls = static_cast<double>(loss->value[0]);
    } else {
      const bool joint = stage == 3 && classnet;
      auto out = model.forward_pair(g, constant(batch.images_a), constant(batch.images_b), joint);
      auto lver = softmax_cross_entropy(g, out.verification_logits, batch.same);
      check_finite(lver, "verification", it, lr);
      row.loss_ver = static_cast<double>(lver->value[0]);
      row.acc_ver = batch_accuracy(out.verification_logits->value, batch.same);
      loss = lver;
      if (joint) {
        auto lcls = add(g, softmax_cross_entropy(g, out.class_logits_a, batch.label_a),
                        softmax_cross_entropy(g, out.class_logits_b, batch.label_b));
        check_finite(lcls, "classification", it, lr);
        row.loss_cls = static_cast<double>(lcls->value[0]);
        loss = add(g, scale(g, lcls, static_cast<T>(cfg.cls_loss_weight)),
                   scale(g, lver, static_cast<T>(cfg.ver_loss_weight)));
      }
    }
    model.zero_grad();
    g.tape.backward(loss);
    opt.step(params, lr);
    summary.iterations = it + 1;
    if (sink) sink(row);
    summary.rows.push_back(row);
  }
  for (const auto& p : params) p->set_frozen(false);
  return summary;
}

#define MUDEEP_INSTANTIATE_TRAINING(T)                                                                   \
  template Tensor<T> translate(const Tensor<T>&, Shift);                                                 \
  template PairBatch<T> materialize(const Dataset&, const PairStream&, const std::vector<PairSpec>&);    \
  template class Sgd<T>;                                                                                 \
  template TrainSummary train(Model<T>&, const Dataset&, const TrainConfig&, const MetricsSink&, std::size_t);

MUDEEP_INSTANTIATE_TRAINING(float)
MUDEEP_INSTANTIATE_TRAINING(double)

}  // namespace mudeep
