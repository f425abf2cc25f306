#include "mudeep/model.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "mudeep/ops.hpp"

namespace mudeep {

std::string to_string(DifferenceMode m) { return m == DifferenceMode::squared ? "squared" : "plain"; }

std::string to_string(StreamVariant v) {
  switch (v) {
    case StreamVariant::mudeep: return "mudeep";
    case StreamVariant::inception_a: return "inceptionA";
    case StreamVariant::inception_b: return "inceptionB";
    case StreamVariant::inception_a_plus_b: return "inceptionAplusB";
  }
  return "mudeep";
}

std::string to_string(ReductionVariant v) { return v == ReductionVariant::multiscale ? "multiscale" : "maxpool"; }

DifferenceMode parse_difference_mode(const std::string& s) {
  if (s == "squared") return DifferenceMode::squared;
  if (s == "plain") return DifferenceMode::plain;
  throw ConfigError("difference mode must be 'squared' or 'plain', got '" + s + "'");
}

StreamVariant parse_stream_variant(const std::string& s) {
  if (s == "mudeep") return StreamVariant::mudeep;
  if (s == "inceptionA") return StreamVariant::inception_a;
  if (s == "inceptionB") return StreamVariant::inception_b;
  if (s == "inceptionAplusB") return StreamVariant::inception_a_plus_b;
  throw ConfigError("stream variant must be mudeep|inceptionA|inceptionB|inceptionAplusB, got '" + s + "'");
}

ReductionVariant parse_reduction_variant(const std::string& s) {
  if (s == "multiscale") return ReductionVariant::multiscale;
  if (s == "maxpool") return ReductionVariant::maxpool;
  throw ConfigError("reduction variant must be 'multiscale' or 'maxpool', got '" + s + "'");
}

ChannelScale ChannelScale::parse(const std::string& s) {
  auto parse_uint = [&](const std::string& part) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("channel scale '" + s + "' is not a fraction like 1/4 or a decimal like 0.25");
    return static_cast<std::size_t>(std::stoull(part));
  };
  ChannelScale r;
  if (auto slash = s.find('/'); slash != std::string::npos) {
    r.num = parse_uint(s.substr(0, slash));
    r.den = parse_uint(s.substr(slash + 1));
  } else if (auto dot = s.find('.'); dot != std::string::npos) {
    const std::string frac = s.substr(dot + 1);
    if (frac.size() > 9) throw ConfigError("channel scale '" + s + "' has too many decimals");
    r.den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) r.den *= 10;
    r.num = parse_uint(s.substr(0, dot)) * r.den + (frac.empty() ? 0 : parse_uint(frac));
  } else {
    r.num = parse_uint(s);
  }
  if (r.den == 0 || r.num == 0) throw ConfigError("channel scale '" + s + "' must be positive");
  const std::size_t g = std::gcd(r.num, r.den);
  r.num /= g;
  r.den /= g;
  if (r.num > r.den) throw ConfigError("channel scale '" + s + "' must not exceed 1");
  return r;
}

std::string ChannelScale::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

std::size_t ChannelScale::apply(std::size_t channels) const {
  if ((channels * num) % den != 0 || channels * num / den == 0)
    throw ConfigError("channel scale " + str() + " turns " + std::to_string(channels) +
                      " channels into a non-integer or zero width");
  return channels * num / den;
}

void ModelConfig::validate(bool require_identities) const {
  if (input_channels == 0 || input_h == 0 || input_w == 0) throw ConfigError("input shape must be positive");
  if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  if (verification_hidden == 0) throw ConfigError("verification_hidden must be positive");
  if (use_classnet && (require_identities || num_identities != 0) && num_identities < 2)
    throw ConfigError("the classification subnet needs num_identities >= 2, got " + std::to_string(num_identities));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
  for (std::size_t c : {48, 96, 24, 16, 56, 64, 128, 256}) (void)scaled(c);
}

ModelConfig ModelConfig::full() { return {}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.channel_scale = {1, 4};
  c.embedding_dim = 256;
  return c;
}

std::string StageOp::str() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::conv: return conv.str() + " CF";
    case Kind::max_pool: os << "1@" << k << 'x' << k << " MF"; break;
    case Kind::avg_pool: os << "1@" << k << 'x' << k << " AF"; break;
  }
  if (stride == 2) os << '*';
  return os.str();
}

namespace {

// Chains filter specs, inferring each layer's depth from its predecessor.
class PlanBuilder {
 public:
  PlanBuilder(const ModelConfig& cfg, std::size_t in_channels) : cfg_(cfg), depth_(in_channels) {}

  PlanBuilder& conv(std::size_t base_channels, std::size_t kh, std::size_t kw, std::size_t stride = 1) {
    ConvSpec s;
    s.out_channels = cfg_.scaled(base_channels);
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.in_channels = depth_;
    s.stride = stride;
    plan_.push_back(StageOp::cfilter(s));
    depth_ = s.out_channels;
    return *this;
  }
  PlanBuilder& conv_unpadded(std::size_t base_channels, std::size_t k) {
    conv(base_channels, k, k);
    plan_.back().conv.pad_h = 0;
    plan_.back().conv.pad_w = 0;
    return *this;
  }
  PlanBuilder& pool(StageOp::Kind kind, std::size_t k, std::size_t stride, std::size_t pad) {
    plan_.push_back(StageOp::pool(kind, k, stride, pad));
    return *this;
  }
  StreamPlan done() { return std::move(plan_); }

 private:
  const ModelConfig& cfg_;
  std::size_t depth_;
  StreamPlan plan_;
};

using K = StageOp::Kind;

}  // namespace

StreamPlan preprocess_plan(const ModelConfig& cfg) {
  return PlanBuilder(cfg, cfg.input_channels).conv_unpadded(48, 3).conv_unpadded(96, 3).pool(K::max_pool, 3, 2, 1).done();
}

std::vector<StreamPlan> multiscale_a_plan(const ModelConfig& cfg, std::size_t in) {
  return {
      PlanBuilder(cfg, in).pool(K::avg_pool, 3, 1, 1).conv(24, 1, 1).done(),
      PlanBuilder(cfg, in).conv(24, 1, 1).done(),
      PlanBuilder(cfg, in).conv(16, 1, 1).conv(24, 3, 3).done(),
      PlanBuilder(cfg, in).conv(16, 1, 1).conv(24, 3, 3).conv(24, 3, 3).done(),
  };
}

std::vector<StreamPlan> reduction_plan(const ModelConfig& cfg, std::size_t in) {
  if (cfg.reduction == ReductionVariant::maxpool) return {PlanBuilder(cfg, in).pool(K::max_pool, 3, 2, 1).done()};
  return {
      PlanBuilder(cfg, in).pool(K::max_pool, 3, 2, 1).done(),
      PlanBuilder(cfg, in).conv(96, 3, 3, 2).done(),
      PlanBuilder(cfg, in).conv(48, 1, 1).conv(56, 3, 3).conv(64, 3, 3, 2).done(),
  };
}

std::vector<StreamPlan> multiscale_b_plan(const ModelConfig& cfg, std::size_t in) {
  return {
      PlanBuilder(cfg, in).conv(256, 1, 1).done(),
      PlanBuilder(cfg, in).conv(64, 1, 1).conv(128, 1, 3).conv(256, 3, 1).done(),
      PlanBuilder(cfg, in).conv(64, 1, 1).conv(64, 1, 3).conv(128, 3, 1).conv(128, 1, 3).conv(256, 3, 1).done(),
      // Stride 1 so that every stream keeps the 39x14 grid the fusion sum needs.
      PlanBuilder(cfg, in).pool(K::avg_pool, 3, 1, 1).conv(256, 1, 1).done(),
  };
}

std::size_t plan_out_channels(const StreamPlan& plan, std::size_t in_channels) {
  std::size_t c = in_channels;
  for (const auto& op : plan)
    if (op.kind == StageOp::Kind::conv) c = op.conv.out_channels;
  return c;
}

namespace {

Shape plan_out_shape(const StreamPlan& plan, Shape chw) {
  for (const auto& op : plan) {
    if (op.kind == StageOp::Kind::conv) {
      const auto geo = op.conv.geometry();
      chw = {op.conv.out_channels, window_out_size(chw[1], op.conv.kernel_h, geo.stride, geo.pad_h),
             window_out_size(chw[2], op.conv.kernel_w, geo.stride, geo.pad_w)};
    } else {
      if (op.pad >= op.k) throw GeometryError("pool padding must be smaller than the window");
      chw = {chw[0], window_out_size(chw[1], op.k, op.stride, op.pad), window_out_size(chw[2], op.k, op.stride, op.pad)};
    }
  }
  return chw;
}

std::size_t plan_params(const StreamPlan& plan) {
  std::size_t n = 0;
  for (const auto& op : plan)
    if (op.kind == StageOp::Kind::conv) {
      const auto& s = op.conv;
      n += s.out_channels * s.in_channels * s.kernel_h * s.kernel_w + s.out_channels + 2 * s.out_channels;
    }
  return n;
}

std::string plan_str(const StreamPlan& plan) {
  std::string s;
  for (const auto& op : plan) {
    if (!s.empty()) s += " - ";
    s += op.str();
  }
  return s;
}

bool has_multiscale_a(StreamVariant v) {
  return v == StreamVariant::mudeep || v == StreamVariant::inception_a || v == StreamVariant::inception_a_plus_b;
}
bool has_multiscale_b(StreamVariant v) { return v != StreamVariant::inception_a; }
bool has_reduction(StreamVariant v) { return v != StreamVariant::inception_b; }
bool concat_b(StreamVariant v) { return v == StreamVariant::inception_b || v == StreamVariant::inception_a_plus_b; }

ConvSpec projection_spec(const ModelConfig& cfg, std::size_t in) {
  ConvSpec s;
  s.out_channels = cfg.scaled(256);
  s.in_channels = in;
  return s;
}

// Stand-in for the Reduction layer in inception-B, which has no Multi-scale-A
// or Reduction stage in front of its B block.
StreamPlan inception_b_downsample(const ModelConfig& cfg, std::size_t in) {
  return PlanBuilder(cfg, in).pool(K::max_pool, 3, 2, 1).done();
}

}  // namespace

std::string format_shape_hwc(const Shape& s) {
  if (s.size() == 3) return std::to_string(s[1]) + "x" + std::to_string(s[2]) + "x" + std::to_string(s[0]);
  return shape_str(s);
}

std::vector<ArchRow> describe_architecture(const ModelConfig& cfg) {
  cfg.validate(false);
  std::vector<ArchRow> rows;
  Shape chw{cfg.input_channels, cfg.input_h, cfg.input_w};
  rows.push_back({"input", "", "", chw, 0});

  const StreamPlan pre = preprocess_plan(cfg);
  chw = plan_out_shape(pre, chw);
  rows.push_back({"Preprocess", "", plan_str(pre), chw, plan_params(pre)});

  auto concat_stage = [&](const std::string& name, const std::vector<StreamPlan>& streams) {
    std::size_t channels = 0;
    Shape out;
    for (std::size_t i = 0; i < streams.size(); ++i) {
      const Shape s = plan_out_shape(streams[i], chw);
      rows.push_back({name, std::to_string(i + 1), plan_str(streams[i]), s, plan_params(streams[i])});
      if (!out.empty() && (s[1] != out[1] || s[2] != out[2]))
        throw ShapeError(name + ": stream outputs disagree on spatial size");
      out = s;
      channels += s[0];
    }
    chw = {channels, out[1], out[2]};
    rows.push_back({name, "", "concat", chw, 0});
  };

  const StreamVariant v = cfg.stream_variant;
  if (has_multiscale_a(v)) concat_stage("Multi-scale-A", multiscale_a_plan(cfg, chw[0]));
  if (has_reduction(v)) {
    concat_stage("Reduction", reduction_plan(cfg, chw[0]));
  } else {
    const StreamPlan down = inception_b_downsample(cfg, chw[0]);
    chw = plan_out_shape(down, chw);
    rows.push_back({"Downsample", "", plan_str(down), chw, 0});
  }
  if (has_multiscale_b(v)) {
    const auto streams = multiscale_b_plan(cfg, chw[0]);
    if (concat_b(v)) {
      concat_stage("Multi-scale-B", streams);
      const ConvSpec proj = projection_spec(cfg, chw[0]);
      const StreamPlan p{StageOp::cfilter(proj)};
      chw = plan_out_shape(p, chw);
      rows.push_back({"Projection", "", plan_str(p), chw, plan_params(p)});
    } else {
      Shape out;
      for (std::size_t i = 0; i < streams.size(); ++i) {
        const Shape s = plan_out_shape(streams[i], chw);
        if (!out.empty() && s != out) throw ShapeError("Multi-scale-B streams must share one output shape");
        out = s;
        rows.push_back({"Multi-scale-B", std::to_string(i + 1), plan_str(streams[i]), s, plan_params(streams[i])});
      }
      chw = out;
      const std::size_t alpha = cfg.use_fusion ? streams.size() * chw[0] : 0;
      rows.push_back({"Fusion", "", cfg.use_fusion ? "saliency-weighted sum" : "unweighted sum", chw, alpha});
    }
  }

  const std::size_t flat = shape_numel(chw);
  const std::size_t e = cfg.embedding_dim;
  rows.push_back({"Embedding", "", "fc " + std::to_string(flat) + "->" + std::to_string(e) + " + BN + ReLU + dropout",
                  {e}, flat * e + e + 2 * e});
  const std::size_t hdim = cfg.verification_hidden;
  rows.push_back({"Verification", "", "fc " + std::to_string(e) + "->" + std::to_string(hdim) + " + BN + ReLU",
                  {hdim}, e * hdim + hdim + 2 * hdim});
  rows.push_back({"Verification", "", "fc " + std::to_string(hdim) + "->2 softmax", {2}, hdim * 2 + 2});
  if (cfg.use_classnet) {
    const std::size_t n = cfg.num_identities;
    const std::string width = n ? std::to_string(n) : "N";
    rows.push_back({"Classification", "", "fc " + std::to_string(e) + "->" + width + " softmax", {n}, e * n + n});
  }
  return rows;
}

template <class T>
Var<T> saliency_fuse(Graph<T>& g, const std::vector<Var<T>>& streams, const Var<T>& alpha) {
  if (streams.empty()) throw ShapeError("saliency_fuse: no streams");
  const Shape& as = alpha->value.shape();
  const Shape& fs = streams[0]->value.shape();
  if (as.size() != 2 || as[0] != streams.size() || fs.size() != 4 || as[1] != fs[1])
    throw ShapeError("saliency_fuse: alpha " + shape_str(as) + " does not match " + std::to_string(streams.size()) +
                     " streams of shape " + shape_str(fs));
  for (const auto& f : streams)
    if (f->value.shape() != fs)
      throw ShapeError("saliency_fuse: stream shapes differ (" + shape_str(fs) + " vs " + shape_str(f->value.shape()) +
                       ")");
  Var<T> out;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    auto term = channel_scale(g, streams[i], select_row(g, alpha, i));
    out = out ? add(g, out, term) : term;
  }
  return out;
}

template <class T>
Var<T> stream_sum(Graph<T>& g, const std::vector<Var<T>>& streams) {
  if (streams.empty()) throw ShapeError("stream_sum: no streams");
  Var<T> out = streams[0];
  for (std::size_t i = 1; i < streams.size(); ++i) out = add(g, out, streams[i]);
  return out;
}

namespace {

template <class T>
LayerStack<T> instantiate(const StreamPlan& plan, ParameterRegistry<T>& registry, const std::string& key) {
  LayerStack<T> s;
  std::size_t conv_index = 0;
  for (const auto& op : plan) {
    switch (op.kind) {
      case StageOp::Kind::conv:
        s.append(make_cfilter_block(op.conv, registry, key + ".c" + std::to_string(++conv_index)));
        break;
      case StageOp::Kind::max_pool: s.push(std::make_unique<Pool2d<T>>(PoolKind::max, op.k, op.stride, op.pad)); break;
      case StageOp::Kind::avg_pool:
        s.push(std::make_unique<Pool2d<T>>(PoolKind::average, op.k, op.stride, op.pad));
        break;
    }
  }
  return s;
}

template <class T>
std::vector<LayerStack<T>> instantiate_streams(const std::vector<StreamPlan>& plans, ParameterRegistry<T>& registry,
                                               const std::string& key) {
  std::vector<LayerStack<T>> out;
  for (std::size_t i = 0; i < plans.size(); ++i)
    out.push_back(instantiate(plans[i], registry, key + ".s" + std::to_string(i + 1)));
  return out;
}

template <class T>
std::vector<Var<T>> run_streams(Graph<T>& g, const std::vector<LayerStack<T>>& streams, const Var<T>& x) {
  std::vector<Var<T>> out;
  for (const auto& s : streams) out.push_back(s.forward(g, x));
  return out;
}

}  // namespace

template <class T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed, bool with_heads) : cfg_(std::move(cfg)), with_heads_(with_heads) {
  cfg_.validate(with_heads_);
  build_branch(a_);
  build_branch(b_);
  if (with_heads_) {
    verification_.append(make_fc_block(cfg_.embedding_dim, cfg_.verification_hidden, registry_, "verif.fc1"));
    verification_.push(std::make_unique<FullyConnected<T>>(cfg_.verification_hidden, 2, registry_, "verif.fc2"));
  }
  init_parameters(registry_, seed);
}

template <class T>
void Model<T>::build_branch(BranchLayers& b) {
  const StreamVariant v = cfg_.stream_variant;
  b.preprocess = instantiate(preprocess_plan(cfg_), registry_, "pre");
  Shape shape = b.preprocess.output_shape({1, cfg_.input_channels, cfg_.input_h, cfg_.input_w});
  auto concat_shape = [&](const std::vector<LayerStack<T>>& streams) {
    std::size_t c = 0;
    Shape s;
    for (const auto& st : streams) {
      s = st.output_shape(shape);
      c += s[1];
    }
    s[1] = c;
    return s;
  };
  if (has_multiscale_a(v)) {
    b.multiscale_a = instantiate_streams(multiscale_a_plan(cfg_, shape[1]), registry_, "msA");
    shape = concat_shape(b.multiscale_a);
  }
  if (has_reduction(v)) {
    b.reduction = instantiate_streams(reduction_plan(cfg_, shape[1]), registry_, "red");
    shape = concat_shape(b.reduction);
  } else {
    b.reduction.push_back(instantiate(inception_b_downsample(cfg_, shape[1]), registry_, "down"));
    shape = b.reduction[0].output_shape(shape);
  }
  if (has_multiscale_b(v)) {
    b.multiscale_b = instantiate_streams(multiscale_b_plan(cfg_, shape[1]), registry_, "msB");
    if (concat_b(v)) {
      shape = concat_shape(b.multiscale_b);
      b.projection = make_cfilter_block(projection_spec(cfg_, shape[1]), registry_, "proj");
      shape = b.projection.output_shape(shape);
    } else {
      shape = b.multiscale_b[0].output_shape(shape);
      if (cfg_.use_fusion && !alpha_)
        alpha_ = registry_.get_or_create("fusion.alpha", {b.multiscale_b.size(), shape[1]}, ParamKind::fusion_alpha);
    }
  }
  if (!with_heads_) return;
  const std::size_t flat = shape[1] * shape[2] * shape[3];
  b.embed.push(std::make_unique<Flatten<T>>());
  b.embed.append(make_fc_block(flat, cfg_.embedding_dim, registry_, "embed"));
  b.embed.push(std::make_unique<Dropout<T>>(cfg_.dropout));
  if (cfg_.use_classnet)
    b.classifier.push(std::make_unique<FullyConnected<T>>(cfg_.embedding_dim, cfg_.num_identities, registry_, "classifier"));
}

template <class T>
BranchTrace<T> Model<T>::run_branch(Graph<T>& g, Branch branch, const Var<T>& images) const {
  const Shape& s = images->value.shape();
  if (s.size() != 4 || s[1] != cfg_.input_channels || s[2] != cfg_.input_h || s[3] != cfg_.input_w)
    throw ShapeError("model expects images [N," + std::to_string(cfg_.input_channels) + "," +
                     std::to_string(cfg_.input_h) + "," + std::to_string(cfg_.input_w) + "], got " + shape_str(s));
  const BranchLayers& b = layers(branch);
  const StreamVariant v = cfg_.stream_variant;
  BranchTrace<T> t;
  Var<T> h = t.preprocessed = b.preprocess.forward(g, images);
  if (!b.multiscale_a.empty()) {
    auto parts = run_streams(g, b.multiscale_a, h);
    h = t.multiscale_a = channel_concat<T>(g, parts);
  }
  if (has_reduction(v)) {
    auto parts = run_streams(g, b.reduction, h);
    h = t.reduction = channel_concat<T>(g, parts);
  } else {
    h = t.reduction = b.reduction[0].forward(g, h);
  }
  if (!b.multiscale_b.empty()) {
    t.streams = run_streams(g, b.multiscale_b, h);
    if (concat_b(v)) {
      h = b.projection.forward(g, channel_concat<T>(g, t.streams));
    } else if (alpha_) {
      h = saliency_fuse(g, t.streams, alpha_->var());
    } else {
      h = stream_sum(g, t.streams);
    }
  }
  t.fused = h;
  if (with_heads_) t.embedding = b.embed.forward(g, h);
  return t;
}

template <class T>
Var<T> Model<T>::feature_difference(Graph<T>& g, const Var<T>& emb_a, const Var<T>& emb_b) const {
  auto d = sub(g, emb_a, emb_b);
  return cfg_.difference_mode == DifferenceMode::squared ? mul(g, d, d) : d;
}

template <class T>
Var<T> Model<T>::verification_logits(Graph<T>& g, const Var<T>& emb_a, const Var<T>& emb_b) const {
  if (!with_heads_) throw ConfigError("model was built without heads");
  return verification_.forward(g, feature_difference(g, emb_a, emb_b));
}

template <class T>
Var<T> Model<T>::classification_logits(Graph<T>& g, Branch branch, const Var<T>& embedding) const {
  if (!with_heads_ || !cfg_.use_classnet)
    throw ConfigError("classification subnet is disabled in this model configuration");
  return layers(branch).classifier.forward(g, embedding);
}

template <class T>
PairOutput<T> Model<T>::forward_pair(Graph<T>& g, const Var<T>& images_a, const Var<T>& images_b,
                                     bool with_classification) const {
  if (!with_heads_) throw ConfigError("model was built without heads");
  if (images_a->value.dim(0) != images_b->value.dim(0))
    throw ShapeError("forward_pair: branches received different batch sizes");
  PairOutput<T> out;
  out.a = run_branch(g, Branch::a, images_a);
  out.b = run_branch(g, Branch::b, images_b);
  out.verification_logits = verification_logits(g, out.a.embedding, out.b.embedding);
  if (with_classification) {
    out.class_logits_a = classification_logits(g, Branch::a, out.a.embedding);
    out.class_logits_b = classification_logits(g, Branch::b, out.b.embedding);
  }
  if (alpha_) out.alpha = alpha_->var();
  return out;
}

template <class T>
std::vector<std::shared_ptr<Parameter<T>>> Model<T>::classifier_parameters() const {
  return a_.classifier.parameters();
}

template <class T>
bool Model<T>::is_classifier_parameter(const Parameter<T>& p) const {
  for (const auto& c : classifier_parameters())
    if (c.get() == &p) return true;
  return false;
}

template <class T>
std::vector<std::shared_ptr<Parameter<T>>> Model<T>::stream_parameters(std::size_t i) const {
  if (i >= a_.multiscale_b.size()) throw ConfigError("no Multi-scale-B stream " + std::to_string(i + 1));
  return a_.multiscale_b[i].parameters();
}

template <class T>
void Model<T>::set_frozen_except_classifier(bool frozen) {
  for (const auto& p : registry_.all())
    if (!is_classifier_parameter(*p)) p->set_frozen(frozen);
}

template <class T>
void Model<T>::zero_grad() {
  for (const auto& p : registry_.all()) p->zero_grad();
}

template class Model<float>;
template class Model<double>;
template Var<float> saliency_fuse(Graph<float>&, const std::vector<Var<float>>&, const Var<float>&);
template Var<double> saliency_fuse(Graph<double>&, const std::vector<Var<double>>&, const Var<double>&);
template Var<float> stream_sum(Graph<float>&, const std::vector<Var<float>>&);
template Var<double> stream_sum(Graph<double>&, const std::vector<Var<double>>&);

}  // namespace mudeep
