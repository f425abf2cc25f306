#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mudeep/layers.hpp"

namespace mudeep {

enum class DifferenceMode { squared, plain };
enum class StreamVariant { mudeep, inception_a, inception_b, inception_a_plus_b };
enum class ReductionVariant { multiscale, maxpool };

std::string to_string(DifferenceMode m);
std::string to_string(StreamVariant v);
std::string to_string(ReductionVariant v);
DifferenceMode parse_difference_mode(const std::string& s);
StreamVariant parse_stream_variant(const std::string& s);
ReductionVariant parse_reduction_variant(const std::string& s);

// Rational multiplier applied to every channel count of the stream layers.
struct ChannelScale {
  std::size_t num = 1;
  std::size_t den = 1;

  static ChannelScale parse(const std::string& s);  // "1/4", "0.25", "1"
  std::string str() const;
  // Throws ConfigError unless channels * num / den is a positive integer.
  std::size_t apply(std::size_t channels) const;
  friend bool operator==(const ChannelScale&, const ChannelScale&) = default;
};

struct ModelConfig {
  std::size_t input_channels = 3;
  std::size_t input_h = 160;
  std::size_t input_w = 60;
  ChannelScale channel_scale;
  std::size_t embedding_dim = 4096;
  std::size_t verification_hidden = 512;
  std::size_t num_identities = 0;  // 0: taken from the training data
  DifferenceMode difference_mode = DifferenceMode::squared;
  bool use_fusion = true;
  bool use_classnet = true;
  StreamVariant stream_variant = StreamVariant::mudeep;
  ReductionVariant reduction = ReductionVariant::multiscale;
  double dropout = 0.3;

  // `require_identities = false` accepts num_identities = 0 for symbolic use.
  void validate(bool require_identities = true) const;
  std::size_t scaled(std::size_t channels) const { return channel_scale.apply(channels); }

  static ModelConfig full();
  // channel scale 1/4, 256-D embedding.
  static ModelConfig desk();
};

// One element of a stream: a C-filter block or a pooling window.
struct StageOp {
  enum class Kind { conv, max_pool, avg_pool } kind = Kind::conv;
  ConvSpec conv;
  std::size_t k = 0, stride = 1, pad = 0;

  static StageOp cfilter(ConvSpec spec) { return {Kind::conv, std::move(spec), 0, 1, 0}; }
  static StageOp pool(Kind kind, std::size_t k, std::size_t stride, std::size_t pad) {
    return {kind, ConvSpec{}, k, stride, pad};
  }
  std::string str() const;
};

using StreamPlan = std::vector<StageOp>;

// Filter plans for each stage, with input depths inferred from the preceding
// layer's actual output.
StreamPlan preprocess_plan(const ModelConfig& cfg);
std::vector<StreamPlan> multiscale_a_plan(const ModelConfig& cfg, std::size_t in_channels);
std::vector<StreamPlan> reduction_plan(const ModelConfig& cfg, std::size_t in_channels);
std::vector<StreamPlan> multiscale_b_plan(const ModelConfig& cfg, std::size_t in_channels);
std::size_t plan_out_channels(const StreamPlan& plan, std::size_t in_channels);

// One row of the architecture table printed by `inspect`.
struct ArchRow {
  std::string stage;
  std::string stream;  // "1".."4", or "" for whole-stage rows
  std::string filters;
  Shape output;        // C,H,W for maps; F for vectors
  std::size_t params = 0;
};

// Symbolic shape and parameter-count walk over the whole two-branch model
// (one branch's trunk; tied weights are counted once). Allocates nothing.
std::vector<ArchRow> describe_architecture(const ModelConfig& cfg);
std::string format_shape_hwc(const Shape& chw);  // "78x28x96"

enum class Branch { a, b };

template <class T>
struct BranchTrace {
  Var<T> preprocessed;
  Var<T> multiscale_a;  // channel concat of the four streams
  Var<T> reduction;     // channel concat of the three streams
  std::vector<Var<T>> streams;  // Multi-scale-B stream outputs F_1..F_4 (mudeep variant)
  Var<T> fused;         // G
  Var<T> embedding;     // null when the model was built without heads
};

template <class T>
struct PairOutput {
  Var<T> verification_logits;
  Var<T> class_logits_a;  // null unless the classification subnet is enabled
  Var<T> class_logits_b;
  BranchTrace<T> a;
  BranchTrace<T> b;
  Var<T> alpha;  // null without a learnable fusion layer
};

/// Two-branch re-identification network. All weights, batch-norm statistics
/// and fusion weights are tied between the branches through one registry.
template <class T>
class Model {
 public:
  // `with_heads = false` builds only the convolutional trunk and fusion,
  // which is what shape dry-runs at full scale need.
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0, bool with_heads = true);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterRegistry<T>& registry() noexcept { return registry_; }
  const ParameterRegistry<T>& registry() const noexcept { return registry_; }
  bool has_heads() const noexcept { return with_heads_; }

  BranchTrace<T> run_branch(Graph<T>& g, Branch branch, const Var<T>& images) const;
  PairOutput<T> forward_pair(Graph<T>& g, const Var<T>& images_a, const Var<T>& images_b,
                             bool with_classification) const;

  Var<T> feature_difference(Graph<T>& g, const Var<T>& emb_a, const Var<T>& emb_b) const;
  Var<T> verification_logits(Graph<T>& g, const Var<T>& emb_a, const Var<T>& emb_b) const;
  Var<T> classification_logits(Graph<T>& g, Branch branch, const Var<T>& embedding) const;

  std::shared_ptr<Parameter<T>> alpha() const noexcept { return alpha_; }
  // Parameters of the identity classifier (empty without a classification subnet).
  std::vector<std::shared_ptr<Parameter<T>>> classifier_parameters() const;
  bool is_classifier_parameter(const Parameter<T>& p) const;
  // Parameters of Multi-scale-B stream `i` (0-based) in branch A.
  std::vector<std::shared_ptr<Parameter<T>>> stream_parameters(std::size_t i) const;

  void set_frozen_except_classifier(bool frozen);
  void zero_grad();

 private:
  struct BranchLayers {
    LayerStack<T> preprocess;
    std::vector<LayerStack<T>> multiscale_a;
    std::vector<LayerStack<T>> reduction;
    std::vector<LayerStack<T>> multiscale_b;
    LayerStack<T> projection;  // inception-B style variants: 1x1 merge of the concatenated streams
    LayerStack<T> embed;
    LayerStack<T> classifier;
  };

  void build_branch(BranchLayers& b);
  const BranchLayers& layers(Branch branch) const { return branch == Branch::a ? a_ : b_; }

  ModelConfig cfg_;
  bool with_heads_;
  ParameterRegistry<T> registry_;
  BranchLayers a_, b_;
  LayerStack<T> verification_;
  std::shared_ptr<Parameter<T>> alpha_;
};

// G_j = sum_i alpha[i,j] * F_i[:, j]; F_i all [N,C,H,W], alpha [S,C].
template <class T>
Var<T> saliency_fuse(Graph<T>& g, const std::vector<Var<T>>& streams, const Var<T>& alpha);

// Unweighted stream sum used when the fusion layer is ablated.
template <class T>
Var<T> stream_sum(Graph<T>& g, const std::vector<Var<T>>& streams);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace mudeep
