#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mudeep/dataset.hpp"
#include "mudeep/model.hpp"
#include "mudeep/training.hpp"

namespace mudeep {

enum class ScoreBackend { verification, euclidean };

std::string to_string(ScoreBackend b);
ScoreBackend parse_score_backend(const std::string& s);

// 1-based position of `true_index` when `scores` is sorted descending, ties
// going to the lower index: 1 + #{j : s_j > s_t} + #{j < t : s_j == s_t}.
std::size_t match_rank(std::span<const double> scores, std::size_t true_index);

struct CmcResult {
  std::vector<double> ranks;  // ranks[k-1] = fraction of probes matched within the top k
  std::size_t trials = 0;
  std::string protocol;

  // Accuracy at rank k; ranks past the gallery size report the last entry.
  double at(std::size_t k) const;
};

using PairScorer = std::function<double(std::size_t probe, std::size_t gallery)>;

// Single-shot CMC. Each trial draws one gallery image per identity
// (uniformly among that identity's gallery images), orders the trial gallery
// by identity, and ranks every probe against it. Results are averaged over
// trials. Throws DataError for a probe identity missing from the gallery.
CmcResult cmc_single_shot(const std::vector<int>& probe_ids, const std::vector<int>& gallery_ids,
                          const PairScorer& score, std::size_t trials, std::mt19937_64& rng,
                          std::string protocol = "single-shot");

std::string cmc_summary(const CmcResult& r);  // "Rank-1: x.xx%  Rank-5: x.xx%  Rank-10: x.xx%"
void write_cmc_csv(const std::filesystem::path& path, const CmcResult& r);

// Eval-mode embeddings of [3,H,W] images, one row each.
template <class T>
Tensor<T> embed_images(const Model<T>& model, std::span<const Tensor<float>> images, std::size_t batch = 32);

// Row-major probes x gallery score matrix from cached embeddings. Higher
// means a better match.
template <class T>
std::vector<double> score_matrix(const Model<T>& model, const Tensor<T>& probe_emb, const Tensor<T>& gallery_emb,
                                 ScoreBackend backend);

template <class T>
double score_pair(const Model<T>& model, const Tensor<float>& probe, const Tensor<float>& gallery,
                  ScoreBackend backend);

// Eval-mode verification accuracy over untranslated pairs.
template <class T>
double verification_accuracy(const Model<T>& model, const Dataset& ds, const std::vector<PairSpec>& pairs,
                             std::size_t batch = 32);

struct SaliencyExport {
  std::vector<std::filesystem::path> files;
  std::vector<std::vector<std::size_t>> channels;  // selected channels per stream
};

// Heatmaps of the selected Multi-scale-B channels for both branches: the
// stream map F, its weighted contribution alpha*F and the fused map G, each
// min-max scaled to 8 bits (a constant map becomes all zeros), plus
// alpha.csv with one row per stream. Channels are the top-m by |alpha| per
// stream.
template <class T>
SaliencyExport export_saliency(const Model<T>& model, const Tensor<float>& image_a, const Tensor<float>& image_b,
                               const std::filesystem::path& out_dir, std::size_t top_m = 3);

// Min-max scaling to 0..255; constant input maps to zeros.
std::vector<std::uint8_t> to_gray8(std::span<const double> values);

}  // namespace mudeep
