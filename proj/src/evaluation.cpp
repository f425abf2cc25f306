#include "mudeep/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "mudeep/errors.hpp"
#include "mudeep/ops.hpp"

namespace mudeep {

std::string to_string(ScoreBackend b) { return b == ScoreBackend::verification ? "verification" : "euclidean"; }

ScoreBackend parse_score_backend(const std::string& s) {
  if (s == "verification") return ScoreBackend::verification;
  if (s == "euclidean") return ScoreBackend::euclidean;
  throw ConfigError("backend must be 'verification' or 'euclidean', got '" + s + "'");
}

std::size_t match_rank(std::span<const double> scores, std::size_t true_index) {
  if (true_index >= scores.size()) throw InvalidArgument("match_rank: true index outside the gallery");
  const double t = scores[true_index];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > t || (j < true_index && scores[j] == t)) ++rank;
  return rank;
}

double CmcResult::at(std::size_t k) const {
  if (ranks.empty() || k == 0) throw InvalidArgument("CmcResult::at: rank must be at least 1");
  return ranks[std::min(k, ranks.size()) - 1];
}

CmcResult cmc_single_shot(const std::vector<int>& probe_ids, const std::vector<int>& gallery_ids,
                          const PairScorer& score, std::size_t trials, std::mt19937_64& rng, std::string protocol) {
  if (trials == 0) throw InvalidArgument("cmc_single_shot needs at least one trial");
  if (probe_ids.empty()) throw DataError("cmc_single_shot: no probes");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t g = 0; g < gallery_ids.size(); ++g) by_id[gallery_ids[g]].push_back(g);
  std::map<int, std::size_t> slot;
  for (const auto& [id, _] : by_id) slot.emplace(id, slot.size());
  for (int id : probe_ids)
    if (!by_id.count(id)) throw DataError("probe identity " + std::to_string(id) + " has no gallery image");

  const std::size_t K = by_id.size();
  std::vector<std::size_t> hits(K, 0);
  std::vector<std::size_t> chosen(K);
  std::vector<double> scores(K);
  for (std::size_t t = 0; t < trials; ++t) {
    std::size_t s = 0;
    for (const auto& [id, members] : by_id)
      chosen[s++] = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)];
    for (std::size_t p = 0; p < probe_ids.size(); ++p) {
      for (std::size_t k = 0; k < K; ++k) scores[k] = score(p, chosen[k]);
      ++hits[match_rank(scores, slot.at(probe_ids[p])) - 1];
    }
  }
  CmcResult r;
  r.trials = trials;
  r.protocol = std::move(protocol);
  const double denom = static_cast<double>(trials * probe_ids.size());
  std::size_t cum = 0;
  for (std::size_t k = 0; k < K; ++k) {
    cum += hits[k];
    r.ranks.push_back(static_cast<double>(cum) / denom);
  }
  return r;
}

std::string cmc_summary(const CmcResult& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "Rank-1: %.2f%%  Rank-5: %.2f%%  Rank-10: %.2f%%", 100 * r.at(1), 100 * r.at(5),
                100 * r.at(10));
  return buf;
}

void write_cmc_csv(const std::filesystem::path& path, const CmcResult& r) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "rank,accuracy\n";
  char buf[64];
  for (std::size_t k = 0; k < r.ranks.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", k + 1, r.ranks[k]);
    out << buf;
  }
  if (!out) throw DataError("write failed for " + path.string());
}

namespace {

template <class T>
Tensor<T> stack(std::span<const Tensor<float>> images, std::size_t begin, std::size_t end) {
  const Shape s = images[begin].shape();
  const std::size_t per = shape_numel(s);
  Tensor<T> out({end - begin, s[0], s[1], s[2]});
  for (std::size_t i = begin; i < end; ++i) {
    if (images[i].shape() != s) throw ShapeError("images in one batch must share a shape");
    std::copy(images[i].storage().begin(), images[i].storage().end(), out.ptr() + (i - begin) * per);
  }
  return out;
}

template <class T>
Tensor<T> rows(const Tensor<T>& m, const std::vector<std::size_t>& idx) {
  const std::size_t w = m.dim(1);
  Tensor<T> out({idx.size(), w});
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(m.ptr() + idx[r] * w, w, out.ptr() + r * w);
  return out;
}

}  // namespace

template <class T>
Tensor<T> embed_images(const Model<T>& model, std::span<const Tensor<float>> images, std::size_t batch) {
  if (images.empty()) throw InvalidArgument("embed_images: no images");
  if (batch == 0) batch = 1;
  const std::size_t E = model.config().embedding_dim;
  Tensor<T> out({images.size(), E});
  for (std::size_t b = 0; b < images.size(); b += batch) {
    const std::size_t e = std::min(images.size(), b + batch);
    Graph<T> g(Mode::eval);
    auto trace = model.run_branch(g, Branch::a, constant(stack<T>(images, b, e)));
    std::copy(trace.embedding->value.storage().begin(), trace.embedding->value.storage().end(), out.ptr() + b * E);
  }
  return out;
}

template <class T>
std::vector<double> score_matrix(const Model<T>& model, const Tensor<T>& probe_emb, const Tensor<T>& gallery_emb,
                                 ScoreBackend backend) {
  const std::size_t P = probe_emb.dim(0), G = gallery_emb.dim(0), E = probe_emb.dim(1);
  if (gallery_emb.dim(1) != E) throw ShapeError("score_matrix: embedding widths differ");
  std::vector<double> out(P * G);
  if (backend == ScoreBackend::euclidean) {
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t g = 0; g < G; ++g) {
        double ss = 0;
        for (std::size_t e = 0; e < E; ++e) {
          const double d = static_cast<double>(probe_emb[p * E + e]) - static_cast<double>(gallery_emb[g * E + e]);
          ss += d * d;
        }
        out[p * G + g] = -std::sqrt(ss);
      }
    return out;
  }
  std::vector<std::size_t> all(G);
  std::iota(all.begin(), all.end(), 0);
  const Var<T> gallery = constant(gallery_emb);
  for (std::size_t p = 0; p < P; ++p) {
    Graph<T> g(Mode::eval);
    auto probe = constant(rows(probe_emb, std::vector<std::size_t>(G, p)));
    const Tensor<T> prob = softmax_rows(model.verification_logits(g, probe, gallery)->value);
    for (std::size_t j = 0; j < G; ++j) out[p * G + j] = static_cast<double>(prob[j * 2 + 1]);
  }
  return out;
}

template <class T>
double score_pair(const Model<T>& model, const Tensor<float>& probe, const Tensor<float>& gallery,
                  ScoreBackend backend) {
  const Tensor<float> both[2] = {probe, gallery};
  const Tensor<T> emb = embed_images(model, std::span<const Tensor<float>>(both, 2), 2);
  return score_matrix(model, rows(emb, {0}), rows(emb, {1}), backend)[0];
}

template <class T>
double verification_accuracy(const Model<T>& model, const Dataset& ds, const std::vector<PairSpec>& pairs,
                             std::size_t batch) {
  if (pairs.empty()) throw InvalidArgument("verification_accuracy: no pairs");
  const Tensor<T> emb = embed_images(model, std::span<const Tensor<float>>(ds.images), batch);
  std::size_t hit = 0;
  for (std::size_t b = 0; b < pairs.size(); b += batch) {
    const std::size_t e = std::min(pairs.size(), b + batch);
    std::vector<std::size_t> ia, ib;
    for (std::size_t i = b; i < e; ++i) {
      ia.push_back(pairs[i].a);
      ib.push_back(pairs[i].b);
    }
    Graph<T> g(Mode::eval);
    const Tensor<T> logits = model.verification_logits(g, constant(rows(emb, ia)), constant(rows(emb, ib)))->value;
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t r = i - b;
      hit += (logits[r * 2 + 1] > logits[r * 2] ? 1 : 0) == pairs[i].same;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

std::vector<std::uint8_t> to_gray8(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (!(*hi > *lo)) return out;
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / (*hi - *lo)));
  return out;
}

template <class T>
SaliencyExport export_saliency(const Model<T>& model, const Tensor<float>& image_a, const Tensor<float>& image_b,
                               const std::filesystem::path& out_dir, std::size_t top_m) {
  const auto alpha_param = model.alpha();
  if (!alpha_param) throw ConfigError("saliency export needs a model with the learnable fusion layer");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw DataError("cannot create directory " + out_dir.string());

  const Tensor<T>& alpha = alpha_param->value();
  const std::size_t S = alpha.dim(0), C = alpha.dim(1);
  top_m = std::min(top_m, C);
  SaliencyExport result;
  for (std::size_t i = 0; i < S; ++i) {
    std::vector<std::size_t> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return std::abs(static_cast<double>(alpha[i * C + x])) > std::abs(static_cast<double>(alpha[i * C + y]));
    });
    order.resize(top_m);
    result.channels.push_back(order);
  }

  Graph<T> g(Mode::eval);
  const Tensor<float> imgs[2] = {image_a, image_b};
  for (int side = 0; side < 2; ++side) {
    const std::string tag = side == 0 ? "A" : "B";
    auto trace = model.run_branch(g, side == 0 ? Branch::a : Branch::b,
                                  constant(stack<T>(std::span<const Tensor<float>>(imgs, 2), side, side + 1)));
    const Shape fs = trace.fused->value.shape();
    const std::size_t H = fs[2], W = fs[3], HW = H * W;
    auto emit = [&](const std::string& name, auto value_at) {
      std::vector<double> v(HW);
      for (std::size_t k = 0; k < HW; ++k) v[k] = value_at(k);
      const auto path = out_dir / name;
      write_pgm(path, W, H, to_gray8(v));
      result.files.push_back(path);
    };
    std::vector<bool> fused_done(C, false);
    for (std::size_t i = 0; i < S; ++i) {
      const Tensor<T>& F = trace.streams[i]->value;
      for (std::size_t j : result.channels[i]) {
        const std::string base = "branch" + tag + "_stream" + std::to_string(i + 1) + "_";
        const double a = static_cast<double>(alpha[i * C + j]);
        emit(base + "ch" + std::to_string(j) + ".pgm", [&](std::size_t k) { return static_cast<double>(F[j * HW + k]); });
        emit(base + "contrib_ch" + std::to_string(j) + ".pgm",
             [&](std::size_t k) { return a * static_cast<double>(F[j * HW + k]); });
        if (!fused_done[j]) {
          fused_done[j] = true;
          const Tensor<T>& G = trace.fused->value;
          emit("branch" + tag + "_fused_ch" + std::to_string(j) + ".pgm",
               [&](std::size_t k) { return static_cast<double>(G[j * HW + k]); });
        }
      }
    }
  }

  const auto csv = out_dir / "alpha.csv";
  std::ofstream out(csv);
  if (!out) throw DataError("cannot write " + csv.string());
  char buf[64];
  for (std::size_t i = 0; i < S; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      std::snprintf(buf, sizeof buf, "%s%.9g", j ? "," : "", static_cast<double>(alpha[i * C + j]));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + csv.string());
  result.files.push_back(csv);
  return result;
}

#define MUDEEP_INSTANTIATE_EVAL(T)                                                                              \
  template Tensor<T> embed_images(const Model<T>&, std::span<const Tensor<float>>, std::size_t);                \
  template std::vector<double> score_matrix(const Model<T>&, const Tensor<T>&, const Tensor<T>&, ScoreBackend); \
  template double score_pair(const Model<T>&, const Tensor<float>&, const Tensor<float>&, ScoreBackend);        \
  template double verification_accuracy(const Model<T>&, const Dataset&, const std::vector<PairSpec>&,         \
                                        std::size_t);                                                           \
  template SaliencyExport export_saliency(const Model<T>&, const Tensor<float>&, const Tensor<float>&,          \
                                          const std::filesystem::path&, std::size_t);

MUDEEP_INSTANTIATE_EVAL(float)
MUDEEP_INSTANTIATE_EVAL(double)

}  // namespace mudeep
