// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Usage: acceptance [work_dir [criterion ...]]; exit status 1 if any fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mudeep/checkpoint.hpp"
#include "mudeep/config.hpp"
#include "mudeep/dataset.hpp"
#include "mudeep/errors.hpp"
#include "mudeep/evaluation.hpp"
#include "mudeep/model.hpp"
#include "mudeep/model_gradcheck.hpp"
#include "mudeep/ops.hpp"
#include "mudeep/parallel.hpp"
#include "mudeep/training.hpp"

namespace fs = std::filesystem;
using namespace mudeep;

namespace {

// ---- pinned tolerances and budgets ------------------------------------------

constexpr double kInspectSeconds = 10.0;
constexpr double kGradTolerance = 1e-4;
constexpr std::size_t kGradSamples = 20;
constexpr double kGradSeconds = 300.0;
constexpr std::size_t kSwapPairs = 100;
constexpr double kSwapTolerance64 = 0.0;
constexpr double kSwapTolerance32 = 1e-6;
constexpr std::size_t kTyingIters = 100;
constexpr std::size_t kFreezeIters = 20;
constexpr std::size_t kCmcMatrices = 100;
constexpr std::size_t kCmcSize = 20;
constexpr std::size_t kChanceIds = 26;
constexpr std::size_t kChanceTrials = 1000;
constexpr double kChanceSigmas = 3.0;
constexpr double kTrainAccuracy = 0.95;
constexpr std::size_t kTrainAccuracyWindow = 100;  // final stage-3 iterations averaged
constexpr double kRankOne = 1.0;
constexpr std::size_t kMaxStage3 = 2000;
constexpr double kLearnSeconds = 1800.0;
constexpr std::size_t kAblationIters = 100;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok    " : "FAILED") + "  " + what);
  }
  void note(const std::string& what) { details.push_back("        " + what); }
};

std::string num(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

struct Context {
  fs::path source_dir;
  fs::path cli;
  fs::path work;
  RunConfig desk;
  fs::path corpus;  // synthetic manifest, 8 ids x 8 per camera, seed 0
};

// Runs a shell command, returning its exit status and captured stdout.
int run_command(const std::string& cmd, std::string& output) {
  output.clear();
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) throw Error("cannot run " + cmd);
  std::array<char, 4096> buf;
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) output.append(buf.data(), n);
  const int status = pclose(pipe);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
Tensor<T> stack(const Dataset& ds, const std::vector<std::size_t>& idx) {
  const Shape& s = ds.images.front().shape();
  Tensor<T> out({idx.size(), s[0], s[1], s[2]});
  const std::size_t n = ds.images.front().numel();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(ds.images[idx[i]].storage().begin(), ds.images[idx[i]].storage().end(), out.ptr() + i * n);
  return out;
}

template <class T>
std::map<std::string, std::uint64_t> hashes(const Model<T>& m) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& p : m.registry().all()) out[p->name()] = tensor_hash(p->value());
  return out;
}

template <class T>
bool all_finite(const Model<T>& m) {
  for (const auto& p : m.registry().all())
    for (T v : p->value().data())
      if (!std::isfinite(v)) return false;
  return true;
}

// ---- 1: shapes -----------------------------------------------------------------

Outcome shapes(const Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  std::string out;
  const int code = run_command(quote(ctx.cli) + " inspect --config " + quote(ctx.source_dir / "configs" / "full.cfg"), out);
  const double secs = seconds_since(t0);
  o.check(code == 0, "inspect exit status " + std::to_string(code));

  // Table rows: stage, optional stream, filters..., output, params.
  struct Row {
    std::vector<std::string> tokens;
  };
  std::vector<Row> rows;
  std::istringstream lines(out);
  for (std::string line; std::getline(lines, line);) {
    std::istringstream ws(line);
    Row r;
    for (std::string t; ws >> t;) r.tokens.push_back(t);
    if (r.tokens.size() >= 3) rows.push_back(std::move(r));
  }
  auto output_of = [](const Row& r) { return r.tokens[r.tokens.size() - 2]; };
  auto find = [&](const std::string& stage, const std::function<bool(const Row&)>& pred) -> const Row* {
    for (const auto& r : rows)
      if (r.tokens[0] == stage && pred(r)) return &r;
    return nullptr;
  };
  auto has = [](const Row& r, const std::string& t) {
    return std::find(r.tokens.begin(), r.tokens.end(), t) != r.tokens.end();
  };
  auto expect = [&](const std::string& label, const Row* r, const std::string& want) {
    const std::string got = r ? output_of(*r) : "<missing>";
    o.check(got == want, label + ": " + got + " (expected " + want + ")");
  };

  expect("Multi-scale-A", find("Multi-scale-A", [&](const Row& r) { return has(r, "concat"); }), "78x28x96");
  expect("Reduction", find("Reduction", [&](const Row& r) { return has(r, "concat"); }), "39x14x256");
  for (const char* s : {"1", "2", "3", "4"})
    expect(std::string("Multi-scale-B stream ") + s, find("Multi-scale-B", [&](const Row& r) { return r.tokens[1] == s; }),
           "39x14x256");
  expect("Fusion", find("Fusion", [](const Row&) { return true; }), "39x14x256");
  expect("Embedding", find("Embedding", [](const Row&) { return true; }), "[4096]");
  const Row* ver1 = find("Verification", [&](const Row& r) { return has(r, "4096->512"); });
  const Row* ver2 = find("Verification", [&](const Row& r) { return has(r, "512->2"); });
  expect("Verification fc 4096->512", ver1, "[512]");
  expect("Verification fc 512->2", ver2, "[2]");
  o.check(secs < kInspectSeconds, "wall " + num(secs, 3) + " s (< " + num(kInspectSeconds) + " s)");
  return o;
}

// ---- 2: gradient fidelity ------------------------------------------------------

Outcome gradients(const Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  Model<double> m(ctx.desk.model, 0);
  ModelGradCheckOptions opt;
  opt.samples_per_group = kGradSamples;
  const auto reports = grad_check_model(m, opt);
  const double secs = seconds_since(t0);
  bool saw_fusion = false;
  double worst = 0.0;
  for (const auto& r : reports) {
    saw_fusion = saw_fusion || r.group == "fusion";
    worst = std::max(worst, r.max_rel_error);
    o.check(r.checked >= kGradSamples && r.max_rel_error <= kGradTolerance,
            r.group + ": " + std::to_string(r.checked) + " coordinates, max rel " + num(r.max_rel_error, 3) +
                ", refined " + std::to_string(r.refined) + ", kinked " + std::to_string(r.nondifferentiable));
  }
  o.check(saw_fusion, "fusion weights included");
  o.check(worst <= kGradTolerance, "max rel error " + num(worst, 3) + " (<= " + num(kGradTolerance) + ")");
  o.check(secs < kGradSeconds, "wall " + num(secs, 4) + " s (< " + num(kGradSeconds) + " s)");
  return o;
}

// ---- 3: swap invariance --------------------------------------------------------

template <class T>
double swap_gap(const ModelConfig& cfg, const Dataset& ds, std::uint64_t seed) {
  Model<T> m(cfg, seed);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
  constexpr std::size_t batch = 10;
  double gap = 0.0;
  for (std::size_t done = 0; done < kSwapPairs; done += batch) {
    std::vector<std::size_t> ia(batch), ib(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      ia[i] = pick(rng);
      ib[i] = pick(rng);
    }
    const auto a = constant(stack<T>(ds, ia)), b = constant(stack<T>(ds, ib));
    Graph<T> g1(Mode::eval), g2(Mode::eval);
    const auto p1 = softmax_rows(m.forward_pair(g1, a, b, false).verification_logits->value);
    const auto p2 = softmax_rows(m.forward_pair(g2, b, a, false).verification_logits->value);
    for (std::size_t i = 0; i < p1.numel(); ++i)
      gap = std::max(gap, std::abs(static_cast<double>(p1[i]) - static_cast<double>(p2[i])));
  }
  return gap;
}

Outcome swap_invariance(const Context& ctx, const Dataset& ds) {
  Outcome o;
  o.check(ctx.desk.model.difference_mode == DifferenceMode::squared, "squared feature difference");
  const double g64 = swap_gap<double>(ctx.desk.model, ds, 11);
  o.check(g64 <= kSwapTolerance64, "64-bit max |p(a,b) - p(b,a)| = " + num(g64, 3) + " over " +
                                       std::to_string(kSwapPairs) + " pairs (<= " + num(kSwapTolerance64) + ")");
  const double g32 = swap_gap<float>(ctx.desk.model, ds, 12);
  o.check(g32 <= kSwapTolerance32, "32-bit max |p(a,b) - p(b,a)| = " + num(g32, 3) + " over " +
                                       std::to_string(kSwapPairs) + " pairs (<= " + num(kSwapTolerance32) + ")");
  return o;
}

// ---- 4: tying and stage-2 freeze -----------------------------------------------

Outcome tying(const Context& ctx, const Dataset& ds) {
  Outcome o;
  Model<float> m(ctx.desk.model, ctx.desk.train.seed);
  TrainConfig tc = ctx.desk.train;
  tc.stages = {kTyingIters, 0, 0};
  const auto first = train(m, ds, tc);
  o.check(first.iterations == kTyingIters, std::to_string(first.iterations) + " training iterations");

  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  const auto x = constant(stack<float>(ds, idx));
  Graph<float> ga(Mode::eval), gb(Mode::eval);
  const auto ta = m.run_branch(ga, Branch::a, x), tb = m.run_branch(gb, Branch::b, x);
  o.check(bitwise_equal(ta.embedding->value, tb.embedding->value), "branch A and B embeddings bitwise equal");
  o.check(bitwise_equal(m.classification_logits(ga, Branch::a, ta.embedding)->value,
                        m.classification_logits(gb, Branch::b, tb.embedding)->value),
          "branch A and B class logits bitwise equal");

  const auto before = hashes(m);
  std::size_t frozen_ok = 0, stage2_rows = 0;
  tc.stages = {kTyingIters, kFreezeIters, 0};
  train(m, ds, tc, [&](const MetricsRow& row) {
    if (row.stage != 2) return;
    ++stage2_rows;
    bool same = true;
    for (const auto& p : m.registry().all())
      if (!m.is_classifier_parameter(*p)) same = same && tensor_hash(p->value()) == before.at(p->name());
    frozen_ok += same;
  }, kTyingIters);
  o.check(stage2_rows == kFreezeIters && frozen_ok == stage2_rows,
          "non-classifier hashes unchanged after " + std::to_string(frozen_ok) + "/" + std::to_string(stage2_rows) +
              " stage-2 iterations");
  std::size_t moved = 0;
  for (const auto& p : m.classifier_parameters()) moved += tensor_hash(p->value()) != before.at(p->name());
  o.check(moved == m.classifier_parameters().size(),
          std::to_string(moved) + "/" + std::to_string(m.classifier_parameters().size()) + " classifier tensors updated");
  return o;
}

// ---- 5: saliency fusion --------------------------------------------------------

Outcome fusion(const Context& ctx, const Dataset& ds) {
  Outcome o;
  Model<double> m(ctx.desk.model, 21);
  auto alpha = m.alpha();
  if (!alpha) {
    o.check(false, "desk model has no fusion weights");
    return o;
  }
  const std::size_t S = alpha->value().dim(0), C = alpha->value().dim(1);
  const auto x = constant(stack<double>(ds, {0, 9, 64, 100}));

  std::fill(alpha->value().data().begin(), alpha->value().data().end(), 1.0);
  {
    Graph<double> g(Mode::eval);
    const auto t = m.run_branch(g, Branch::a, x);
    o.check(bitwise_equal(t.fused->value, stream_sum(g, t.streams)->value), "alpha = 1 gives the stream sum exactly");
  }

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (auto& v : alpha->value().data()) v = u(rng);
  const int same[] = {0, 1, 0, 1}, la[] = {0, 1, 2, 3}, lb[] = {4, 1, 6, 3};
  const auto y = constant(stack<double>(ds, {1, 73, 5, 110}));
  for (std::size_t s = 0; s < S; ++s) {
    const std::vector<double> saved(alpha->value().ptr() + s * C, alpha->value().ptr() + (s + 1) * C);
    for (std::size_t j = 0; j < C; ++j) alpha->value()[s * C + j] = 0.0;

    // Output invariance: replace stream s by arbitrary features.
    Graph<double> g(Mode::eval);
    auto streams = m.run_branch(g, Branch::a, x).streams;
    const auto fused = saliency_fuse(g, streams, constant(alpha->value()));
    Tensor<double> noise(streams[s]->value.shape());
    std::normal_distribution<double> n(0.0, 50.0);
    for (auto& v : noise.data()) v = n(rng);
    streams[s] = constant(noise);
    o.check(bitwise_equal(fused->value, saliency_fuse(g, streams, constant(alpha->value()))->value),
            "zero row " + std::to_string(s + 1) + ": fused map independent of stream " + std::to_string(s + 1));

    // Upstream gradients of stream s vanish exactly under the joint loss.
    m.zero_grad();
    Graph<double> gt(Mode::train, 3);
    gt.update_running_stats = false;
    const auto out = m.forward_pair(gt, x, y, true);
    auto loss = add(gt, softmax_cross_entropy(gt, out.verification_logits, std::span<const int>(same)),
                    add(gt, softmax_cross_entropy(gt, out.class_logits_a, std::span<const int>(la)),
                        softmax_cross_entropy(gt, out.class_logits_b, std::span<const int>(lb))));
    gt.tape.backward(loss);
    std::size_t nonzero = 0, total = 0;
    for (const auto& p : m.stream_parameters(s)) {
      if (!p->trainable()) continue;
      for (double v : p->grad().data()) {
        nonzero += v != 0.0;
        ++total;
      }
    }
    bool others = false;
    for (const auto& p : m.stream_parameters((s + 1) % S))
      for (double v : p->grad().data()) others = others || v != 0.0;
    o.check(total > 0 && nonzero == 0 && others,
            "zero row " + std::to_string(s + 1) + ": " + std::to_string(nonzero) + "/" + std::to_string(total) +
                " nonzero stream gradients, neighbouring stream still learns");
    std::copy(saved.begin(), saved.end(), alpha->value().ptr() + s * C);
  }
  return o;
}

// ---- 6: CMC --------------------------------------------------------------------

std::size_t sorted_rank(const std::vector<double>& scores, std::size_t truth) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), truth) - order.begin()) + 1;
}

Outcome cmc() {
  Outcome o;
  std::size_t exact = 0;
  for (std::uint64_t seed = 0; seed < kCmcMatrices; ++seed) {
    std::mt19937_64 gen(1000 + seed);
    std::uniform_int_distribution<int> d(0, 9);  // coarse scores force ties
    std::vector<double> m(kCmcSize * kCmcSize);
    for (auto& v : m) v = d(gen);
    std::vector<int> ids(kCmcSize);
    std::iota(ids.begin(), ids.end(), 0);
    std::mt19937_64 rng(seed);
    const auto r = cmc_single_shot(ids, ids, [&](std::size_t p, std::size_t g) { return m[p * kCmcSize + g]; }, 1, rng);
    std::vector<double> oracle(kCmcSize, 0.0);
    for (std::size_t p = 0; p < kCmcSize; ++p) {
      const std::vector<double> row(m.begin() + p * kCmcSize, m.begin() + (p + 1) * kCmcSize);
      for (std::size_t k = sorted_rank(row, p); k <= kCmcSize; ++k) oracle[k - 1] += 1.0;
    }
    for (auto& v : oracle) v /= static_cast<double>(kCmcSize);
    exact += r.ranks == oracle;
  }
  o.check(exact == kCmcMatrices, std::to_string(exact) + "/" + std::to_string(kCmcMatrices) + " random " +
                                     std::to_string(kCmcSize) + "x" + std::to_string(kCmcSize) +
                                     " matrices equal the sort oracle");

  std::vector<int> ids(kChanceIds);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 score_rng(77), rng(78);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto r = cmc_single_shot(ids, ids, [&](std::size_t, std::size_t) { return u(score_rng); }, kChanceTrials, rng);
  const double p = 1.0 / static_cast<double>(kChanceIds);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(kChanceTrials * kChanceIds));
  o.check(std::abs(r.at(1) - p) <= kChanceSigmas * sigma,
          "random scores, " + std::to_string(kChanceIds) + " ids, " + std::to_string(kChanceTrials) +
              " trials: rank-1 " + num(r.at(1), 5) + " vs " + num(p, 5) + " +- " + num(kChanceSigmas * sigma, 3));
  return o;
}

// ---- 7: desk-scale learning ----------------------------------------------------

double median(std::vector<double> v) {
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class T>
CmcResult gallery_cmc(const Model<T>& m, const Dataset& ds, const RunConfig& cfg, ScoreBackend backend) {
  std::vector<Tensor<float>> probe, gallery;
  std::vector<int> pid, gid;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.records[i].camera == cfg.data.probe_camera) {
      probe.push_back(ds.images[i]);
      pid.push_back(ds.records[i].identity);
    } else if (ds.records[i].camera == cfg.data.gallery_camera) {
      gallery.push_back(ds.images[i]);
      gid.push_back(ds.records[i].identity);
    }
  }
  const auto pe = embed_images(m, std::span<const Tensor<float>>(probe), cfg.eval.batch_size);
  const auto ge = embed_images(m, std::span<const Tensor<float>>(gallery), cfg.eval.batch_size);
  const auto scores = score_matrix(m, pe, ge, backend);
  std::mt19937_64 rng(cfg.train.seed);
  const std::size_t G = gallery.size();
  return cmc_single_shot(pid, gid, [&](std::size_t p, std::size_t g) { return scores[p * G + g]; }, cfg.eval.trials,
                         rng);
}

Outcome learning(const Context& ctx, const Dataset& ds) {
  Outcome o;
  const RunConfig& cfg = ctx.desk;
  o.check(cfg.train.stages.s3 <= kMaxStage3, "schedule " + std::to_string(cfg.train.stages.s1) + "/" +
                                                 std::to_string(cfg.train.stages.s2) + "/" +
                                                 std::to_string(cfg.train.stages.s3) + " (stage 3 <= " +
                                                 std::to_string(kMaxStage3) + ")");
  const auto t0 = Clock::now();
  Model<float> m(cfg.model, cfg.train.seed);
  const auto summary = train(m, ds, cfg.train);
  const CmcResult r = gallery_cmc(m, ds, cfg, ScoreBackend::verification);
  const double secs = seconds_since(t0);

  std::vector<double> tail_acc, head_loss, tail_loss;
  for (const auto& row : summary.rows) {
    if (row.stage == 3 && row.iter + kTrainAccuracyWindow >= cfg.train.stages.total() && row.acc_ver)
      tail_acc.push_back(*row.acc_ver);
    if (row.loss_ver && row.iter < cfg.train.stages.s1 / 4) head_loss.push_back(*row.loss_ver);
    if (row.loss_ver && row.iter + cfg.train.stages.s1 / 4 >= cfg.train.stages.total()) tail_loss.push_back(*row.loss_ver);
  }
  const double acc = tail_acc.empty() ? 0.0 : std::accumulate(tail_acc.begin(), tail_acc.end(), 0.0) / tail_acc.size();
  o.check(tail_acc.size() == kTrainAccuracyWindow && acc >= kTrainAccuracy,
          "verification training accuracy " + num(acc, 4) + " over the last " + std::to_string(tail_acc.size()) +
              " iterations (>= " + num(kTrainAccuracy) + ")");
  o.check(r.at(1) >= kRankOne, "training-gallery rank-1 " + num(r.at(1), 4) + " (verification backend, " +
                                   std::to_string(r.trials) + " trials; = " + num(kRankOne) + ")");
  o.check(secs <= kLearnSeconds, std::to_string(summary.iterations) + " iterations and evaluation in " + num(secs, 4) +
                                     " s (<= " + num(kLearnSeconds) + " s, " + std::to_string(num_threads()) +
                                     " thread)");

  // Context for the ledger: not part of the criterion.
  o.note("median verification loss: first " + std::to_string(head_loss.size()) + " iterations " +
         num(median(head_loss), 4) + ", last " + std::to_string(tail_loss.size()) + " " + num(median(tail_loss), 4));
  o.note("euclidean rank-1 " + num(gallery_cmc(m, ds, cfg, ScoreBackend::euclidean).at(1), 4));
  TrainConfig plain = cfg.train;
  plain.aug_copies = 1;
  std::mt19937_64 rng(1);
  o.note("eval-mode accuracy on untranslated pairs " + num(verification_accuracy(m, ds, sample_pairs(ds, plain, rng)), 4));

  const std::vector<std::pair<std::string, std::function<void(ModelConfig&)>>> ablations{
      {"-Fusion", [](ModelConfig& c) { c.use_fusion = false; }},
      {"-ClassNet", [](ModelConfig& c) { c.use_classnet = false; }},
      {"-Fusion-ClassNet",
       [](ModelConfig& c) {
         c.use_fusion = false;
         c.use_classnet = false;
       }},
      {"InceptionA", [](ModelConfig& c) { c.stream_variant = StreamVariant::inception_a; }},
      {"InceptionB", [](ModelConfig& c) { c.stream_variant = StreamVariant::inception_b; }},
      {"InceptionA+B", [](ModelConfig& c) { c.stream_variant = StreamVariant::inception_a_plus_b; }},
  };
  for (const auto& [name, edit] : ablations) {
    ModelConfig mc = cfg.model;
    edit(mc);
    TrainConfig tc = cfg.train;
    // All three stages within the 100 iterations.
    tc.stages = {kAblationIters * 2 / 5, kAblationIters / 10, kAblationIters - kAblationIters * 2 / 5 - kAblationIters / 10};
    const auto ta = Clock::now();
    try {
      Model<float> am(mc, cfg.train.seed);
      const auto s = train(am, ds, tc);
      bool finite = all_finite(am);
      for (const auto& row : s.rows)
        for (const auto& v : {row.loss_ver, row.loss_cls})
          if (v && !std::isfinite(*v)) finite = false;
      o.check(s.iterations == kAblationIters && finite,
              name + ": " + std::to_string(s.iterations) + " iterations, finite losses and parameters, " +
                  num(seconds_since(ta), 3) + " s");
    } catch (const std::exception& e) {
      o.check(false, name + ": " + e.what());
    }
  }
  return o;
}

// ---- 8: persistence ------------------------------------------------------------

template <class T>
std::pair<Tensor<T>, Tensor<T>> eval_outputs(const Model<T>& m, const Tensor<T>& a, const Tensor<T>& b) {
  Graph<T> g(Mode::eval);
  const auto out = m.forward_pair(g, constant(a), constant(b), true);
  return {out.verification_logits->value, out.class_logits_a->value};
}

Outcome persistence(const Context& ctx, const Dataset& ds) {
  Outcome o;
  Model<float> trained(ctx.desk.model, 31);
  TrainConfig tc = ctx.desk.train;
  tc.stages = {4, 2, 4};  // moves weights and running statistics off their initial values
  train(trained, ds, tc);
  const fs::path path = ctx.work / "persistence.mudp";
  write_checkpoint(path, snapshot(trained, ctx.desk.serialize(), ds.mean, 10));

  const auto a = stack<float>(ds, {2, 20, 70}), b = stack<float>(ds, {66, 21, 3});
  Model<float> loaded(ctx.desk.model, 32);
  const Checkpoint ckpt = read_checkpoint(path);
  restore(loaded, ckpt);
  const auto [v1, c1] = eval_outputs(trained, a, b);
  const auto [v2, c2] = eval_outputs(loaded, a, b);
  o.check(bitwise_equal(v1, v2) && bitwise_equal(c1, c2), "save, load, forward: verification and class logits bitwise equal");
  std::size_t same = 0;
  for (const auto& p : trained.registry().all()) same += bitwise_equal(p->value(), loaded.registry().find(p->name())->value());
  o.check(same == trained.registry().all().size(),
          std::to_string(same) + "/" + std::to_string(trained.registry().all().size()) + " tensors restored bitwise");

  ModelConfig wider = ctx.desk.model;
  wider.num_identities += 5;
  Model<float> re(wider, 33);
  std::map<std::string, std::uint64_t> fresh_cls;
  for (const auto& p : re.classifier_parameters()) fresh_cls[p->name()] = tensor_hash(p->value());
  restore(re, ckpt, true);
  std::size_t kept = 0, others = 0, preserved = 0;
  for (const auto& p : re.registry().all()) {
    if (re.is_classifier_parameter(*p)) {
      kept += tensor_hash(p->value()) == fresh_cls.at(p->name());
      continue;
    }
    ++others;
    preserved += bitwise_equal(p->value(), trained.registry().find(p->name())->value());
  }
  o.check(others > 0 && preserved == others,
          "classifier reinit: " + std::to_string(preserved) + "/" + std::to_string(others) +
              " other tensors preserved, classifier width " + std::to_string(wider.num_identities));
  o.check(kept == re.classifier_parameters().size(), "classifier reinit keeps the fresh classifier");
  return o;
}

// ---- 9: determinism ------------------------------------------------------------

Outcome determinism(const Context& ctx) {
  Outcome o;
  std::array<std::string, 2> metrics, checkpoints;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = ctx.work / ("determinism_" + std::to_string(run));
    fs::remove_all(out);
    std::string log;
    const int code = run_command(quote(ctx.cli) + " train --threads 1 --config " +
                                     quote(ctx.source_dir / "configs" / "desk.cfg") + " --data " + quote(ctx.corpus) +
                                     " --set train.stage1_iters=6 --set train.stage2_iters=2 --set train.stage3_iters=6"
                                     " --out " + quote(out),
                                 log);
    o.check(code == 0, "run " + std::to_string(run + 1) + " exit status " + std::to_string(code));
    if (code != 0) {
      o.note(log);
      return o;
    }
    metrics[run] = read_file(out / "metrics.csv");
    checkpoints[run] = read_file(out / "checkpoint.mudp");
  }
  const auto lines = std::count(metrics[0].begin(), metrics[0].end(), '\n');
  o.check(metrics[0] == metrics[1] && lines == 15,
          "metrics.csv identical across runs (" + std::to_string(lines) + " lines, " +
              std::to_string(metrics[0].size()) + " bytes)");
  o.check(checkpoints[0] == checkpoints[1], "checkpoints identical across runs");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  ctx.source_dir = MUDEEP_SOURCE_DIR;
  ctx.cli = MUDEEP_CLI;
  ctx.work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "mudeep_acceptance";
  set_num_threads(1);
  retain_freed_memory();

  std::vector<int> only;
  for (int i = 2; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  std::size_t failed = 0, ran = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& body) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) return;
    ++ran;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << "  " << title << "  (" << num(seconds_since(t0), 4)
              << " s)\n";
    for (const auto& d : o.details) std::cout << "        " << d << "\n";
    std::cout << std::flush;
  };

  Dataset ds;
  try {
    fs::remove_all(ctx.work);
    fs::create_directories(ctx.work);
    ctx.desk = RunConfig::load(ctx.source_dir / "configs" / "desk.cfg");
    ctx.corpus = synth_generate({8, 8, 0}, ctx.work / "synth");
    ds = load_dataset(ctx.corpus, ctx.desk.model.input_h, ctx.desk.model.input_w);
  } catch (const std::exception& e) {
    std::cout << "FAIL  setup: " << e.what() << "\n";
    return 1;
  }

  report(1, "shape conformance", [&] { return shapes(ctx); });
  report(2, "gradient fidelity", [&] { return gradients(ctx); });
  report(3, "swap invariance", [&] { return swap_invariance(ctx, ds); });
  report(4, "weight tying and stage-2 freeze", [&] { return tying(ctx, ds); });
  report(5, "saliency fusion properties", [&] { return fusion(ctx, ds); });
  report(6, "CMC correctness", [] { return cmc(); });
  report(7, "desk-scale learning", [&] { return learning(ctx, ds); });
  report(8, "persistence", [&] { return persistence(ctx, ds); });
  report(9, "determinism", [&] { return determinism(ctx); });

  std::cout << (failed ? "FAIL" : "PASS") << "  acceptance: " << ran - failed << "/" << ran << " criteria\n";
  return failed ? 1 : 0;
}
