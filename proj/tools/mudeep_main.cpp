#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mudeep/checkpoint.hpp"
#include "mudeep/config.hpp"
#include "mudeep/dataset.hpp"
#include "mudeep/errors.hpp"
#include "mudeep/evaluation.hpp"
#include "mudeep/kernels/kernels.hpp"
#include "mudeep/model.hpp"
#include "mudeep/model_gradcheck.hpp"
#include "mudeep/parallel.hpp"
#include "mudeep/training.hpp"

namespace fs = std::filesystem;
using namespace mudeep;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::size_t threads = 0;
};

RunConfig resolve_config(const Common& c, RunConfig base = {}) {
  RunConfig cfg = c.config.empty() ? std::move(base) : RunConfig::load(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void apply_threads(const Common& c) {
  set_num_threads(c.threads ? c.threads : threads_from_env(1));
}

void announce(const RunConfig& cfg) {
  std::cout << "seed: " << cfg.train.seed << "  config-hash: " << hash_hex(cfg.hash())
            << "  kernels: " << kernels::isa_name(kernels::active_isa()) << "  threads: " << num_threads() << "\n";
}

fs::path ensure_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw DataError("cannot write " + path.string());
}

std::string fixed(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data, out, resume;
  std::optional<std::uint64_t> seed;
};

template <class T>
int run_train(const TrainArgs& args, RunConfig cfg, const Dataset& ds) {
  const fs::path out = ensure_dir(args.out);
  Model<T> model(cfg.model, cfg.train.seed);
  std::size_t start = 0;
  if (!args.resume.empty()) {
    const Checkpoint ckpt = read_checkpoint(args.resume);
    restore(model, ckpt);
    start = checkpoint_iteration(ckpt);
    std::cout << "resumed from " << args.resume << " at iteration " << start << "\n";
  }
  write_text(out / "config.cfg", cfg.serialize());
  const fs::path metrics_path = out / "metrics.csv";
  std::ofstream metrics(metrics_path, start > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  if (start == 0) metrics << metrics_header() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t total = cfg.train.stages.total();
  const auto summary = train(model, ds, cfg.train, [&](const MetricsRow& r) {
    metrics << format_metrics_row(r) << "\n";
    if ((r.iter + 1) % 50 == 0 || r.iter + 1 == total) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "iter " << r.iter + 1 << "/" << total << "  stage " << r.stage << "  " << format_metrics_row(r)
                << "  " << fixed(secs, 1) << "s" << std::endl;
    }
  }, start);
  metrics.flush();
  const fs::path ckpt_path = out / "checkpoint.mudp";
  write_checkpoint(ckpt_path, snapshot(model, cfg.serialize(), ds.mean, summary.iterations));
  std::cout << "wrote " << ckpt_path.string() << " and " << metrics_path.string() << "\n";
  return 0;
}

int cmd_train(const TrainArgs& args) {
  apply_threads(args.common);
  RunConfig cfg = resolve_config(args.common);
  if (!args.data.empty()) cfg.data.train_manifest = args.data;
  if (args.seed) cfg.train.seed = *args.seed;
  if (cfg.data.train_manifest.empty()) throw ConfigError("no training manifest: pass --data or set data.train_manifest");
  Dataset ds = load_dataset(cfg.data.train_manifest, cfg.model.input_h, cfg.model.input_w);
  if (cfg.model.num_identities == 0) cfg.model.num_identities = ds.identities().size();
  cfg.model.validate();
  cfg.train.validate();
  announce(cfg);
  std::cout << "training on " << ds.size() << " images of " << ds.identities().size() << " identities\n";
  return cfg.precision == Precision::float32 ? run_train<float>(args, cfg, ds) : run_train<double>(args, cfg, ds);
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string ckpt, probe, gallery, out;
  std::optional<std::size_t> trials;
  std::optional<std::string> backend;
};

struct Split {
  std::vector<Tensor<float>> images;
  std::vector<int> ids;
};

Split take(const Dataset& ds, std::optional<int> camera) {
  Split s;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!camera || ds.records[i].camera == *camera) {
      s.images.push_back(ds.images[i]);
      s.ids.push_back(ds.records[i].identity);
    }
  return s;
}

template <class T>
int run_eval(const EvalArgs& args, const RunConfig& cfg, const Checkpoint& ckpt) {
  Model<T> model(cfg.model);
  restore(model, ckpt);
  const ChannelMean mean = checkpoint_mean(ckpt);
  const std::string probe_m = !args.probe.empty() ? args.probe
                              : !cfg.data.probe_manifest.empty() ? cfg.data.probe_manifest
                                                                 : cfg.data.train_manifest;
  const std::string gallery_m = !args.gallery.empty() ? args.gallery
                                : !cfg.data.gallery_manifest.empty() ? cfg.data.gallery_manifest
                                                                     : probe_m;
  if (probe_m.empty()) throw ConfigError("no probe manifest: pass --probe-manifest");
  const bool same_file = fs::weakly_canonical(probe_m) == fs::weakly_canonical(gallery_m);
  const Dataset pds = load_dataset(probe_m, cfg.model.input_h, cfg.model.input_w, mean);
  Split probe, gallery;
  if (same_file) {
    probe = take(pds, cfg.data.probe_camera);
    gallery = take(pds, cfg.data.gallery_camera);
  } else {
    const Dataset gds = load_dataset(gallery_m, cfg.model.input_h, cfg.model.input_w, mean);
    probe = take(pds, std::nullopt);
    gallery = take(gds, std::nullopt);
  }
  if (probe.images.empty() || gallery.images.empty()) throw DataError("probe or gallery set is empty");

  const Tensor<T> pe = embed_images(model, std::span<const Tensor<float>>(probe.images), cfg.eval.batch_size);
  const Tensor<T> ge = embed_images(model, std::span<const Tensor<float>>(gallery.images), cfg.eval.batch_size);
  const auto scores = score_matrix(model, pe, ge, cfg.eval.backend);
  const std::size_t G = gallery.images.size();
  std::mt19937_64 rng(cfg.train.seed);
  const CmcResult r = cmc_single_shot(
      probe.ids, gallery.ids, [&](std::size_t p, std::size_t g) { return scores[p * G + g]; }, cfg.eval.trials, rng,
      "single-shot, " + std::to_string(probe.images.size()) + " probes");
  const fs::path out = ensure_dir(args.out);
  write_cmc_csv(out / "cmc.csv", r);
  std::cout << "backend: " << to_string(cfg.eval.backend) << "  trials: " << r.trials << "  protocol: " << r.protocol
            << "\n";
  std::cout << cmc_summary(r) << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& args) {
  apply_threads(args.common);
  if (args.ckpt.empty()) throw ConfigError("--ckpt is required");
  const Checkpoint ckpt = read_checkpoint(args.ckpt);
  Common c = args.common;
  c.config.clear();
  RunConfig cfg = resolve_config(c, RunConfig::parse(ckpt.config_text, args.ckpt));
  if (args.trials) cfg.eval.trials = *args.trials;
  if (args.backend) cfg.eval.backend = parse_score_backend(*args.backend);
  announce(cfg);
  return cfg.precision == Precision::float32 ? run_eval<float>(args, cfg, ckpt) : run_eval<double>(args, cfg, ckpt);
}

// ---- gradcheck -------------------------------------------------------------

struct GradArgs {
  Common common;
  std::optional<std::uint64_t> seed;
  std::size_t samples = 20;
  std::size_t pairs = 4;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t refinements = 3;
  std::string out;
};

int cmd_gradcheck(const GradArgs& args) {
  apply_threads(args.common);
  RunConfig base;
  base.model = ModelConfig::desk();
  RunConfig cfg = resolve_config(args.common, base);
  if (args.seed) cfg.train.seed = *args.seed;
  if (cfg.model.num_identities == 0) cfg.model.num_identities = 8;
  cfg.precision = Precision::float64;
  announce(cfg);
  std::cout << "precision: float64  samples per group: " << args.samples << "\n";
  Model<double> model(cfg.model, cfg.train.seed);
  ModelGradCheckOptions opt;
  opt.samples_per_group = args.samples;
  opt.pairs = args.pairs;
  opt.kink_refinements = args.refinements;
  opt.step = args.step;
  opt.seed = cfg.train.seed;
  opt.cls_loss_weight = cfg.train.cls_loss_weight;
  opt.ver_loss_weight = cfg.train.ver_loss_weight;
  const auto reports = grad_check_model(model, opt);
  double worst = 0;
  bool short_groups = false;
  std::string csv = "group,checked,max_rel_error,max_abs_error,refined,nondifferentiable\n";
  for (const auto& r : reports) {
    char line[200];
    std::snprintf(line, sizeof line, "%-12s checked %4zu  max rel err %.3e  max abs err %.3e  refined %zu  kinked %zu",
                  r.group.c_str(), r.checked, r.max_rel_error, r.max_abs_error, r.refined, r.nondifferentiable);
    std::cout << line << "\n";
    std::snprintf(line, sizeof line, "%s,%zu,%.9g,%.9g,%zu,%zu\n", r.group.c_str(), r.checked, r.max_rel_error,
                  r.max_abs_error, r.refined, r.nondifferentiable);
    csv += line;
    worst = std::max(worst, r.max_rel_error);
    if (r.checked < args.samples) short_groups = true;
  }
  if (!args.out.empty()) write_text(ensure_dir(args.out) / "gradcheck.csv", csv);
  const bool ok = worst <= args.tolerance && !short_groups;
  std::cout << (ok ? "PASS" : "FAIL") << ": max relative error " << worst << " (tolerance " << args.tolerance << ")";
  if (short_groups) std::cout << "; some groups have fewer than " << args.samples << " compared coordinates";
  std::cout << "\n";
  return ok ? 0 : kExitNumeric;
}

// ---- synth -----------------------------------------------------------------

int cmd_synth(const SynthOptions& opts, const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  const fs::path manifest = synth_generate(opts, out);
  std::cout << "seed: " << opts.seed << "\nwrote " << 2 * opts.num_ids * opts.per_cam << " images and "
            << manifest.string() << "\n";
  return 0;
}

// ---- visualize -------------------------------------------------------------

struct VisArgs {
  Common common;
  std::string ckpt, img_a, img_b, out;
  std::optional<std::size_t> top;
};

template <class T>
int run_visualize(const VisArgs& args, const RunConfig& cfg, const Checkpoint& ckpt) {
  Model<T> model(cfg.model);
  restore(model, ckpt);
  const ChannelMean mean = checkpoint_mean(ckpt);
  auto load = [&](const std::string& path) {
    Tensor<float> t = resize_bilinear(read_ppm(path), cfg.model.input_h, cfg.model.input_w);
    subtract_mean(t, mean);
    return t;
  };
  const auto result = export_saliency(model, load(args.img_a), load(args.img_b), ensure_dir(args.out),
                                      args.top.value_or(cfg.eval.saliency_top_m));
  std::cout << "wrote " << result.files.size() << " files to " << args.out << "\n";
  return 0;
}

int cmd_visualize(const VisArgs& args) {
  apply_threads(args.common);
  if (args.ckpt.empty() || args.img_a.empty() || args.img_b.empty())
    throw ConfigError("--ckpt, --imgA and --imgB are required");
  const Checkpoint ckpt = read_checkpoint(args.ckpt);
  const RunConfig cfg = RunConfig::parse(ckpt.config_text, args.ckpt);
  announce(cfg);
  return cfg.precision == Precision::float32 ? run_visualize<float>(args, cfg, ckpt)
                                             : run_visualize<double>(args, cfg, ckpt);
}

// ---- inspect ---------------------------------------------------------------

int cmd_inspect(const Common& common, bool dry_run) {
  const RunConfig cfg = resolve_config(common);
  announce(cfg);
  const auto rows = describe_architecture(cfg.model);
  std::printf("%-15s %-6s %-70s %-14s %12s\n", "stage", "stream", "filters", "output", "params");
  std::size_t total = 0;
  for (const auto& r : rows) {
    std::printf("%-15s %-6s %-70s %-14s %12zu\n", r.stage.c_str(), r.stream.c_str(), r.filters.c_str(),
                format_shape_hwc(r.output).c_str(), r.params);
    total += r.params;
  }
  std::printf("total parameters (tied, counted once): %zu\n", total);
  if (dry_run) {
    // Trunk only: the embedding FC is checked symbolically above.
    const auto t0 = std::chrono::steady_clock::now();
    Model<float> trunk(cfg.model, cfg.train.seed, false);
    Graph<float> g(Mode::train);
    const auto trace = trunk.run_branch(
        g, Branch::a, constant(Tensor<float>({2, cfg.model.input_channels, cfg.model.input_h, cfg.model.input_w}, 0.5f)));
    std::cout << "dry run (batch 2): preprocessed " << shape_str(trace.preprocessed->value.shape());
    if (trace.multiscale_a) std::cout << ", multi-scale-A " << shape_str(trace.multiscale_a->value.shape());
    std::cout << ", reduction " << shape_str(trace.reduction->value.shape());
    for (std::size_t i = 0; i < trace.streams.size(); ++i)
      std::cout << ", stream " << i + 1 << " " << shape_str(trace.streams[i]->value.shape());
    std::cout << ", fused " << shape_str(trace.fused->value.shape()) << "  ("
              << fixed(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 2) << "s)\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"Multi-scale Siamese person re-identification: training, evaluation and diagnostics"};
  app.require_subcommand(1);

  auto add_common = [](CLI::App* sub, Common& c, bool config) {
    if (config) sub->add_option("--config", c.config, "key=value run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", c.sets, "override one config key (key=value, repeatable, last wins)");
    sub->add_option("--threads", c.threads, "worker threads (default: MUDEEP_THREADS or 1)");
  };

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint.mudp and metrics.csv");
  add_common(train_cmd, train_args.common, true);
  train_cmd->add_option("--data", train_args.data, "training manifest CSV");
  train_cmd->add_option("--out", train_args.out, "output directory")->required();
  train_cmd->add_option("--seed", train_args.seed, "overrides train.seed");
  train_cmd->add_option("--resume", train_args.resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "single-shot CMC evaluation of a checkpoint");
  add_common(eval_cmd, eval_args.common, false);
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--probe-manifest", eval_args.probe, "probe manifest (default: the training manifest)");
  eval_cmd->add_option("--gallery-manifest", eval_args.gallery,
                       "gallery manifest (same file as probe: split by data.probe_camera/gallery_camera)");
  eval_cmd->add_option("--trials", eval_args.trials, "gallery sampling trials");
  eval_cmd->add_option("--backend", eval_args.backend, "verification | euclidean");
  eval_cmd->add_option("--out", eval_args.out, "output directory")->required();

  GradArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the joint loss in 64-bit");
  add_common(grad_cmd, grad_args.common, true);
  grad_cmd->add_option("--seed", grad_args.seed, "overrides train.seed");
  grad_cmd->add_option("--samples", grad_args.samples, "coordinates per parameter group")->capture_default_str();
  grad_cmd->add_option("--pairs", grad_args.pairs, "pairs in the check batch")->capture_default_str();
  grad_cmd->add_option("--tolerance", grad_args.tolerance, "maximum relative error")->capture_default_str();
  grad_cmd->add_option("--step", grad_args.step, "central-difference step")->capture_default_str();
  grad_cmd->add_option("--refinements", grad_args.refinements, "step refinements when a stencil crosses a kink")
      ->capture_default_str();
  grad_cmd->add_option("--out", grad_args.out, "optional directory for gradcheck.csv");

  SynthOptions synth_opts;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic two-camera corpus");
  synth_cmd->add_option("--ids", synth_opts.num_ids, "identities")->capture_default_str();
  synth_cmd->add_option("--per-cam", synth_opts.per_cam, "images per identity and camera")->capture_default_str();
  synth_cmd->add_option("--seed", synth_opts.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  VisArgs vis_args;
  auto* vis_cmd = app.add_subcommand("visualize", "export fusion saliency heatmaps and alpha.csv");
  add_common(vis_cmd, vis_args.common, false);
  vis_cmd->add_option("--ckpt", vis_args.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  vis_cmd->add_option("--imgA", vis_args.img_a, "PPM for branch A")->required()->check(CLI::ExistingFile);
  vis_cmd->add_option("--imgB", vis_args.img_b, "PPM for branch B")->required()->check(CLI::ExistingFile);
  vis_cmd->add_option("--top", vis_args.top, "channels per stream (default eval.saliency_top_m)");
  vis_cmd->add_option("--out", vis_args.out, "output directory")->required();

  Common inspect_common;
  bool dry_run = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "print the layer table with output shapes and parameter counts");
  add_common(inspect_cmd, inspect_common, true);
  inspect_cmd->add_flag("--dry-run", dry_run, "also forward a batch of 2 through the convolutional trunk");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*grad_cmd) return cmd_gradcheck(grad_args);
    if (*synth_cmd) return cmd_synth(synth_opts, synth_out);
    if (*vis_cmd) return cmd_visualize(vis_args);
    if (*inspect_cmd) return cmd_inspect(inspect_common, dry_run);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
