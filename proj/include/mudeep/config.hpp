#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mudeep/evaluation.hpp"
#include "mudeep/model.hpp"
#include "mudeep/training.hpp"

namespace mudeep {

enum class Precision { float32, float64 };

struct DataConfig {
  std::string train_manifest;
  std::string probe_manifest;    // empty: use train_manifest
  std::string gallery_manifest;  // empty: use probe_manifest
  int probe_camera = 1;
  int gallery_camera = 0;
};

struct EvalConfig {
  std::size_t trials = 10;
  ScoreBackend backend = ScoreBackend::verification;
  std::size_t batch_size = 32;
  std::size_t saliency_top_m = 3;
};

/// Everything a run depends on, as a flat `section.key = value` file.
/// Unknown keys are errors; serialize() lists every key in a fixed order, so
/// parse(serialize(c)) == c and serialize is a fixed point.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  Precision precision = Precision::float32;

  static RunConfig parse(const std::string& text, const std::string& origin = "config");
  static RunConfig load(const std::filesystem::path& path);
  // Throws ConfigError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value);
  std::string serialize() const;
  std::uint64_t hash() const;  // FNV-1a of serialize()

  static std::vector<std::string> keys();
};

std::string hash_hex(std::uint64_t h);

}  // namespace mudeep
