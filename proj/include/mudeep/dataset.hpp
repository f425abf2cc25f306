#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mudeep/tensor.hpp"

namespace mudeep {

struct SampleRecord {
  std::string path;  // as written in the manifest
  int identity = 0;
  int camera = 0;
  std::optional<int> frame;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

// Lines are `path,identity,camera[,frame]`; `#` starts a comment line and
// blank lines are skipped. Throws FormatError naming the line and field.
std::vector<SampleRecord> parse_manifest(const std::string& text, const std::string& origin = "manifest");
std::vector<SampleRecord> load_manifest(const std::filesystem::path& csv_path);
void write_manifest(const std::filesystem::path& csv_path, const std::vector<SampleRecord>& records);

// 8-bit interleaved RGB.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

// Binary P6 with maxval 255 only; anything else is a FormatError.
RgbImage decode_ppm(std::span<const std::uint8_t> bytes, const std::string& origin = "image");
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> gray);

// Bilinear resampling with half-pixel centres and clamped borders, scaled to
// [0,1]. Returns [3,out_h,out_w].
Tensor<float> resize_bilinear(const RgbImage& img, std::size_t out_h, std::size_t out_w);

using ChannelMean = std::array<float, 3>;

ChannelMean channel_mean(std::span<const Tensor<float>> images);
void subtract_mean(Tensor<float>& image, const ChannelMean& mean);

/// Decoded, resized and mean-subtracted images in manifest order.
struct Dataset {
  std::vector<SampleRecord> records;
  std::vector<Tensor<float>> images;  // [3,H,W] each
  ChannelMean mean{};

  std::size_t size() const noexcept { return records.size(); }
  std::vector<int> identities() const;  // sorted, unique
  std::vector<int> cameras() const;     // sorted, unique
};

// With `mean` unset the mean is computed from these images, which is the
// training-split behaviour; evaluation passes the stored training mean.
Dataset load_dataset(const std::filesystem::path& manifest, std::size_t height, std::size_t width,
                     std::optional<ChannelMean> mean = std::nullopt);

struct SynthOptions {
  int num_ids = 8;
  int per_cam = 8;
  std::uint64_t seed = 0;
  std::size_t width = 60;
  std::size_t height = 160;
  double noise_sigma = 0.02;
};

// Writes id_<k>_cam<c>_<j>.ppm for two cameras plus manifest.csv and returns
// the manifest path. Camera 1 views are brightness-scaled and shifted.
std::filesystem::path synth_generate(const SynthOptions& opts, const std::filesystem::path& out_dir);

// Elementwise maximum over per-frame features.
template <class T>
Tensor<T> aggregate_sequence(std::span<const Tensor<T>> frames);

// Record indices grouped by (identity, camera), each group ordered by frame.
std::map<std::pair<int, int>, std::vector<std::size_t>> group_sequences(const std::vector<SampleRecord>& records);

}  // namespace mudeep
