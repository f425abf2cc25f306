#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mudeep/dataset.hpp"
#include "mudeep/model.hpp"

namespace mudeep {

enum class BlobType : std::uint8_t { f32 = 1, f64 = 2, u64 = 3 };

struct Blob {
  std::string name;
  BlobType type = BlobType::f32;
  Shape dims;
  std::vector<double> real;            // f32 and f64 payloads (f32 widens exactly)
  std::vector<std::uint64_t> integer;  // u64 payloads
};

/// "MUDP", u32 version, u32-length-prefixed config text, u32 blob count, then
/// per blob: u32-length-prefixed name, u8 type, u8 ndim, u32 dims, and the
/// little-endian payload.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_text;
  std::vector<Blob> blobs;

  const Blob* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "checkpoint");
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

inline constexpr const char* kMeanBlob = "data.channel_mean";
inline constexpr const char* kIterationBlob = "train.iteration";

// Parameters and running statistics in registration order, plus the data
// mean and the global iteration counter.
template <class T>
Checkpoint snapshot(const Model<T>& model, std::string config_text, const ChannelMean& mean, std::uint64_t iteration);

// Copies every blob into the model. With `reinit_classifier` the classifier
// keeps its current values, so its width may differ from the stored one.
// Missing or mis-shaped parameters are reported together in one FormatError.
template <class T>
void restore(Model<T>& model, const Checkpoint& ckpt, bool reinit_classifier = false);

ChannelMean checkpoint_mean(const Checkpoint& ckpt);
std::uint64_t checkpoint_iteration(const Checkpoint& ckpt);

}  // namespace mudeep
