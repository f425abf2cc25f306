#include "mudeep/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mudeep/errors.hpp"

namespace mudeep {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'U', 'D', 'P'};

class Writer {
 public:
  template <class V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, const std::string& origin) : b_(b), origin_(origin) {}

  template <class V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw FormatError(origin_ + ": truncated or corrupt checkpoint while reading " + what + " at byte " +
                        std::to_string(pos_));
  }
  bool done() const noexcept { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

const Blob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.name == name) return &b;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes.insert(w.bytes.end(), kMagic, kMagic + 4);
  w.put(Checkpoint::kVersion);
  w.put_string(ckpt.config_text);
  w.put(static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) {
    const std::size_t n = shape_numel(b.dims);
    const std::size_t have = b.type == BlobType::u64 ? b.integer.size() : b.real.size();
    if (n != have || b.dims.size() > 255) throw InvalidArgument("blob '" + b.name + "' has an inconsistent payload");
    w.put_string(b.name);
    w.put(static_cast<std::uint8_t>(b.type));
    w.put(static_cast<std::uint8_t>(b.dims.size()));
    for (auto d : b.dims) w.put(static_cast<std::uint32_t>(d));
    switch (b.type) {
      case BlobType::f32:
        for (double v : b.real) w.put(static_cast<float>(v));
        break;
      case BlobType::f64:
        for (double v : b.real) w.put(v);
        break;
      case BlobType::u64:
        for (auto v : b.integer) w.put(v);
        break;
    }
  }
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(origin + ": not a checkpoint (bad magic)");
  Reader r(bytes, origin);
  (void)r.get<std::uint32_t>("magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion)
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
  Checkpoint ckpt;
  ckpt.config_text = r.get_string("config");
  const auto count = r.get<std::uint32_t>("blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b;
    b.name = r.get_string("blob name");
    const auto type = r.get<std::uint8_t>("blob type");
    if (type < 1 || type > 3) throw FormatError(origin + ": blob '" + b.name + "' has unknown type " + std::to_string(type));
    b.type = static_cast<BlobType>(type);
    const auto ndim = r.get<std::uint8_t>("blob rank");
    for (std::uint8_t d = 0; d < ndim; ++d) b.dims.push_back(r.get<std::uint32_t>("blob dims"));
    const std::size_t n = shape_numel(b.dims);
    r.need(n * (b.type == BlobType::f32 ? 4 : 8), "blob payload");
    for (std::size_t k = 0; k < n; ++k) {
      switch (b.type) {
        case BlobType::f32: b.real.push_back(r.get<float>("blob payload")); break;
        case BlobType::f64: b.real.push_back(r.get<double>("blob payload")); break;
        case BlobType::u64: b.integer.push_back(r.get<std::uint64_t>("blob payload")); break;
      }
    }
    ckpt.blobs.push_back(std::move(b));
  }
  if (!r.done()) throw FormatError(origin + ": trailing bytes after the last blob");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path.string());
}

template <class T>
Checkpoint snapshot(const Model<T>& model, std::string config_text, const ChannelMean& mean, std::uint64_t iteration) {
  Checkpoint ckpt;
  ckpt.config_text = std::move(config_text);
  for (const auto& p : model.registry().all()) {
    Blob b;
    b.name = p->name();
    b.type = std::is_same_v<T, float> ? BlobType::f32 : BlobType::f64;
    b.dims = p->value().shape();
    b.real.assign(p->value().storage().begin(), p->value().storage().end());
    ckpt.blobs.push_back(std::move(b));
  }
  ckpt.blobs.push_back({kMeanBlob, BlobType::f32, {3}, {mean[0], mean[1], mean[2]}, {}});
  ckpt.blobs.push_back({kIterationBlob, BlobType::u64, {1}, {}, {iteration}});
  return ckpt;
}

template <class T>
void restore(Model<T>& model, const Checkpoint& ckpt, bool reinit_classifier) {
  std::vector<std::string> problems;
  std::vector<std::pair<Parameter<T>*, const Blob*>> plan;
  for (const auto& p : model.registry().all()) {
    if (reinit_classifier && model.is_classifier_parameter(*p)) continue;
    const Blob* b = ckpt.find(p->name());
    if (!b) {
      problems.push_back(p->name() + " (missing)");
    } else if (b->type == BlobType::u64 || b->dims != p->value().shape()) {
      problems.push_back(p->name() + " (stored " + shape_str(b->dims) + ", model " + shape_str(p->value().shape()) + ")");
    } else {
      plan.emplace_back(p.get(), b);
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not fit the model:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw FormatError(msg);
  }
  for (auto [p, b] : plan) {
    auto dst = p->value().data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(b->real[i]);
  }
}

ChannelMean checkpoint_mean(const Checkpoint& ckpt) {
  const Blob* b = ckpt.find(kMeanBlob);
  if (!b || b->real.size() != 3) throw FormatError("checkpoint has no channel mean");
  return {static_cast<float>(b->real[0]), static_cast<float>(b->real[1]), static_cast<float>(b->real[2])};
}

std::uint64_t checkpoint_iteration(const Checkpoint& ckpt) {
  const Blob* b = ckpt.find(kIterationBlob);
  if (!b || b->integer.size() != 1) throw FormatError("checkpoint has no iteration counter");
  return b->integer[0];
}

template Checkpoint snapshot(const Model<float>&, std::string, const ChannelMean&, std::uint64_t);
template Checkpoint snapshot(const Model<double>&, std::string, const ChannelMean&, std::uint64_t);
template void restore(Model<float>&, const Checkpoint&, bool);
template void restore(Model<double>&, const Checkpoint&, bool);

}  // namespace mudeep
