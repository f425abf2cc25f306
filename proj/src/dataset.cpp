#include "mudeep/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "mudeep/errors.hpp"

namespace mudeep {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

int parse_int_field(std::string_view v, const std::string& where, int field, const char* what) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size() || out < 0)
    throw FormatError(where + ": field " + std::to_string(field) + " (" + what + "): '" + std::string(v) +
                      "' is not a non-negative integer");
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<SampleRecord> parse_manifest(const std::string& text, const std::string& origin) {
  std::vector<SampleRecord> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string_view body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::vector<std::string_view> fields;
    for (std::size_t start = 0;;) {
      const std::size_t comma = body.find(',', start);
      fields.push_back(trim(body.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() < 3 || fields.size() > 4)
      throw FormatError(where + ": expected path,identity,camera[,frame], got " + std::to_string(fields.size()) +
                        " fields");
    if (fields[0].empty()) throw FormatError(where + ": field 1 (path) is empty");
    SampleRecord r;
    r.path = std::string(fields[0]);
    r.identity = parse_int_field(fields[1], where, 2, "identity");
    r.camera = parse_int_field(fields[2], where, 3, "camera");
    if (fields.size() == 4) r.frame = parse_int_field(fields[3], where, 4, "frame");
    if (!seen.insert(r.path).second) throw FormatError(where + ": duplicate path '" + r.path + "'");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SampleRecord> load_manifest(const std::filesystem::path& csv_path) {
  const auto bytes = read_file(csv_path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()), csv_path.string());
}

void write_manifest(const std::filesystem::path& csv_path, const std::vector<SampleRecord>& records) {
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write " + csv_path.string());
  out << "# path,identity,camera[,frame]\n";
  for (const auto& r : records) {
    out << r.path << ',' << r.identity << ',' << r.camera;
    if (r.frame) out << ',' << *r.frame;
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + csv_path.string());
}

RgbImage decode_ppm(std::span<const std::uint8_t> bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(origin + ": PPM " + what + " is too large");
    }
    if (digits == 0) throw FormatError(origin + ": PPM header is missing the " + std::string(what));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError(origin + ": not a binary P6 PPM");
  pos = 2;
  RgbImage img;
  img.width = read_uint("width");
  img.height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (maxval != 255) throw FormatError(origin + ": PPM maxval must be 255, got " + std::to_string(maxval));
  if (img.width == 0 || img.height == 0) throw FormatError(origin + ": PPM has an empty raster");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(origin + ": malformed PPM header");
  ++pos;
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() - pos < n)
    throw FormatError(origin + ": truncated PPM raster (" + std::to_string(bytes.size() - pos) + " of " +
                      std::to_string(n) + " bytes)");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_ppm(bytes, path.string());
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  if (img.pixels.size() != img.width * img.height * 3) throw InvalidArgument("write_ppm: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> gray) {
  if (gray.size() != width * height) throw InvalidArgument("write_pgm: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Tensor<float> resize_bilinear(const RgbImage& img, std::size_t out_h, std::size_t out_w) {
  if (img.width == 0 || img.height == 0 || out_h == 0 || out_w == 0)
    throw InvalidArgument("resize_bilinear: empty source or target");
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double s = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(s);
      t[o] = {i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(img.height, out_h);
  const auto tx = taps(img.width, out_w);
  Tensor<float> out({3, out_h, out_w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const Tap& a = ty[y];
        const Tap& b = tx[x];
        const double top = img.at(a.i0, b.i0, c) * (1 - b.f) + img.at(a.i0, b.i1, c) * b.f;
        const double bot = img.at(a.i1, b.i0, c) * (1 - b.f) + img.at(a.i1, b.i1, c) * b.f;
        out[(c * out_h + y) * out_w + x] = static_cast<float>((top * (1 - a.f) + bot * a.f) / 255.0);
      }
  return out;
}

ChannelMean channel_mean(std::span<const Tensor<float>> images) {
  if (images.empty()) throw DataError("channel_mean: no images");
  std::array<double, 3> acc{};
  std::size_t per_channel = 0;
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("channel_mean: expected [3,H,W], got " + shape_str(img.shape()));
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < hw; ++i) acc[c] += img[c * hw + i];
    per_channel += hw;
  }
  ChannelMean m;
  for (std::size_t c = 0; c < 3; ++c) m[c] = static_cast<float>(acc[c] / static_cast<double>(per_channel));
  return m;
}

void subtract_mean(Tensor<float>& image, const ChannelMean& mean) {
  const std::size_t hw = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) image[c * hw + i] -= mean[c];
}

std::vector<int> Dataset::identities() const {
  std::set<int> s;
  for (const auto& r : records) s.insert(r.identity);
  return {s.begin(), s.end()};
}

std::vector<int> Dataset::cameras() const {
  std::set<int> s;
  for (const auto& r : records) s.insert(r.camera);
  return {s.begin(), s.end()};
}

Dataset load_dataset(const std::filesystem::path& manifest, std::size_t height, std::size_t width,
                     std::optional<ChannelMean> mean) {
  Dataset ds;
  ds.records = load_manifest(manifest);
  if (ds.records.empty()) throw DataError(manifest.string() + ": manifest lists no images");
  const auto base = manifest.parent_path();
  ds.images.reserve(ds.records.size());
  for (const auto& r : ds.records) {
    const std::filesystem::path p = std::filesystem::path(r.path).is_absolute() ? std::filesystem::path(r.path) : base / r.path;
    if (!std::filesystem::exists(p)) throw DataError("image listed in " + manifest.string() + " not found: " + p.string());
    ds.images.push_back(resize_bilinear(read_ppm(p), height, width));
  }
  ds.mean = mean ? *mean : channel_mean(ds.images);
  for (auto& img : ds.images) subtract_mean(img, ds.mean);
  return ds;
}

namespace {

struct Rgb {
  double r, g, b;
};

struct IdentityLook {
  Rgb hair, torso, legs, glyph;
  std::size_t glyph_y, glyph_x;
  std::array<bool, 25> glyph_bits;
};

}  // namespace

std::filesystem::path synth_generate(const SynthOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.num_ids < 2) throw InvalidArgument("synth_generate needs at least 2 identities");
  if (opts.per_cam < 1) throw InvalidArgument("synth_generate needs at least 1 image per identity and camera");
  if (opts.width < 30 || opts.height < 80) throw InvalidArgument("synth_generate needs at least 30x80 pixels");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw DataError("cannot create directory " + out_dir.string());

  const std::size_t W = opts.width, H = opts.height;
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto color = [&] { return Rgb{0.1 + 0.8 * unit(rng), 0.1 + 0.8 * unit(rng), 0.1 + 0.8 * unit(rng)}; };

  // Body layout in fractions of the frame so other resolutions keep the
  // same proportions.
  auto row = [&](double f) { return static_cast<std::size_t>(f * static_cast<double>(H)); };
  auto col = [&](double f) { return static_cast<std::size_t>(f * static_cast<double>(W)); };
  const std::size_t glyph_cell = std::max<std::size_t>(2, W / 30);

  std::vector<IdentityLook> looks;
  for (int k = 0; k < opts.num_ids; ++k) {
    IdentityLook l;
    l.hair = color();
    l.torso = color();
    l.legs = color();
    l.glyph = color();
    l.glyph_y = row(0.26) + static_cast<std::size_t>(unit(rng) * static_cast<double>(row(0.26)));
    l.glyph_x = col(0.27) + static_cast<std::size_t>(unit(rng) * static_cast<double>(col(0.46) - 5 * glyph_cell));
    for (auto& b : l.glyph_bits) b = unit(rng) < 0.5;
    looks.push_back(l);
  }

  std::normal_distribution<double> noise(0.0, opts.noise_sigma);
  std::vector<SampleRecord> records;
  std::vector<double> canvas(H * W * 3);
  for (int k = 0; k < opts.num_ids; ++k) {
    const IdentityLook& l = looks[static_cast<std::size_t>(k)];
    for (int cam = 0; cam < 2; ++cam) {
      for (int j = 0; j < opts.per_cam; ++j) {
        auto paint = [&](std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1, const Rgb& c) {
          for (std::size_t y = y0; y < std::min(y1, H); ++y)
            for (std::size_t x = x0; x < std::min(x1, W); ++x) {
              double* p = &canvas[(y * W + x) * 3];
              p[0] = c.r;
              p[1] = c.g;
              p[2] = c.b;
            }
        };
        paint(0, H, 0, W, {0.5, 0.5, 0.5});
        paint(row(0.05), row(0.13), col(0.37), col(0.63), l.hair);
        paint(row(0.13), row(0.22), col(0.37), col(0.63), {0.85, 0.7, 0.6});
        paint(row(0.22), row(0.56), col(0.23), col(0.77), l.torso);
        paint(row(0.56), row(0.94), col(0.30), col(0.48), l.legs);
        paint(row(0.56), row(0.94), col(0.52), col(0.70), l.legs);
        for (std::size_t gy = 0; gy < 5; ++gy)
          for (std::size_t gx = 0; gx < 5; ++gx)
            if (l.glyph_bits[gy * 5 + gx])
              paint(l.glyph_y + gy * glyph_cell, l.glyph_y + (gy + 1) * glyph_cell, l.glyph_x + gx * glyph_cell,
                    l.glyph_x + (gx + 1) * glyph_cell, l.glyph);

        double gain = 1.0;
        long dy = 0, dx = 0;
        if (cam == 1) {
          gain = 0.75 + 0.2 * unit(rng);
          dy = std::uniform_int_distribution<long>(-4, 4)(rng);
          dx = std::uniform_int_distribution<long>(-2, 2)(rng);
        }
        RgbImage img{W, H, std::vector<std::uint8_t>(H * W * 3)};
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const auto sy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) - dy, 0, static_cast<long>(H) - 1));
            const auto sx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) - dx, 0, static_cast<long>(W) - 1));
            for (std::size_t c = 0; c < 3; ++c) {
              const double v = canvas[(sy * W + sx) * 3 + c] * gain + noise(rng);
              img.pixels[(y * W + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
          }
        const std::string name =
            "id_" + std::to_string(k) + "_cam" + std::to_string(cam) + "_" + std::to_string(j) + ".ppm";
        write_ppm(out_dir / name, img);
        records.push_back({name, k, cam, std::nullopt});
      }
    }
  }
  const auto manifest = out_dir / "manifest.csv";
  write_manifest(manifest, records);
  return manifest;
}

template <class T>
Tensor<T> aggregate_sequence(std::span<const Tensor<T>> frames) {
  if (frames.empty()) throw InvalidArgument("aggregate_sequence: no frames");
  Tensor<T> out = frames[0];
  for (std::size_t f = 1; f < frames.size(); ++f) {
    if (frames[f].shape() != out.shape())
      throw ShapeError("aggregate_sequence: frame " + std::to_string(f) + " has shape " +
                       shape_str(frames[f].shape()) + ", expected " + shape_str(out.shape()));
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], frames[f][i]);
  }
  return out;
}

std::map<std::pair<int, int>, std::vector<std::size_t>> group_sequences(const std::vector<SampleRecord>& records) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[{records[i].identity, records[i].camera}].push_back(i);
  for (auto& [key, idx] : groups)
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].frame.value_or(0) < records[b].frame.value_or(0);
    });
  return groups;
}

template Tensor<float> aggregate_sequence(std::span<const Tensor<float>>);
template Tensor<double> aggregate_sequence(std::span<const Tensor<double>>);

}  // namespace mudeep
