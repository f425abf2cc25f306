#include "mudeep/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "mudeep/errors.hpp"
#include "mudeep/hash.hpp"

namespace mudeep {

namespace {

// Shortest decimal that reads back to the same double.
std::string fmt_real(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(parse_u64(key, v)); }

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not an integer");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": '" + v + "' is not a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": '" + v + "' is not true/false");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <class Fn>
auto rethrow_as(const std::string& key, Fn fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(key, 0) == 0) throw;
    throw ConfigError(key + ": " + msg);
  }
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                           \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },               \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_size(KEY, v); } \
  }
#define REAL_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                           \
    KEY, [](const RunConfig& c) { return fmt_real(c.MEMBER); },                     \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_real(KEY, v); } \
  }
#define BOOL_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                           \
    KEY, [](const RunConfig& c) { return fmt_bool(c.MEMBER); },                     \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); } \
  }
#define INT_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },              \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_int(KEY, v); } \
  }
#define STRING_FIELD(KEY, MEMBER)                                                  \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return c.MEMBER; }, [](RunConfig& c, const std::string& v) { c.MEMBER = v; } \
  }
#define ENUM_FIELD(KEY, MEMBER, PARSE)                                                                   \
  Field {                                                                                                \
    KEY, [](const RunConfig& c) { return to_string(c.MEMBER); },                                         \
        [](RunConfig& c, const std::string& v) { c.MEMBER = rethrow_as(KEY, [&] { return PARSE(v); }); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("model.input_channels", model.input_channels),
      SIZE_FIELD("model.input_h", model.input_h),
      SIZE_FIELD("model.input_w", model.input_w),
      Field{"model.channel_scale", [](const RunConfig& c) { return c.model.channel_scale.str(); },
            [](RunConfig& c, const std::string& v) {
              c.model.channel_scale = rethrow_as("model.channel_scale", [&] { return ChannelScale::parse(v); });
            }},
      SIZE_FIELD("model.embedding_dim", model.embedding_dim),
      SIZE_FIELD("model.verification_hidden", model.verification_hidden),
      SIZE_FIELD("model.num_identities", model.num_identities),
      ENUM_FIELD("model.difference_mode", model.difference_mode, parse_difference_mode),
      BOOL_FIELD("model.use_fusion", model.use_fusion),
      BOOL_FIELD("model.use_classnet", model.use_classnet),
      ENUM_FIELD("model.stream_variant", model.stream_variant, parse_stream_variant),
      ENUM_FIELD("model.reduction", model.reduction, parse_reduction_variant),
      REAL_FIELD("model.dropout", model.dropout),
      SIZE_FIELD("train.batch_size", train.batch_size),
      REAL_FIELD("train.lr0", train.lr0),
      SIZE_FIELD("train.decay_every", train.decay_every),
      REAL_FIELD("train.decay_factor", train.decay_factor),
      REAL_FIELD("train.neg_pos_ratio", train.neg_pos_ratio),
      SIZE_FIELD("train.aug_copies", train.aug_copies),
      REAL_FIELD("train.max_shift", train.max_shift),
      SIZE_FIELD("train.stage1_iters", train.stages.s1),
      SIZE_FIELD("train.stage2_iters", train.stages.s2),
      SIZE_FIELD("train.stage3_iters", train.stages.s3),
      REAL_FIELD("train.cls_loss_weight", train.cls_loss_weight),
      REAL_FIELD("train.ver_loss_weight", train.ver_loss_weight),
      REAL_FIELD("train.momentum", train.momentum),
      REAL_FIELD("train.weight_decay", train.weight_decay),
      Field{"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
            [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("train.seed", v); }},
      Field{"train.precision",
            [](const RunConfig& c) { return std::string(c.precision == Precision::float32 ? "float32" : "float64"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "float32") c.precision = Precision::float32;
              else if (v == "float64") c.precision = Precision::float64;
              else throw ConfigError("train.precision: '" + v + "' is not float32 or float64");
            }},
      STRING_FIELD("data.train_manifest", data.train_manifest),
      STRING_FIELD("data.probe_manifest", data.probe_manifest),
      STRING_FIELD("data.gallery_manifest", data.gallery_manifest),
      INT_FIELD("data.probe_camera", data.probe_camera),
      INT_FIELD("data.gallery_camera", data.gallery_camera),
      SIZE_FIELD("eval.trials", eval.trials),
      ENUM_FIELD("eval.backend", eval.backend, parse_score_backend),
      SIZE_FIELD("eval.batch_size", eval.batch_size),
      SIZE_FIELD("eval.saliency_top_m", eval.saliency_top_m),
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value, got '" + body + "'");
    try {
      c.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a(serialize()); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mudeep
