#include "smdt/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "smdt/errors.hpp"

namespace smdt {

const std::vector<std::string>& sprite_class_names() {
  static const std::vector<std::string> names = {"moving_left", "moving_right", "moving_up", "moving_down",
                                                 "stationary",  "large",        "small",     "blinking"};
  return names;
}

void SpriteConfig::validate(std::size_t num_classes) const {
  auto fail = [](const std::string& msg) { throw ConfigError("sprite config: " + msg); };
  if (classes != sprite_class_names()) {
    fail("class vocabulary must be the 8 sprite classes in canonical order");
  }
  if (num_classes != classes.size()) {
    fail("model predicts " + std::to_string(num_classes) + " classes but the vocabulary has " +
         std::to_string(classes.size()));
  }
  if (frames < 2 || height == 0 || width == 0) fail("clip needs >= 2 frames and non-empty frames");
  if (min_sprites == 0 || min_sprites > max_sprites) fail("sprite count range must satisfy 1 <= min <= max");
  if (small_min == 0 || small_min > small_max || small_max >= large_min || large_min > large_max) {
    fail("size ranges must satisfy 1 <= small_min <= small_max < large_min <= large_max");
  }
  if (min_speed == 0 || min_speed > max_speed) fail("speed range must satisfy 1 <= min <= max");
  const std::size_t travel = max_speed * (frames - 1);
  if (large_max + travel > std::min(height, width)) {
    fail("fastest large sprite cannot stay inside the frame for the whole clip");
  }
  if (!(blink_probability >= 0.0 && blink_probability <= 1.0)) fail("blink_probability must lie in [0, 1]");
  if (!(max_overlap >= 0.0 && max_overlap <= 1.0)) fail("max_overlap must lie in [0, 1]");
  if (!(background >= 0.0 && background <= 1.0) || !(noise >= 0.0 && noise <= 0.5)) {
    fail("background must lie in [0, 1] and noise in [0, 0.5]");
  }
}

Labels sprite_labels(const Sprite& s) {
  Labels l(kSpriteClassCount, 0);
  if (s.vx < 0) l[kMovingLeft] = 1;
  if (s.vx > 0) l[kMovingRight] = 1;
  if (s.vy < 0) l[kMovingUp] = 1;
  if (s.vy > 0) l[kMovingDown] = 1;
  if (s.vx == 0 && s.vy == 0) l[kStationary] = 1;
  l[s.large ? kLarge : kSmall] = 1;
  if (s.blinking) l[kBlinking] = 1;
  return l;
}

namespace {

long uniform(std::mt19937_64& rng, long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); }

CornerBox central_corners(const Sprite& s, std::size_t central) {
  const double x = static_cast<double>(s.x0 + s.vx * static_cast<long>(central));
  const double y = static_cast<double>(s.y0 + s.vy * static_cast<long>(central));
  return {x, y, x + static_cast<double>(s.w), y + static_cast<double>(s.h)};
}

// Start-position range keeping [start + v*f, start + v*f + extent) inside [0, limit).
bool start_range(long v, std::size_t extent, std::size_t limit, std::size_t frames, long& lo, long& hi) {
  const long travel = v * static_cast<long>(frames - 1);
  lo = std::max(0L, -travel);
  hi = static_cast<long>(limit) - static_cast<long>(extent) - std::max(0L, travel);
  return lo <= hi;
}

}  // namespace

GeneratedClip gen_clip(std::uint64_t seed, const SpriteConfig& cfg, std::uint64_t id) {
  cfg.validate(kSpriteClassCount);
  std::mt19937_64 rng(seed);
  const std::size_t central = central_frame(cfg.frames);
  const long count = uniform(rng, static_cast<long>(cfg.min_sprites), static_cast<long>(cfg.max_sprites));

  GeneratedClip out;
  for (long k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Sprite s;
      s.large = uniform(rng, 0, 1) == 1;
      const long lo = static_cast<long>(s.large ? cfg.large_min : cfg.small_min);
      const long hi = static_cast<long>(s.large ? cfg.large_max : cfg.small_max);
      s.h = static_cast<std::size_t>(uniform(rng, lo, hi));
      s.w = static_cast<std::size_t>(uniform(rng, lo, hi));
      const long direction = uniform(rng, 0, 4);
      const long speed = uniform(rng, static_cast<long>(cfg.min_speed), static_cast<long>(cfg.max_speed));
      switch (direction) {
        case kMovingLeft: s.vx = -speed; break;
        case kMovingRight: s.vx = speed; break;
        case kMovingUp: s.vy = -speed; break;
        case kMovingDown: s.vy = speed; break;
        default: break;
      }
      s.blinking = std::bernoulli_distribution(cfg.blink_probability)(rng);
      for (float& c : s.color) c = static_cast<float>(std::uniform_real_distribution<double>(0.45, 1.0)(rng));
      long xlo, xhi, ylo, yhi;
      if (!start_range(s.vx, s.w, cfg.width, cfg.frames, xlo, xhi) ||
          !start_range(s.vy, s.h, cfg.height, cfg.frames, ylo, yhi)) {
        continue;
      }
      s.x0 = uniform(rng, xlo, xhi);
      s.y0 = uniform(rng, ylo, yhi);
      const CornerBox mine = central_corners(s, central);
      const bool overlaps = std::any_of(out.sprites.begin(), out.sprites.end(), [&](const Sprite& o) {
        return iou(mine, central_corners(o, central)) > cfg.max_overlap;
      });
      if (overlaps) continue;
      out.sprites.push_back(s);
      break;
    }
  }

  const std::size_t T = cfg.frames, H = cfg.height, W = cfg.width;
  out.pixels = ad::Tensor<float>({3, T, H, W}, static_cast<float>(cfg.background));
  std::mt19937_64 noise_rng(rng());
  std::uniform_real_distribution<float> jitter(-static_cast<float>(cfg.noise), static_cast<float>(cfg.noise));
  if (cfg.noise > 0.0) {
    for (float& v : out.pixels.data) v += jitter(noise_rng);
  }
  for (std::size_t f = 0; f < T; ++f) {
    for (const Sprite& s : out.sprites) {
      if (!s.visible(f, central)) continue;
      const long x = s.x0 + s.vx * static_cast<long>(f);
      const long y = s.y0 + s.vy * static_cast<long>(f);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t r = 0; r < s.h; ++r) {
          float* row = out.pixels.data.data() + ((ch * T + f) * H + static_cast<std::size_t>(y) + r) * W +
                       static_cast<std::size_t>(x);
          std::fill(row, row + s.w, s.color[ch]);
        }
      }
    }
  }

  out.record.id = id;
  out.record.seed = seed;
  for (const Sprite& s : out.sprites) {
    const CornerBox c = central_corners(s, central);
    out.record.annotations.boxes.push_back(
        from_corners({c.x1 / static_cast<double>(W), c.y1 / static_cast<double>(H), c.x2 / static_cast<double>(W),
                      c.y2 / static_cast<double>(H)}));
    out.record.annotations.labels.push_back(sprite_labels(s));
  }
  return out;
}

ClipRecord jitter_boxes(const ClipRecord& record, double amplitude, std::mt19937_64& rng) {
  if (!(amplitude >= 0.0 && amplitude <= 0.2)) throw InputError("jitter amplitude must lie in [0, 0.2]");
  if (amplitude == 0.0) return record;
  std::uniform_real_distribution<double> d(-amplitude, amplitude);
  ClipRecord out = record;
  for (Box& b : out.annotations.boxes) {
    const double cx = std::clamp(b.cx() + d(rng), 0.0, 1.0);
    const double cy = std::clamp(b.cy() + d(rng), 0.0, 1.0);
    const double h = std::clamp(b.h() + d(rng), 1e-3, 1.0);
    const double w = std::clamp(b.w() + d(rng), 1e-3, 1.0);
    b = Box(cx, cy, h, w);
  }
  return out;
}

void color_jitter(ad::Tensor<float>& pixels, double amplitude, std::mt19937_64& rng) {
  if (amplitude <= 0.0) return;
  const float brightness = static_cast<float>(std::uniform_real_distribution<double>(-amplitude, amplitude)(rng));
  const float contrast =
      static_cast<float>(std::uniform_real_distribution<double>(1.0 - amplitude, 1.0 + amplitude)(rng));
  for (float& v : pixels.data) v = std::clamp((v - 0.5f) * contrast + 0.5f + brightness, 0.0f, 1.0f);
}

SplitSeeds split_seeds(std::uint64_t base_seed, std::size_t train_count, std::size_t val_count) {
  constexpr std::uint64_t kValidationOffset = std::uint64_t{1} << 32;
  SplitSeeds out;
  for (std::size_t i = 0; i < train_count; ++i) out.train.push_back(base_seed + i);
  for (std::size_t i = 0; i < val_count; ++i) out.validation.push_back(base_seed + kValidationOffset + i);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest.

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : entries) {
    nlohmann::json j;
    j["id"] = e.record.id;
    j["seed"] = e.record.seed;
    j["split"] = e.split;
    j["annotations"] = nlohmann::json::array();
    const GroundTruth& gt = e.record.annotations;
    for (std::size_t k = 0; k < gt.size(); ++k) {
      std::vector<std::size_t> active;
      for (std::size_t c = 0; c < gt.labels[k].size(); ++c) {
        if (gt.labels[k][c]) active.push_back(c);
      }
      j["annotations"].push_back({{"cx", gt.boxes[k].cx()},
                                  {"cy", gt.boxes[k].cy()},
                                  {"h", gt.boxes[k].h()},
                                  {"w", gt.boxes[k].w()},
                                  {"labels", active}});
    }
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("failed writing manifest " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.record.id = j.at("id").get<std::uint64_t>();
      e.record.seed = j.at("seed").get<std::uint64_t>();
      e.split = j.at("split").get<std::string>();
      for (const auto& a : j.at("annotations")) {
        e.record.annotations.boxes.emplace_back(a.at("cx").get<double>(), a.at("cy").get<double>(),
                                                a.at("h").get<double>(), a.at("w").get<double>());
        Labels l(num_classes, 0);
        for (std::size_t c : a.at("labels").get<std::vector<std::size_t>>()) l.at(c) = 1;
        e.record.annotations.labels.push_back(std::move(l));
      }
      e.record.annotations.validate(num_classes);
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// AVA CSV.

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_double(const std::string& s, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) {
    throw FormatError("line " + std::to_string(line_no) + ": '" + s + "' is not a number");
  }
  return v;
}

long parse_long(const std::string& s, std::size_t line_no) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw FormatError("line " + std::to_string(line_no) + ": '" + s + "' is not an integer");
  }
  return v;
}

}  // namespace

AvaParseResult parse_ava_csv(std::istream& in, std::size_t num_classes) {
  AvaParseResult result;
  std::map<std::pair<std::string, std::string>, std::size_t> frame_index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 8) {
      throw FormatError("line " + std::to_string(line_no) + ": expected 8 fields, found " + std::to_string(f.size()));
    }
    if (f[0].empty() || f[1].empty()) throw FormatError("line " + std::to_string(line_no) + ": empty video id or timestamp");
    const double x1 = parse_double(f[2], line_no), y1 = parse_double(f[3], line_no);
    const double x2 = parse_double(f[4], line_no), y2 = parse_double(f[5], line_no);
    const long action = parse_long(f[6], line_no);
    const long person = parse_long(f[7], line_no);

    const bool in_unit = x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 && x1 <= x2 && y1 <= y2;
    if (!in_unit) {
      result.warnings.push_back("line " + std::to_string(line_no) + ": box outside the unit square, row skipped");
      continue;
    }
    if (action < 1 || static_cast<std::size_t>(action) > num_classes) {
      result.warnings.push_back("line " + std::to_string(line_no) + ": action id " + std::to_string(action) +
                                " outside [1, " + std::to_string(num_classes) + "], row skipped");
      continue;
    }

    const auto key = std::make_pair(f[0], f[1]);
    auto it = frame_index.find(key);
    if (it == frame_index.end()) {
      it = frame_index.emplace(key, result.frames.size()).first;
      result.frames.push_back({f[0], f[1], {}, {}});
    }
    AvaFrame& frame = result.frames[it->second];
    const auto pit = std::find(frame.person_ids.begin(), frame.person_ids.end(), person);
    std::size_t k = static_cast<std::size_t>(pit - frame.person_ids.begin());
    if (pit == frame.person_ids.end()) {
      frame.person_ids.push_back(person);
      frame.gt.boxes.push_back(from_corners({x1, y1, x2, y2}));
      frame.gt.labels.emplace_back(num_classes, 0);
      k = frame.person_ids.size() - 1;
    }
    frame.gt.labels[k][static_cast<std::size_t>(action - 1)] = 1;
    ++result.accepted_rows;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint.

namespace {

constexpr char kMagic[4] = {'S', 'M', 'D', 'T'};

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::istream& is, const std::string& what) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint truncated while reading " + what);
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

template <typename T>
void write_checkpoint_impl(const std::filesystem::path& path, const ParameterSet<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::string& name = params.names[k];
    const auto& t = params.tensors[k];
    if (name.size() > 0xFFFF) throw InputError("checkpoint: parameter name too long");
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(os, std::is_same_v<T, float> ? 0 : 1);
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    for (T v : t.data) put_le<Bits>(os, std::bit_cast<Bits>(v));
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params) {
  write_checkpoint_impl(path, params);
}

void write_checkpoint(const std::filesystem::path& path, const ParameterSet<double>& params) {
  write_checkpoint_impl(path, params);
}

template <typename T>
ParameterSet<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(is, "tensor count");
  ParameterSet<T> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get_le<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint truncated while reading a name");
    const auto dtype = get_le<std::uint8_t>(is, "dtype");
    if (dtype > 1) throw FormatError("checkpoint: unknown dtype " + std::to_string(dtype) + " for '" + name + "'");
    const auto rank = get_le<std::uint8_t>(is, "rank");
    ad::Shape shape(rank);
    for (auto& d : shape) d = get_le<std::uint32_t>(is, "dims");
    ad::Tensor<T> t(shape);
    for (T& v : t.data) {
      if (dtype == 0) {
        v = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(is, "payload of '" + name + "'")));
      } else {
        v = static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(is, "payload of '" + name + "'")));
      }
    }
    out.add(std::move(name), std::move(t));
  }
  return out;
}

template ParameterSet<float> read_checkpoint(const std::filesystem::path&);
template ParameterSet<double> read_checkpoint(const std::filesystem::path&);

}  // namespace smdt
