#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "smdt/assignment.hpp"
#include "smdt/autodiff.hpp"
#include "smdt/model.hpp"

namespace smdt {

// ---------------------------------------------------------------------------
// Synthetic moving sprites.

enum SpriteClass : std::size_t {
  kMovingLeft = 0,
  kMovingRight = 1,
  kMovingUp = 2,
  kMovingDown = 3,
  kStationary = 4,
  kLarge = 5,
  kSmall = 6,
  kBlinking = 7,
};

inline constexpr std::size_t kSpriteClassCount = 8;

/// Class names, indexed by SpriteClass.
const std::vector<std::string>& sprite_class_names();

struct SpriteConfig {
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_sprites = 1;
  std::size_t max_sprites = 3;
  /// Side lengths in pixels; the gap between the ranges keeps size classes separable.
  std::size_t small_min = 4;
  std::size_t small_max = 7;
  std::size_t large_min = 10;
  std::size_t large_max = 14;
  /// Integer speeds in pixels per frame, along one axis.
  std::size_t min_speed = 1;
  std::size_t max_speed = 2;
  double blink_probability = 0.3;
  /// Central-frame IoU allowed between two sprites of one clip.
  double max_overlap = 0.1;
  double background = 0.1;
  double noise = 0.03;
  std::vector<std::string> classes = sprite_class_names();

  /// Throws ConfigError; `num_classes` is the model's class count.
  void validate(std::size_t num_classes) const;
};

/// Kinematic state of one rendered rectangle. Positions are integer pixels
/// of the top-left corner at frame 0.
struct Sprite {
  long x0 = 0;
  long y0 = 0;
  long vx = 0;
  long vy = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  bool large = false;
  bool blinking = false;
  float color[3] = {1.0f, 1.0f, 1.0f};

  bool visible(std::size_t frame, std::size_t central) const {
    return !blinking || (frame % 2) == (central % 2);
  }
};

/// Ground truth at the central frame, regenerable from (seed, config).
struct ClipRecord {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  GroundTruth annotations;
};

struct GeneratedClip {
  ad::Tensor<float> pixels;  // [3, frames, height, width], values in [0, 1]
  ClipRecord record;
  std::vector<Sprite> sprites;
};

/// Index of the frame the annotations refer to.
inline std::size_t central_frame(std::size_t frames) { return frames / 2; }

/// Pure function of (seed, cfg).
GeneratedClip gen_clip(std::uint64_t seed, const SpriteConfig& cfg, std::uint64_t id = 0);

/// Labels implied by a sprite's kinematics.
Labels sprite_labels(const Sprite& s);

/// Each box coordinate moves uniformly within +-amplitude; centres are then
/// clamped to [0,1] and extents to [1e-3, 1].
ClipRecord jitter_boxes(const ClipRecord& record, double amplitude, std::mt19937_64& rng);

/// Per-clip brightness shift and contrast scale, each drawn within +-amplitude.
void color_jitter(ad::Tensor<float>& pixels, double amplitude, std::mt19937_64& rng);

struct SplitSeeds {
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> validation;
};

/// Disjoint seed ranges derived from one base seed.
SplitSeeds split_seeds(std::uint64_t base_seed, std::size_t train_count, std::size_t val_count);

// ---------------------------------------------------------------------------
// Manifest: one JSON object per line, {"id", "seed", "split", "annotations"}.

struct ManifestEntry {
  ClipRecord record;
  std::string split;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path, std::size_t num_classes);

// ---------------------------------------------------------------------------
// AVA-style annotation CSV:
// video_id,timestamp,x1,y1,x2,y2,action_id,person_id (headerless, one action per row).

struct AvaFrame {
  std::string video_id;
  std::string timestamp;
  GroundTruth gt;
  std::vector<long> person_ids;  // aligned with gt instances
};

struct AvaParseResult {
  std::vector<AvaFrame> frames;  // in order of first appearance
  std::vector<std::string> warnings;
  std::size_t accepted_rows = 0;
};

/// Rows sharing (video_id, timestamp, person_id) merge into one multi-label
/// instance. Malformed rows throw FormatError naming the line; rows with
/// out-of-range coordinates or action ids are skipped with a warning.
AvaParseResult parse_ava_csv(std::istream& in, std::size_t num_classes = 80);

// ---------------------------------------------------------------------------
// Checkpoint: "SMDT", u32 version = 1, u32 tensor count, then per tensor
// u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
// u32 dims, row-major payload. Everything little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params);
void write_checkpoint(const std::filesystem::path& path, const ParameterSet<double>& params);

/// Converts each stored tensor to T. Throws FormatError on a bad magic,
/// version or truncated payload.
template <typename T>
ParameterSet<T> read_checkpoint(const std::filesystem::path& path);

}  // namespace smdt
