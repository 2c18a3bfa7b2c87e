#pragma once

// Synthetic referring-segmentation scenes: multi-object images, two-clause
// instructions naming exactly one target, and exact visible-pixel masks.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "mdsm/vocabulary.hpp"

namespace mdsm {

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class SizeClass { kSmall, kLarge };

inline constexpr int kPaletteSize = 8;
inline constexpr int kRoomCount = 8;

std::string_view shape_name(ShapeKind shape);
std::string_view size_name(SizeClass size);
std::string_view color_name(int color);
std::string_view room_name(int room);
std::array<float, 3> color_rgb(int color);

/// Quadrant index of a pixel position: bit 0 = right half, bit 1 = bottom half.
int quadrant_of(int cx, int cy, int image_size);

struct SceneObject {
  ShapeKind shape = ShapeKind::kCircle;
  int color = 0;
  SizeClass size = SizeClass::kSmall;
  int cx = 0;
  int cy = 0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// Inclusive pixel rectangle.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = -1;
  int y_max = -1;

  bool contains(int x, int y) const { return x >= x_min && x <= x_max && y >= y_min && y <= y_max; }
  bool empty() const { return x_max < x_min || y_max < y_min; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;  // drawn back-to-front in list order
  std::size_t target = 0;
  int room = 0;
  int verb = 0;
  std::uint64_t seed = 0;
  int image_size = 64;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct GenerationConfig {
  int image_size = 64;
  int min_objects = 2;
  int max_objects = 4;
  int max_retries = 200;
};

/// Shape radius in pixels for a size class at a given image size.
double object_radius(SizeClass size, int image_size);

/// Axis-aligned bounds of the full (unoccluded) shape, clipped to nothing.
BBox object_bbox(const SceneObject& object, int image_size);

/// True when the pixel centre (x + 0.5, y + 0.5) lies inside the shape.
bool covers_pixel(const SceneObject& object, int image_size, int x, int y);

SceneSpec generate_scene(std::uint64_t seed, const GenerationConfig& config);

/// Index sets into {size, color, quadrant}; the shape noun is always present.
struct Description {
  bool size = false;
  bool color = false;
  bool quadrant = false;
};

/// Shortest attribute description that singles out the target.
Description minimal_description(const SceneSpec& scene);

/// "Go to the <room> and <verb> the <attributes> <shape> <spatial-relation>."
std::string compose_instruction(const SceneSpec& scene);

/// Parses a generated instruction and returns the index of the only matching object.
std::optional<std::size_t> resolve_instruction(std::string_view instruction, const SceneSpec& scene);

struct SampleRecord {
  torch::Tensor image;     // [3, H, W] float32 in [0, 1], multiples of 1/255
  torch::Tensor gt_mask;   // [H, W] uint8 in {0, 1}
  torch::Tensor label_map; // [H, W] int32, 0 = background, k = objects[k - 1]
  std::string instruction;
  TokenSequence tokens;
  BBox target_bbox;
  std::string sample_id;
};

/// Rasterizes the scene with the painter's algorithm.
/// Throws GenerationError when the target ends up fully occluded.
SampleRecord render_sample(const SceneSpec& scene);

/// Largest 4-connected, single-label segment lying entirely inside `bbox`.
/// `label_map` is an [H, W] integer map; label 0 is background and never selected.
/// Ties on area go to the smaller label, then to the earlier first pixel in raster order.
/// Throws EmptyResultError when no segment fits.
torch::Tensor select_target_mask(const torch::Tensor& label_map, const BBox& bbox);

/// Tight bounds of the nonzero pixels of an [H, W] mask.
BBox mask_bbox(const torch::Tensor& mask);

struct DatasetManifest {
  std::string split;
  std::vector<std::string> sample_ids;
  std::string config_echo;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// Contiguous, disjoint train/val/test partition of `ids`.
std::array<DatasetManifest, 3> split_dataset(const std::vector<std::string>& ids, const SplitSizes& sizes,
                                             const std::string& config_echo = {});

std::string make_sample_id(std::size_t index);

/// Per-sample seed derived from the dataset seed, the sample index and a retry counter.
std::uint64_t derive_seed(std::uint64_t dataset_seed, std::uint64_t index, std::uint64_t attempt);

/// Generates a sample whose target passes the bbox-containment selection rule,
/// retrying with derived seeds. Throws GenerationError after `config.max_retries`.
SampleRecord generate_sample(std::uint64_t dataset_seed, std::size_t index, const GenerationConfig& config,
                             SceneSpec* scene_out = nullptr);

}  // namespace mdsm
