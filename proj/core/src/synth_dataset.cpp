#include "mdsm/synth_dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "mdsm/errors.hpp"

namespace mdsm {
namespace {

constexpr std::array<std::string_view, kPaletteSize> kColorNames = {
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white"};

constexpr std::array<std::array<float, 3>, kPaletteSize> kColorValues = {{
    {0.90F, 0.12F, 0.10F},
    {0.15F, 0.75F, 0.20F},
    {0.15F, 0.30F, 0.95F},
    {0.95F, 0.90F, 0.15F},
    {0.20F, 0.90F, 0.90F},
    {0.90F, 0.20F, 0.85F},
    {1.00F, 0.55F, 0.05F},
    {0.95F, 0.95F, 0.95F},
}};

constexpr std::array<std::string_view, kRoomCount> kRoomNames = {
    "kitchen", "living room", "bedroom", "bathroom", "hallway", "office", "dining room", "garage"};

constexpr std::array<std::string_view, 5> kVerbs = {"fetch", "bring me", "pick up", "grab", "get"};

constexpr std::array<std::string_view, 4> kQuadrantPhrases = {"upper left", "upper right", "lower left",
                                                              "lower right"};

constexpr double kTriangleCircumradius = 1.2;
constexpr double kSquareHalfSide = 0.9;
constexpr double kMinCenterSpacing = 0.75;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Pixel margin an object needs from the frame so its bbox stays inside.
int object_extent(SizeClass size, int image_size) {
  return static_cast<int>(std::ceil(kTriangleCircumradius * object_radius(size, image_size))) + 1;
}

void validate(const GenerationConfig& config) {
  if (config.min_objects < 2 || config.max_objects > 6 || config.min_objects > config.max_objects) {
    throw ConfigError("object count range must lie within [2, 6], got [" + std::to_string(config.min_objects) +
                      ", " + std::to_string(config.max_objects) + "]");
  }
  if (config.image_size < 32) {
    throw ConfigError("image_size must be at least 32");
  }
  if (config.max_retries < 1) {
    throw ConfigError("max_retries must be positive");
  }
}

bool matches(const SceneObject& candidate, const SceneObject& target, const Description& d, int image_size) {
  if (candidate.shape != target.shape) return false;
  if (d.size && candidate.size != target.size) return false;
  if (d.color && candidate.color != target.color) return false;
  if (d.quadrant && quadrant_of(candidate.cx, candidate.cy, image_size) != quadrant_of(target.cx, target.cy, image_size))
    return false;
  return true;
}

}  // namespace

std::string_view shape_name(ShapeKind shape) {
  switch (shape) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "circle";
}

std::string_view size_name(SizeClass size) { return size == SizeClass::kSmall ? "small" : "large"; }

std::string_view color_name(int color) { return kColorNames.at(static_cast<std::size_t>(color)); }

std::string_view room_name(int room) { return kRoomNames.at(static_cast<std::size_t>(room)); }

std::array<float, 3> color_rgb(int color) { return kColorValues.at(static_cast<std::size_t>(color)); }

int quadrant_of(int cx, int cy, int image_size) {
  const int half = image_size / 2;
  return (cx >= half ? 1 : 0) | (cy >= half ? 2 : 0);
}

double object_radius(SizeClass size, int image_size) {
  return (size == SizeClass::kSmall ? 0.11 : 0.17) * image_size;
}

bool covers_pixel(const SceneObject& object, int image_size, int x, int y) {
  const double r = object_radius(object.size, image_size);
  const double px = x + 0.5 - object.cx;
  const double py = y + 0.5 - object.cy;
  switch (object.shape) {
    case ShapeKind::kCircle:
      return px * px + py * py <= r * r;
    case ShapeKind::kSquare: {
      const double s = kSquareHalfSide * r;
      return std::abs(px) <= s && std::abs(py) <= s;
    }
    case ShapeKind::kTriangle: {
      // Upward equilateral triangle, apex at (0, -R).
      const double big_r = kTriangleCircumradius * r;
      const double half_base = big_r * std::sqrt(3.0) / 2.0;
      if (py > big_r / 2.0) return false;
      const double depth = py + big_r;  // distance below the apex
      if (depth < 0.0) return false;
      const double half_width = depth * half_base / (1.5 * big_r);
      return std::abs(px) <= half_width;
    }
  }
  return false;
}

BBox object_bbox(const SceneObject& object, int image_size) {
  const int reach = object_extent(object.size, image_size) + 1;
  BBox box{image_size, image_size, -1, -1};
  for (int y = std::max(0, object.cy - reach); y <= std::min(image_size - 1, object.cy + reach); ++y) {
    for (int x = std::max(0, object.cx - reach); x <= std::min(image_size - 1, object.cx + reach); ++x) {
      if (!covers_pixel(object, image_size, x, y)) continue;
      box.x_min = std::min(box.x_min, x);
      box.y_min = std::min(box.y_min, y);
      box.x_max = std::max(box.x_max, x);
      box.y_max = std::max(box.y_max, y);
    }
  }
  return box;
}

SceneSpec generate_scene(std::uint64_t seed, const GenerationConfig& config) {
  validate(config);
  std::mt19937_64 rng(seed);
  const int size = config.image_size;
  std::uniform_int_distribution<int> count_dist(config.min_objects, config.max_objects);
  std::uniform_int_distribution<int> shape_dist(0, 2);
  std::uniform_int_distribution<int> color_dist(0, kPaletteSize - 1);
  std::uniform_int_distribution<int> size_dist(0, 1);
  const int count = count_dist(rng);

  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    std::vector<SceneObject> objects;
    std::set<std::tuple<int, int, int, int>> used;
    bool placed_all = true;
    for (int k = 0; k < count && placed_all; ++k) {
      placed_all = false;
      for (int tries = 0; tries < 64; ++tries) {
        SceneObject candidate;
        candidate.shape = static_cast<ShapeKind>(shape_dist(rng));
        candidate.color = color_dist(rng);
        candidate.size = static_cast<SizeClass>(size_dist(rng));
        const int extent = object_extent(candidate.size, size);
        std::uniform_int_distribution<int> pos(extent, size - 1 - extent);
        candidate.cx = pos(rng);
        candidate.cy = pos(rng);

        const auto key = std::make_tuple(static_cast<int>(candidate.shape), candidate.color,
                                         static_cast<int>(candidate.size), quadrant_of(candidate.cx, candidate.cy, size));
        if (used.contains(key)) continue;
        const double r = object_radius(candidate.size, size);
        const bool too_close = std::any_of(objects.begin(), objects.end(), [&](const SceneObject& other) {
          const double min_dist = kMinCenterSpacing * (r + object_radius(other.size, size));
          const double dx = other.cx - candidate.cx;
          const double dy = other.cy - candidate.cy;
          return dx * dx + dy * dy < min_dist * min_dist;
        });
        if (too_close) continue;
        used.insert(key);
        objects.push_back(candidate);
        placed_all = true;
        break;
      }
    }
    if (!placed_all) continue;

    SceneSpec scene;
    scene.objects = std::move(objects);
    scene.target = std::uniform_int_distribution<std::size_t>(0, scene.objects.size() - 1)(rng);
    scene.room = std::uniform_int_distribution<int>(0, kRoomCount - 1)(rng);
    scene.verb = std::uniform_int_distribution<int>(0, static_cast<int>(kVerbs.size()) - 1)(rng);
    scene.seed = seed;
    scene.image_size = size;
    return scene;
  }
  throw GenerationError("could not place " + std::to_string(count) + " uniquely describable objects after " +
                        std::to_string(config.max_retries) + " attempts");
}

Description minimal_description(const SceneSpec& scene) {
  const SceneObject& target = scene.objects.at(scene.target);
  static constexpr std::array<Description, 8> kCandidates = {{
      {false, false, false},
      {false, true, false},
      {true, false, false},
      {true, true, false},
      {false, false, true},
      {false, true, true},
      {true, false, true},
      {true, true, true},
  }};
  for (const Description& d : kCandidates) {
    const auto hits = std::count_if(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
      return matches(o, target, d, scene.image_size);
    });
    if (hits == 1) return d;
  }
  throw GenerationError("target is not uniquely describable");
}

std::string compose_instruction(const SceneSpec& scene) {
  const SceneObject& target = scene.objects.at(scene.target);
  const Description d = minimal_description(scene);
  std::ostringstream out;
  out << "Go to the " << room_name(scene.room) << " and " << kVerbs.at(static_cast<std::size_t>(scene.verb)) << " the ";
  if (d.size) out << size_name(target.size) << ' ';
  if (d.color) out << color_name(target.color) << ' ';
  out << shape_name(target.shape);
  if (d.quadrant) out << " on the " << kQuadrantPhrases.at(static_cast<std::size_t>(quadrant_of(target.cx, target.cy, scene.image_size)));
  out << '.';
  return out.str();
}

std::optional<std::size_t> resolve_instruction(std::string_view instruction, const SceneSpec& scene) {
  const auto words = split_words(instruction);
  std::optional<ShapeKind> shape;
  std::optional<SizeClass> size;
  std::optional<int> color;
  int vertical = -1;
  int horizontal = -1;
  for (const auto& w : words) {
    for (auto s : {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle})
      if (w == shape_name(s)) shape = s;
    if (w == "small") size = SizeClass::kSmall;
    if (w == "large") size = SizeClass::kLarge;
    for (int c = 0; c < kPaletteSize; ++c)
      if (w == color_name(c)) color = c;
    if (w == "upper") vertical = 0;
    if (w == "lower") vertical = 1;
    if (w == "left") horizontal = 0;
    if (w == "right") horizontal = 1;
  }
  if (!shape) return std::nullopt;
  const bool has_quadrant = vertical >= 0 && horizontal >= 0;
  const int quadrant = has_quadrant ? (horizontal | (vertical << 1)) : -1;

  std::optional<std::size_t> found;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    if (o.shape != *shape) continue;
    if (size && o.size != *size) continue;
    if (color && o.color != *color) continue;
    if (has_quadrant && quadrant_of(o.cx, o.cy, scene.image_size) != quadrant) continue;
    if (found) return std::nullopt;
    found = i;
  }
  return found;
}

SampleRecord render_sample(const SceneSpec& scene) {
  const int size = scene.image_size;
  std::mt19937_64 rng(splitmix64(scene.seed ^ 0x5DEECE66DULL));
  std::uniform_real_distribution<float> base_dist(0.10F, 0.35F);
  std::uniform_real_distribution<float> tilt_dist(-0.05F, 0.05F);
  std::uniform_real_distribution<float> noise_dist(-0.03F, 0.03F);

  const float base = base_dist(rng);
  const float tilt_x = tilt_dist(rng);
  const float tilt_y = tilt_dist(rng);

  auto image = torch::empty({3, size, size}, torch::kFloat32);
  auto labels = torch::zeros({size, size}, torch::kInt32);
  auto img = image.accessor<float, 3>();
  auto lab = labels.accessor<int32_t, 2>();

  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const SceneObject& o = scene.objects[k];
    const BBox box = object_bbox(o, size);
    for (int y = box.y_min; y <= box.y_max; ++y)
      for (int x = box.x_min; x <= box.x_max; ++x)
        if (covers_pixel(o, size, x, y)) lab[y][x] = static_cast<int32_t>(k + 1);
  }

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::array<float, 3> rgb{};
      const int label = lab[y][x];
      if (label == 0) {
        const float v = base + tilt_x * (2.0F * x / size - 1.0F) + tilt_y * (2.0F * y / size - 1.0F);
        rgb = {v, v, v};
      } else {
        rgb = color_rgb(scene.objects[static_cast<std::size_t>(label - 1)].color);
      }
      for (int c = 0; c < 3; ++c) {
        const float noisy = std::clamp(rgb[static_cast<std::size_t>(c)] + noise_dist(rng), 0.0F, 1.0F);
        img[c][y][x] = std::round(noisy * 255.0F) / 255.0F;
      }
    }
  }

  SampleRecord record;
  record.gt_mask = labels.eq(static_cast<int32_t>(scene.target + 1)).to(torch::kUInt8);
  if (record.gt_mask.sum().item<int64_t>() == 0) {
    throw GenerationError("target object is fully occluded");
  }
  record.image = image;
  record.label_map = labels;
  record.instruction = compose_instruction(scene);
  record.target_bbox = mask_bbox(record.gt_mask);
  return record;
}

BBox mask_bbox(const torch::Tensor& mask) {
  TORCH_CHECK(mask.dim() == 2, "mask_bbox expects an [H, W] mask");
  auto m = mask.to(torch::kUInt8).contiguous();
  auto acc = m.accessor<uint8_t, 2>();
  BBox box{static_cast<int>(m.size(1)), static_cast<int>(m.size(0)), -1, -1};
  for (int y = 0; y < m.size(0); ++y) {
    for (int x = 0; x < m.size(1); ++x) {
      if (acc[y][x] == 0) continue;
      box.x_min = std::min(box.x_min, x);
      box.y_min = std::min(box.y_min, y);
      box.x_max = std::max(box.x_max, x);
      box.y_max = std::max(box.y_max, y);
    }
  }
  return box;
}

torch::Tensor select_target_mask(const torch::Tensor& label_map, const BBox& bbox) {
  TORCH_CHECK(label_map.dim() == 2, "select_target_mask expects an [H, W] label map");
  const auto labels = label_map.to(torch::kInt64).contiguous();
  const int64_t h = labels.size(0);
  const int64_t w = labels.size(1);
  const int64_t* lab = labels.data_ptr<int64_t>();

  std::vector<int32_t> component(static_cast<std::size_t>(h * w), -1);
  std::vector<int64_t> stack;

  struct Best {
    int64_t area = 0;
    int64_t label = 0;
    int32_t id = -1;
  } best;

  int32_t next_id = 0;
  for (int64_t start = 0; start < h * w; ++start) {
    if (lab[start] == 0 || component[static_cast<std::size_t>(start)] >= 0) continue;
    const int32_t id = next_id++;
    const int64_t label = lab[start];
    int64_t area = 0;
    bool inside = true;
    stack.assign(1, start);
    component[static_cast<std::size_t>(start)] = id;
    while (!stack.empty()) {
      const int64_t p = stack.back();
      stack.pop_back();
      ++area;
      const int y = static_cast<int>(p / w);
      const int x = static_cast<int>(p % w);
      inside = inside && bbox.contains(x, y);
      const std::array<std::pair<int, int>, 4> nbrs = {{{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}}};
      for (auto [nx, ny] : nbrs) {
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const int64_t q = ny * w + nx;
        if (lab[q] != label || component[static_cast<std::size_t>(q)] >= 0) continue;
        component[static_cast<std::size_t>(q)] = id;
        stack.push_back(q);
      }
    }
    if (!inside) continue;
    // Components are discovered in raster order of their first pixel, so `id` encodes that order.
    if (area > best.area || (area == best.area && label < best.label)) {
      best = {area, label, id};
    }
  }

  if (best.id < 0) {
    throw EmptyResultError("no segment lies entirely inside the bounding box");
  }
  auto mask = torch::zeros({h, w}, torch::kUInt8);
  auto* out = mask.data_ptr<uint8_t>();
  for (int64_t p = 0; p < h * w; ++p) out[p] = component[static_cast<std::size_t>(p)] == best.id ? 1 : 0;
  return mask;
}

std::array<DatasetManifest, 3> split_dataset(const std::vector<std::string>& ids, const SplitSizes& sizes,
                                             const std::string& config_echo) {
  if (sizes.train + sizes.val + sizes.test != ids.size()) {
    throw ConfigError("split sizes " + std::to_string(sizes.train) + "+" + std::to_string(sizes.val) + "+" +
                      std::to_string(sizes.test) + " do not sum to " + std::to_string(ids.size()) + " samples");
  }
  std::array<DatasetManifest, 3> out;
  out[0].split = "train";
  out[1].split = "val";
  out[2].split = "test";
  auto first = ids.begin();
  const std::array<std::size_t, 3> counts = {sizes.train, sizes.val, sizes.test};
  for (std::size_t s = 0; s < 3; ++s) {
    out[s].sample_ids.assign(first, first + static_cast<std::ptrdiff_t>(counts[s]));
    out[s].config_echo = config_echo;
    first += static_cast<std::ptrdiff_t>(counts[s]);
  }
  return out;
}

std::string make_sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06zu", index);
  return buf;
}

std::uint64_t derive_seed(std::uint64_t dataset_seed, std::uint64_t index, std::uint64_t attempt) {
  return splitmix64(splitmix64(splitmix64(dataset_seed) ^ index) ^ (attempt * 0xD1B54A32D192ED03ULL));
}

SampleRecord generate_sample(std::uint64_t dataset_seed, std::size_t index, const GenerationConfig& config,
                             SceneSpec* scene_out) {
  validate(config);
  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    const std::uint64_t seed = derive_seed(dataset_seed, index, static_cast<std::uint64_t>(attempt));
    try {
      SceneSpec scene = generate_scene(seed, config);
      SampleRecord record = render_sample(scene);
      // Keep only samples whose visible target is the largest segment inside the object's box.
      const BBox full_box = object_bbox(scene.objects[scene.target], scene.image_size);
      const torch::Tensor selected = select_target_mask(record.label_map, full_box);
      if (!torch::equal(selected, record.gt_mask)) continue;
      record.sample_id = make_sample_id(index);
      if (scene_out != nullptr) *scene_out = std::move(scene);
      return record;
    } catch (const GenerationError&) {
    } catch (const EmptyResultError&) {
    }
  }
  throw GenerationError("sample " + std::to_string(index) + " failed after " + std::to_string(config.max_retries) +
                        " attempts");
}

}  // namespace mdsm
