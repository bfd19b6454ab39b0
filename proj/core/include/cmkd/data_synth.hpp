#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmkd/segmenter.hpp" // kMaxTextLen
#include "cmkd/tensor.hpp"

namespace cmkd::synth {

enum class ShapeKind : std::uint8_t { Circle = 0, Square = 1, Triangle = 2 };
enum class ColorKind : std::uint8_t { Red = 0, Green = 1, Blue = 2, Yellow = 3 };

struct SceneObject {
  ShapeKind shape;
  ColorKind color;
  int cx = 0, cy = 0; // pixel coordinates
  int size = 0;       // radius / half-width in pixels
};

struct SceneSpec {
  std::vector<SceneObject> objects; // 2..4, pairwise non-overlapping
  int target_index = 0;
};

// Fixed token list; PAD has id 0 and the mapping never changes.
const std::vector<std::string>& vocabulary();
int token_id(std::string_view word); // throws UnknownTokenId
inline constexpr std::uint16_t kPadId = 0;

struct ReferringSample {
  Tensor32 image; // HxWx3 in [0,1]
  std::array<std::uint16_t, kMaxTextLen> token_ids{};
  int real_len = 0;
  std::vector<std::uint8_t> mask; // H*W bytes, 0/1
};

struct GenOptions {
  int canvas = 64;
  bool appearance_only = false; // RefCOCO+-style: no location words
};

// 3x3 coarse position grid.
int coarse_row(int cy, int canvas);
int coarse_col(int cx, int canvas);

// Rejection-samples until the target is uniquely identified by its
// (shape, color, coarse cell) triple; with pair_unique also by
// (shape, color) alone. Bounded at 1000 attempts.
SceneSpec generate_scene(std::uint64_t rng_seed, int canvas, bool pair_unique = false);

// Hard rasterization on a 0.5 gray background; returns the image and one
// binary mask per object (pairwise disjoint).
std::pair<Tensor32, std::vector<std::vector<std::uint8_t>>> render(const SceneSpec& scene,
                                                                   int canvas);

// "the <color> <shape> [at the <position>]"; the position clause is dropped
// in appearance-only mode.
std::vector<int> make_expression(const SceneSpec& scene, bool appearance_only = false);

ReferringSample make_sample(std::uint64_t seed, std::uint64_t index, const GenOptions& opt);
std::vector<ReferringSample> make_dataset(std::uint64_t seed, int count, const GenOptions& opt);

struct Dataset {
  int canvas = 0;
  std::vector<ReferringSample> samples;
};

void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

// Intersection-over-union; an empty union counts as a perfect 1.0.
double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);
double miou(const std::vector<std::vector<std::uint8_t>>& preds,
            const std::vector<std::vector<std::uint8_t>>& gts);

// Conversion helpers for the training side.
template <typename T>
TensorT<T> image_as(const ReferringSample& s) {
  return cast_tensor<T>(s.image);
}

template <typename T>
TensorT<T> mask_as(const ReferringSample& s) {
  const int h = s.image.dim(0), w = s.image.dim(1);
  TensorT<T> t({h, w, 1});
  for (std::size_t i = 0; i < s.mask.size(); ++i) t.data[i] = s.mask[i] ? T(1) : T(0);
  return t;
}

std::vector<int> sample_token_ids(const ReferringSample& s);

} // namespace cmkd::synth
