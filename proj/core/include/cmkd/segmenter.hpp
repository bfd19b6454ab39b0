#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "cmkd/fusion.hpp"
#include "cmkd/model_init.hpp"
#include "cmkd/tape.hpp"

namespace cmkd {

inline constexpr int kMaxTextLen = 20;

struct EncoderConfig {
  std::array<int, 5> widths{16, 32, 64, 96, 128}; // channels per visual stage
  int blocks_per_stage = 2;
  int text_layers = 4;
  int text_dim = 96;
  int fusion_dim = 64;   // shared projection width of the cross-modal module
  int decoder_width = 64; // channel count of every decoder level

  bool operator==(const EncoderConfig&) const = default;
};

EncoderConfig teacher_default();
EncoderConfig student_default();

// Spatial extents per stage for one input extent (stride-2 entry conv per
// stage, ceil semantics, clamped at 1).
std::array<int, 5> stage_extents(int input_extent);

// Validates that the decoder can tie stages 3..5 back together: each
// adjacent pair must either match or differ by exactly 2x, and the head's
// three doublings must land on the input extent.
void check_model_input(int h, int w);

template <typename T>
struct ConvParams {
  int w = -1, b = -1; // b < 0 when the conv is affine-followed
  int stride = 1;
};

template <typename T>
struct AffineParams {
  int gamma = -1, beta = -1;
};

template <typename T>
struct ResBlockParams {
  ConvParams<T> c1, c2;
  AffineParams<T> a1, a2;
};

template <typename T>
struct StageParams {
  ConvParams<T> entry;
  std::vector<ResBlockParams<T>> blocks;
};

template <typename T>
struct TextLayerParams {
  int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
  int ff1w = -1, ff1b = -1, ff2w = -1, ff2b = -1;
};

template <typename T>
struct DecoderParams {
  std::array<ConvParams<T>, 3> lateral; // 1x1 to decoder_width, stages 3..5
  std::array<ConvParams<T>, 3> smooth;  // 3x3, decoder_width preserved
  std::array<ConvParams<T>, 3> head;    // 3x3 after each 2x upsample
  ConvParams<T> out; // 1x1 to a single logit channel
};

template <typename T>
struct SegModelT {
  EncoderConfig cfg;
  int vocab_size = 0;
  bool softmax_norm = false;
  ParamStoreT<T> store;
  InitRegistry init_reg;
  std::array<StageParams<T>, 5> stages;
  int embed = -1;
  std::vector<TextLayerParams<T>> text_layers;
  std::array<FusionStageParamsT<T>, 3> fusion; // visual stages 3, 4, 5
  DecoderParams<T> decoder;

  long long param_count() const { return store.param_count(); }
};

template <typename T>
SegModelT<T> build_model(const EncoderConfig& cfg, int vocab_size, bool softmax_norm = false);

template <typename T>
void init_params(SegModelT<T>& model, std::uint64_t seed);

template <typename T>
struct VisualFeaturesT {
  std::array<Var, 5> stages;
};

template <typename T>
struct TextFeaturesT {
  Var features; // kMaxTextLen x text_dim
  std::vector<std::uint8_t> key_mask;
};

template <typename T>
struct ModelOutputsT {
  std::array<Var, 3> a_stages; // masked correlation matrices, stages 3..5
  std::array<Var, 3> d_levels; // decoder maps at stage-3/4/5 resolutions
  Var logits;                  // H0 x W0 x 1
};

template <typename T>
VisualFeaturesT<T> visual_encode(TapeT<T>& tape, const SegModelT<T>& model, Var image);

template <typename T>
TextFeaturesT<T> text_encode(TapeT<T>& tape, const SegModelT<T>& model,
                             const std::vector<int>& token_ids);

template <typename T>
std::pair<std::array<Var, 3>, Var> decode_fpn(TapeT<T>& tape, const SegModelT<T>& model,
                                              const std::array<Var, 3>& fused_stages);

template <typename T>
ModelOutputsT<T> model_forward(TapeT<T>& tape, const SegModelT<T>& model, Var image,
                               const std::vector<int>& token_ids);

// Mean binary cross-entropy with logits, log-sum-exp stabilized.
template <typename T>
Var seg_loss(TapeT<T>& tape, Var logits, Var target);

} // namespace cmkd
