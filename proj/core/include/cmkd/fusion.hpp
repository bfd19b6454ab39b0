#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmkd/model_init.hpp"
#include "cmkd/tape.hpp"

namespace cmkd {

// One per fused visual stage. All four projections meet in the shared
// dimension c_proj; the output projection starts at zero so a fresh stage is
// the identity on the visual pathway.
template <typename T>
struct FusionStageParamsT {
  int wq = -1, bq = -1; // c_in x c_proj, c_proj
  int wk = -1, bk = -1; // text_dim x c_proj, c_proj
  int wv = -1, bv = -1; // text_dim x c_proj, c_proj
  int wo = -1, bo = -1; // c_proj x c_in, c_in
  int c_in = 0, text_dim = 0, c_proj = 0;
};

template <typename T>
FusionStageParamsT<T> add_fusion_stage_params(ParamStoreT<T>& store, InitRegistry& reg,
                                              const std::string& prefix, int c_in, int text_dim,
                                              int c_proj);

struct FusionOptions {
  // The default correlation is the plain bilinear product with masked key
  // columns zeroed; softmax_norm switches on row-normalized attention weights.
  bool softmax_norm = false;
};

// Per-stage record of the fusion intermediates, kept so the correlation
// matrix can be distilled.
template <typename T>
struct FusionStateT {
  Var v_q; // HW x c_proj
  Var t_k; // L x c_proj
  Var t_v; // L x c_proj
  Var a;   // HW x L, masked
  Var o;   // HW x c_proj
  Var v_fused; // H x W x c_in
};

// v_img: HxWxC_in visual features; t_feat: LxD text features.
template <typename T>
std::array<Var, 3> project_qkv(TapeT<T>& tape, const ParamStoreT<T>& store,
                               const FusionStageParamsT<T>& p, Var v_img, Var t_feat);

template <typename T>
Var correlation(TapeT<T>& tape, Var v_q, Var t_k, const std::vector<std::uint8_t>& key_mask,
                const FusionOptions& opt = {});

template <typename T>
Var attend(TapeT<T>& tape, Var a, Var t_v);

template <typename T>
FusionStateT<T> fuse_stage(TapeT<T>& tape, const ParamStoreT<T>& store,
                           const FusionStageParamsT<T>& p, Var v_img, Var t_feat,
                           const std::vector<std::uint8_t>& key_mask, const FusionOptions& opt = {});

} // namespace cmkd
