#include "cmkd/fusion.hpp"

namespace cmkd {

template <typename T>
FusionStageParamsT<T> add_fusion_stage_params(ParamStoreT<T>& store, InitRegistry& reg,
                                              const std::string& prefix, int c_in, int text_dim,
                                              int c_proj) {
  FusionStageParamsT<T> p;
  p.c_in = c_in;
  p.text_dim = text_dim;
  p.c_proj = c_proj;
  p.wq = store.add(prefix + ".wq", {c_in, c_proj});
  p.bq = store.add(prefix + ".bq", {c_proj});
  p.wk = store.add(prefix + ".wk", {text_dim, c_proj});
  p.bk = store.add(prefix + ".bk", {c_proj});
  p.wv = store.add(prefix + ".wv", {text_dim, c_proj});
  p.bv = store.add(prefix + ".bv", {c_proj});
  p.wo = store.add(prefix + ".wo", {c_proj, c_in});
  p.bo = store.add(prefix + ".bo", {c_in});
  reg.note(p.wq, InitKind::UniformFanIn, c_in);
  reg.note(p.bq, InitKind::Zero);
  reg.note(p.wk, InitKind::UniformFanIn, text_dim);
  reg.note(p.bk, InitKind::Zero);
  reg.note(p.wv, InitKind::UniformFanIn, text_dim);
  reg.note(p.bv, InitKind::Zero);
  reg.note(p.wo, InitKind::Zero); // stage starts as the pure visual pathway
  reg.note(p.bo, InitKind::Zero);
  return p;
}

template <typename T>
std::array<Var, 3> project_qkv(TapeT<T>& tape, const ParamStoreT<T>& store,
                               const FusionStageParamsT<T>& p, Var v_img, Var t_feat) {
  const auto& vs = tape.shape(v_img);
  require(vs.size() == 3, Err::RankError, "project_qkv expects HxWxC visual features");
  require(vs[2] == p.c_in, Err::ShapeMismatch, "visual channel count does not match fusion params");
  const auto& ts = tape.shape(t_feat);
  require(ts.size() == 2 && ts[1] == p.text_dim, Err::ShapeMismatch,
          "text feature dim does not match fusion params");

  Var v_flat = tape.reshape(v_img, {vs[0] * vs[1], vs[2]});
  Var v_q = tape.add_row_bias(tape.matmul(v_flat, tape.param(store, p.wq)), tape.param(store, p.bq));
  Var t_k = tape.add_row_bias(tape.matmul(t_feat, tape.param(store, p.wk)), tape.param(store, p.bk));
  Var t_v = tape.add_row_bias(tape.matmul(t_feat, tape.param(store, p.wv)), tape.param(store, p.bv));
  return {v_q, t_k, t_v};
}

namespace {

template <typename T>
TensorT<T> column_mask_matrix(int rows, const std::vector<std::uint8_t>& key_mask) {
  const int l = static_cast<int>(key_mask.size());
  TensorT<T> m({rows, l});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < l; ++j) m.at2(i, j) = key_mask[static_cast<std::size_t>(j)] ? T(1) : T(0);
  return m;
}

} // namespace

template <typename T>
Var correlation(TapeT<T>& tape, Var v_q, Var t_k, const std::vector<std::uint8_t>& key_mask,
                const FusionOptions& opt) {
  const auto& qs = tape.shape(v_q);
  const auto& ks = tape.shape(t_k);
  require(qs.size() == 2 && ks.size() == 2, Err::RankError, "correlation expects rank-2 inputs");
  require(qs[1] == ks[1], Err::ShapeMismatch, "query/key projection dims differ");
  require(static_cast<int>(key_mask.size()) == ks[0], Err::ShapeMismatch,
          "key mask length does not match token count");

  Var raw = tape.matmul(v_q, tape.transpose(t_k));
  Var mask = tape.constant(column_mask_matrix<T>(qs[0], key_mask));
  if (!opt.softmax_norm) return tape.mul(raw, mask);

  // Row-normalized variant: push masked columns far negative, then renormalize
  // over the remaining ones. The final mask multiply pins padded columns to 0.
  TensorT<T> bias({qs[0], static_cast<int>(key_mask.size())});
  for (int i = 0; i < qs[0]; ++i)
    for (int j = 0; j < static_cast<int>(key_mask.size()); ++j)
      bias.at2(i, j) = key_mask[static_cast<std::size_t>(j)] ? T(0) : T(-1e9);
  Var shifted = tape.add(raw, tape.constant(std::move(bias)));
  return tape.mul(tape.softmax_rows(shifted), mask);
}

template <typename T>
Var attend(TapeT<T>& tape, Var a, Var t_v) {
  return tape.matmul(a, t_v);
}

template <typename T>
FusionStateT<T> fuse_stage(TapeT<T>& tape, const ParamStoreT<T>& store,
                           const FusionStageParamsT<T>& p, Var v_img, Var t_feat,
                           const std::vector<std::uint8_t>& key_mask, const FusionOptions& opt) {
  const auto vs = tape.shape(v_img);
  FusionStateT<T> st;
  auto [v_q, t_k, t_v] = project_qkv(tape, store, p, v_img, t_feat);
  st.v_q = v_q;
  st.t_k = t_k;
  st.t_v = t_v;
  st.a = correlation(tape, v_q, t_k, key_mask, opt);
  st.o = attend(tape, st.a, t_v);
  Var proj = tape.add_row_bias(tape.matmul(st.o, tape.param(store, p.wo)), tape.param(store, p.bo));
  st.v_fused = tape.add(v_img, tape.reshape(proj, vs));
  return st;
}

#define CMKD_INSTANTIATE_FUSION(T)                                                              \
  template FusionStageParamsT<T> add_fusion_stage_params<T>(ParamStoreT<T>&, InitRegistry&,     \
                                                            const std::string&, int, int, int); \
  template std::array<Var, 3> project_qkv<T>(TapeT<T>&, const ParamStoreT<T>&,                  \
                                             const FusionStageParamsT<T>&, Var, Var);           \
  template Var correlation<T>(TapeT<T>&, Var, Var, const std::vector<std::uint8_t>&,            \
                              const FusionOptions&);                                            \
  template Var attend<T>(TapeT<T>&, Var, Var);                                                  \
  template FusionStateT<T> fuse_stage<T>(TapeT<T>&, const ParamStoreT<T>&,                      \
                                         const FusionStageParamsT<T>&, Var, Var,                \
                                         const std::vector<std::uint8_t>&, const FusionOptions&);

CMKD_INSTANTIATE_FUSION(float)
CMKD_INSTANTIATE_FUSION(double)

} // namespace cmkd
