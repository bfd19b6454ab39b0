#include "cmkd/segmenter.hpp"

#include <cmath>
#include <string>

namespace cmkd {

EncoderConfig teacher_default() { return EncoderConfig{}; }

EncoderConfig student_default() {
  EncoderConfig c;
  c.widths = {8, 16, 32, 48, 64};
  c.blocks_per_stage = 1;
  c.text_layers = 2;
  c.text_dim = 48;
  return c;
}

std::array<int, 5> stage_extents(int input_extent) {
  std::array<int, 5> e{};
  int cur = input_extent;
  for (int i = 0; i < 5; ++i) {
    cur = (cur + 1) / 2;
    e[static_cast<std::size_t>(i)] = cur;
  }
  return e;
}

namespace {

void check_axis(int extent) {
  require(extent >= 8 && extent % 8 == 0, Err::ShapeMismatch,
          "input extent " + std::to_string(extent) + " must be a positive multiple of 8");
  auto e = stage_extents(extent);
  auto ladder_ok = [](int up, int down) { return up == down || 2 * up == down; };
  require(ladder_ok(e[4], e[3]) && ladder_ok(e[3], e[2]), Err::ShapeMismatch,
          "stage extents " + std::to_string(e[2]) + "/" + std::to_string(e[3]) + "/" +
              std::to_string(e[4]) + " cannot be tied by 2x upsampling");
  require(e[2] * 8 == extent, Err::ShapeMismatch, "stage-3 extent must be input/8");
}

} // namespace

void check_model_input(int h, int w) {
  check_axis(h);
  check_axis(w);
}

// ---------------------------------------------------------------------------
// Model assembly

namespace {

template <typename T>
ConvParams<T> add_conv(SegModelT<T>& m, const std::string& name, int k, int cin, int cout,
                       int stride, bool with_bias) {
  ConvParams<T> c;
  c.stride = stride;
  c.w = m.store.add(name + ".w", {k, k, cin, cout});
  m.init_reg.note(c.w, InitKind::UniformFanIn, k * k * cin);
  if (with_bias) {
    c.b = m.store.add(name + ".b", {cout});
    m.init_reg.note(c.b, InitKind::Zero);
  }
  return c;
}

template <typename T>
AffineParams<T> add_affine(SegModelT<T>& m, const std::string& name, int c) {
  AffineParams<T> a;
  a.gamma = m.store.add(name + ".g", {c});
  a.beta = m.store.add(name + ".b", {c});
  m.init_reg.note(a.gamma, InitKind::One);
  m.init_reg.note(a.beta, InitKind::Zero);
  return a;
}

template <typename T>
int add_linear(SegModelT<T>& m, const std::string& name, int in, int out, int* bias) {
  int w = m.store.add(name + ".w", {in, out});
  m.init_reg.note(w, InitKind::UniformFanIn, in);
  *bias = m.store.add(name + ".b", {out});
  m.init_reg.note(*bias, InitKind::Zero);
  return w;
}

} // namespace

template <typename T>
SegModelT<T> build_model(const EncoderConfig& cfg, int vocab_size, bool softmax_norm) {
  require(cfg.decoder_width % 8 == 0, Err::ShapeMismatch, "decoder_width must be a multiple of 8");
  for (int w : cfg.widths) require(w >= 1, Err::ShapeMismatch, "stage width must be >= 1");
  require(vocab_size >= 1, Err::ShapeMismatch, "vocab size must be >= 1");

  SegModelT<T> m;
  m.cfg = cfg;
  m.vocab_size = vocab_size;
  m.softmax_norm = softmax_norm;

  int cin = 3;
  for (int s = 0; s < 5; ++s) {
    const int cout = cfg.widths[static_cast<std::size_t>(s)];
    const std::string sn = "enc.s" + std::to_string(s + 1);
    m.stages[static_cast<std::size_t>(s)].entry = add_conv(m, sn + ".entry", 3, cin, cout, 2, true);
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string bn = sn + ".blk" + std::to_string(b);
      ResBlockParams<T> blk;
      blk.c1 = add_conv(m, bn + ".c1", 3, cout, cout, 1, false);
      blk.a1 = add_affine(m, bn + ".a1", cout);
      blk.c2 = add_conv(m, bn + ".c2", 3, cout, cout, 1, false);
      blk.a2 = add_affine(m, bn + ".a2", cout);
      m.stages[static_cast<std::size_t>(s)].blocks.push_back(blk);
    }
    cin = cout;
  }

  m.embed = m.store.add("text.embed", {vocab_size, cfg.text_dim});
  m.init_reg.note(m.embed, InitKind::Normal002);
  const int d = cfg.text_dim;
  for (int l = 0; l < cfg.text_layers; ++l) {
    const std::string ln = "text.l" + std::to_string(l);
    TextLayerParams<T> tl;
    tl.wq = add_linear(m, ln + ".q", d, d, &tl.bq);
    tl.wk = add_linear(m, ln + ".k", d, d, &tl.bk);
    tl.wv = add_linear(m, ln + ".v", d, d, &tl.bv);
    tl.wo = add_linear(m, ln + ".o", d, d, &tl.bo);
    tl.ff1w = add_linear(m, ln + ".ff1", d, 4 * d, &tl.ff1b);
    tl.ff2w = add_linear(m, ln + ".ff2", 4 * d, d, &tl.ff2b);
    m.text_layers.push_back(tl);
  }

  for (int i = 0; i < 3; ++i) {
    const int stage_c = cfg.widths[static_cast<std::size_t>(i + 2)];
    m.fusion[static_cast<std::size_t>(i)] = add_fusion_stage_params<T>(
        m.store, m.init_reg, "fusion.s" + std::to_string(i + 3), stage_c, d, cfg.fusion_dim);
  }

  const int cd = cfg.decoder_width;
  for (int i = 0; i < 3; ++i) {
    const int stage_c = cfg.widths[static_cast<std::size_t>(i + 2)];
    m.decoder.lateral[static_cast<std::size_t>(i)] =
        add_conv(m, "dec.lat" + std::to_string(i + 3), 1, stage_c, cd, 1, true);
    m.decoder.smooth[static_cast<std::size_t>(i)] =
        add_conv(m, "dec.smooth" + std::to_string(i + 3), 3, cd, cd, 1, true);
  }
  int hc = cd;
  for (int i = 0; i < 3; ++i) {
    m.decoder.head[static_cast<std::size_t>(i)] =
        add_conv(m, "dec.head" + std::to_string(i), 3, hc, hc / 2, 1, true);
    hc /= 2;
  }
  m.decoder.out = add_conv(m, "dec.out", 1, hc, 1, 1, true);
  return m;
}

template <typename T>
void init_params(SegModelT<T>& model, std::uint64_t seed) {
  apply_init(model.store, model.init_reg, seed);
}

// ---------------------------------------------------------------------------
// Forward pieces

namespace {

template <typename T>
Var run_conv(TapeT<T>& tape, const ParamStoreT<T>& store, const ConvParams<T>& c, Var x) {
  Var y = tape.conv2d(x, tape.param(store, c.w), c.stride);
  if (c.b >= 0) y = tape.add_channel_bias(y, tape.param(store, c.b));
  return y;
}

template <typename T>
Var run_affine(TapeT<T>& tape, const ParamStoreT<T>& store, const AffineParams<T>& a, Var x) {
  return tape.channel_scale_shift(x, tape.param(store, a.gamma), tape.param(store, a.beta));
}

template <typename T>
Var run_linear(TapeT<T>& tape, const ParamStoreT<T>& store, int w, int b, Var x) {
  return tape.add_row_bias(tape.matmul(x, tape.param(store, w)), tape.param(store, b));
}

// Ties a coarser map to a finer one: identity when extents already match
// (clamped 1x1 stages), otherwise exact 2x nearest upsampling.
template <typename T>
Var match_up(TapeT<T>& tape, Var coarse, const std::vector<int>& fine_shape) {
  const auto& cs = tape.shape(coarse);
  if (cs[0] == fine_shape[0] && cs[1] == fine_shape[1]) return coarse;
  Var up = tape.upsample_nearest2x(coarse);
  const auto& us = tape.shape(up);
  require(us[0] == fine_shape[0] && us[1] == fine_shape[1], Err::ShapeMismatch,
          "upsampled extent does not match the finer stage");
  return up;
}

} // namespace

template <typename T>
VisualFeaturesT<T> visual_encode(TapeT<T>& tape, const SegModelT<T>& model, Var image) {
  const auto& s = tape.shape(image);
  require(s.size() == 3 && s[2] == 3, Err::ShapeMismatch, "image must be HxWx3");
  check_model_input(s[0], s[1]);

  VisualFeaturesT<T> vf;
  Var x = image;
  for (int st = 0; st < 5; ++st) {
    const auto& stage = model.stages[static_cast<std::size_t>(st)];
    x = tape.relu(run_conv(tape, model.store, stage.entry, x));
    for (const auto& blk : stage.blocks) {
      Var h = run_affine(tape, model.store, blk.a1, run_conv(tape, model.store, blk.c1, x));
      h = tape.relu(h);
      h = run_affine(tape, model.store, blk.a2, run_conv(tape, model.store, blk.c2, h));
      x = tape.add(x, h);
    }
    vf.stages[static_cast<std::size_t>(st)] = x;
  }
  return vf;
}

template <typename T>
TextFeaturesT<T> text_encode(TapeT<T>& tape, const SegModelT<T>& model,
                             const std::vector<int>& token_ids) {
  require(static_cast<int>(token_ids.size()) <= kMaxTextLen, Err::ShapeMismatch,
          "token sequence longer than the maximum text length");
  std::vector<int> ids = token_ids;
  ids.resize(kMaxTextLen, 0); // PAD id is 0
  for (int id : ids)
    require(id >= 0 && id < model.vocab_size, Err::UnknownTokenId,
            "token id " + std::to_string(id));

  TextFeaturesT<T> tf;
  tf.key_mask.resize(kMaxTextLen);
  for (int i = 0; i < kMaxTextLen; ++i) tf.key_mask[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i)] != 0 ? 1 : 0;

  Var x = tape.embed_rows(tape.param(model.store, model.embed), ids);
  if (model.cfg.text_layers == 0) {
    tf.features = x;
    return tf;
  }

  // -1e9 on padded key columns keeps every softmax row finite while driving
  // padded weights to exact zero after the shift-exp.
  TensorT<T> bias({kMaxTextLen, kMaxTextLen});
  for (int i = 0; i < kMaxTextLen; ++i)
    for (int j = 0; j < kMaxTextLen; ++j)
      bias.at2(i, j) = tf.key_mask[static_cast<std::size_t>(j)] ? T(0) : T(-1e9);
  Var mask_bias = tape.constant(std::move(bias));
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(model.cfg.text_dim)));

  for (const auto& tl : model.text_layers) {
    Var q = run_linear(tape, model.store, tl.wq, tl.bq, x);
    Var k = run_linear(tape, model.store, tl.wk, tl.bk, x);
    Var v = run_linear(tape, model.store, tl.wv, tl.bv, x);
    Var scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_d);
    Var weights = tape.softmax_rows(tape.add(scores, mask_bias));
    Var ctx = run_linear(tape, model.store, tl.wo, tl.bo, tape.matmul(weights, v));
    x = tape.add(x, ctx);
    Var h = tape.relu(run_linear(tape, model.store, tl.ff1w, tl.ff1b, x));
    x = tape.add(x, run_linear(tape, model.store, tl.ff2w, tl.ff2b, h));
  }
  tf.features = x;
  return tf;
}

template <typename T>
std::pair<std::array<Var, 3>, Var> decode_fpn(TapeT<T>& tape, const SegModelT<T>& model,
                                              const std::array<Var, 3>& fused_stages) {
  std::array<Var, 3> lat;
  for (int i = 0; i < 3; ++i)
    lat[static_cast<std::size_t>(i)] =
        run_conv(tape, model.store, model.decoder.lateral[static_cast<std::size_t>(i)],
                 fused_stages[static_cast<std::size_t>(i)]);

  std::array<Var, 3> p;
  p[2] = lat[2];
  p[1] = tape.add(lat[1], match_up(tape, p[2], tape.shape(lat[1])));
  p[0] = tape.add(lat[0], match_up(tape, p[1], tape.shape(lat[0])));

  std::array<Var, 3> d_levels;
  for (int i = 0; i < 3; ++i)
    d_levels[static_cast<std::size_t>(i)] =
        run_conv(tape, model.store, model.decoder.smooth[static_cast<std::size_t>(i)],
                 p[static_cast<std::size_t>(i)]);

  Var h = p[0];
  for (int i = 0; i < 3; ++i) {
    h = tape.upsample_nearest2x(h);
    h = tape.relu(run_conv(tape, model.store, model.decoder.head[static_cast<std::size_t>(i)], h));
  }
  Var logits = run_conv(tape, model.store, model.decoder.out, h);
  return {d_levels, logits};
}

template <typename T>
ModelOutputsT<T> model_forward(TapeT<T>& tape, const SegModelT<T>& model, Var image,
                               const std::vector<int>& token_ids) {
  VisualFeaturesT<T> vf = visual_encode(tape, model, image);
  TextFeaturesT<T> tf = text_encode(tape, model, token_ids);

  FusionOptions fopt;
  fopt.softmax_norm = model.softmax_norm;

  ModelOutputsT<T> out;
  std::array<Var, 3> fused;
  for (int i = 0; i < 3; ++i) {
    const auto& fp = model.fusion[static_cast<std::size_t>(i)];
    FusionStateT<T> st = fuse_stage(tape, model.store, fp, vf.stages[static_cast<std::size_t>(i + 2)],
                                    tf.features, tf.key_mask, fopt);
    out.a_stages[static_cast<std::size_t>(i)] = st.a;
    fused[static_cast<std::size_t>(i)] = st.v_fused;
  }
  auto [d_levels, logits] = decode_fpn(tape, model, fused);
  out.d_levels = d_levels;
  out.logits = logits;
  return out;
}

template <typename T>
Var seg_loss(TapeT<T>& tape, Var logits, Var target) {
  return tape.bce_with_logits_mean(logits, target);
}

#define CMKD_INSTANTIATE_SEGMENTER(T)                                                       \
  template SegModelT<T> build_model<T>(const EncoderConfig&, int, bool);                    \
  template void init_params<T>(SegModelT<T>&, std::uint64_t);                              \
  template VisualFeaturesT<T> visual_encode<T>(TapeT<T>&, const SegModelT<T>&, Var);        \
  template TextFeaturesT<T> text_encode<T>(TapeT<T>&, const SegModelT<T>&,                  \
                                           const std::vector<int>&);                       \
  template std::pair<std::array<Var, 3>, Var> decode_fpn<T>(TapeT<T>&, const SegModelT<T>&, \
                                                            const std::array<Var, 3>&);    \
  template ModelOutputsT<T> model_forward<T>(TapeT<T>&, const SegModelT<T>&, Var,           \
                                             const std::vector<int>&);                     \
  template Var seg_loss<T>(TapeT<T>&, Var, Var);

CMKD_INSTANTIATE_SEGMENTER(float)
CMKD_INSTANTIATE_SEGMENTER(double)

} // namespace cmkd
