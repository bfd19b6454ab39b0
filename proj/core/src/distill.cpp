#include "cmkd/distill.hpp"

namespace cmkd {

template <typename T>
Var channel_gram(TapeT<T>& tape, Var d_level, bool normalize) {
  const auto& s = tape.shape(d_level);
  require(s.size() == 3, Err::RankError, "channel_gram expects an HxWxC feature map");
  Var x = tape.reshape(d_level, {s[0] * s[1], s[2]});
  if (normalize) x = tape.normalize_cols(x);
  return tape.matmul(tape.transpose(x), x);
}

template <typename T>
Var vl_relation_loss(TapeT<T>& tape, Var a_s, Var a_t, const std::vector<std::uint8_t>& key_mask,
                     bool count_padded) {
  const auto& ss = tape.shape(a_s);
  const auto& ts = tape.shape(a_t);
  require(ss == ts, Err::ShapeMismatch, "correlation matrices differ in shape");
  require(static_cast<int>(key_mask.size()) == ss[1], Err::ShapeMismatch,
          "key mask length does not match correlation columns");
  int real = 0;
  for (auto m : key_mask) real += m ? 1 : 0;
  require(real > 0, Err::EmptyMask, "no real tokens in the key mask");

  Var base = tape.mse_mean(a_s, a_t); // 1/(HW*L) over all entries
  if (count_padded || real == static_cast<int>(key_mask.size())) return base;
  // Padded columns are identically zero in both matrices, so rescaling the
  // full-matrix mean recovers the real-token denominator exactly.
  return tape.scale(base, static_cast<T>(static_cast<double>(key_mask.size()) / real));
}

template <typename T>
Var channel_relation_loss(TapeT<T>& tape, Var ac_t, Var ac_s) {
  const auto& ts = tape.shape(ac_t);
  const auto& ss = tape.shape(ac_s);
  require(ts.size() == 2 && ts[0] == ts[1], Err::ShapeMismatch, "Gram matrices must be square");
  require(ts == ss, Err::ShapeMismatch,
          "Gram sizes differ; teacher and student decoder widths are misconfigured");
  return tape.mse_mean(ac_t, ac_s);
}

template <typename T>
TeacherSignalsT<T> extract_teacher_signals(TapeT<T>& teacher_tape, const ModelOutputsT<T>& out,
                                           bool gram_normalize) {
  TeacherSignalsT<T> sig;
  for (int i = 0; i < 3; ++i) {
    sig.a_stages[static_cast<std::size_t>(i)] =
        teacher_tape.value(out.a_stages[static_cast<std::size_t>(i)]);
    Var g = channel_gram(teacher_tape, out.d_levels[static_cast<std::size_t>(i)], gram_normalize);
    sig.grams[static_cast<std::size_t>(i)] = teacher_tape.value(g);
  }
  return sig;
}

template <typename T>
LossGraphT<T> total_loss(TapeT<T>& tape, const ModelOutputsT<T>& student,
                         const TeacherSignalsT<T>& teacher,
                         const std::vector<std::uint8_t>& key_mask, const TensorT<T>& gt_mask,
                         const DistillOptions& opt) {
  require(opt.lambda1 >= 0 && opt.lambda2 >= 0, Err::InvalidValue,
          "balancing weights must be non-negative");

  Var l_seg = seg_loss(tape, student.logits, tape.constant(gt_mask));

  Var l_vl, l_c;
  for (int i = 0; i < 3; ++i) {
    Var a_t = tape.constant(teacher.a_stages[static_cast<std::size_t>(i)]);
    Var term = vl_relation_loss(tape, student.a_stages[static_cast<std::size_t>(i)], a_t, key_mask,
                                opt.count_padded);
    l_vl = i == 0 ? term : tape.add(l_vl, term);

    Var ac_s = channel_gram(tape, student.d_levels[static_cast<std::size_t>(i)], opt.gram_normalize);
    Var ac_t = tape.constant(teacher.grams[static_cast<std::size_t>(i)]);
    Var cterm = channel_relation_loss(tape, ac_t, ac_s);
    l_c = i == 0 ? cterm : tape.add(l_c, cterm);
  }
  l_vl = tape.scale(l_vl, static_cast<T>(1.0 / 3.0));
  l_c = tape.scale(l_c, static_cast<T>(1.0 / 3.0));

  Var loss = tape.add(l_seg, tape.add(tape.scale(l_vl, static_cast<T>(opt.lambda1)),
                                      tape.scale(l_c, static_cast<T>(opt.lambda2))));

  LossGraphT<T> g;
  g.loss = loss;
  g.bundle.l_seg = static_cast<double>(tape.scalar(l_seg));
  g.bundle.l_vl = static_cast<double>(tape.scalar(l_vl));
  g.bundle.l_c = static_cast<double>(tape.scalar(l_c));
  g.bundle.lambda1 = opt.lambda1;
  g.bundle.lambda2 = opt.lambda2;
  g.bundle.total = g.bundle.l_seg + opt.lambda1 * g.bundle.l_vl + opt.lambda2 * g.bundle.l_c;
  return g;
}

#define CMKD_INSTANTIATE_DISTILL(T)                                                          \
  template Var channel_gram<T>(TapeT<T>&, Var, bool);                                        \
  template Var vl_relation_loss<T>(TapeT<T>&, Var, Var, const std::vector<std::uint8_t>&,    \
                                   bool);                                                    \
  template Var channel_relation_loss<T>(TapeT<T>&, Var, Var);                                \
  template TeacherSignalsT<T> extract_teacher_signals<T>(TapeT<T>&, const ModelOutputsT<T>&, \
                                                         bool);                              \
  template LossGraphT<T> total_loss<T>(TapeT<T>&, const ModelOutputsT<T>&,                   \
                                       const TeacherSignalsT<T>&,                            \
                                       const std::vector<std::uint8_t>&, const TensorT<T>&,  \
                                       const DistillOptions&);

CMKD_INSTANTIATE_DISTILL(float)
CMKD_INSTANTIATE_DISTILL(double)

} // namespace cmkd
