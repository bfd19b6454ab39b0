#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cmkd/segmenter.hpp"
#include "cmkd/tape.hpp"

namespace cmkd {

// Teacher-side quantities entering the student loss. Plain tensors: they are
// extracted from an evaluation forward and re-enter the student tape as
// constants, so no gradient can reach the teacher.
template <typename T>
struct TeacherSignalsT {
  std::array<TensorT<T>, 3> a_stages; // masked correlation matrices
  std::array<TensorT<T>, 3> grams;    // channel Grams of the decoder levels
};

struct DistillOptions {
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  bool gram_normalize = false; // L2-normalize channel columns before the Gram
  bool count_padded = false;   // paper-literal 1/(HW*L) normalization
};

struct LossBundle {
  double l_seg = 0, l_vl = 0, l_c = 0;
  double lambda1 = 0, lambda2 = 0;
  double total = 0; // l_seg + lambda1*l_vl + lambda2*l_c
};

template <typename T>
struct LossGraphT {
  LossBundle bundle;
  Var loss; // scalar node for backward
};

// Inter-channel correlation of one decoder map: reshape to HWxC, then X^T X.
template <typename T>
Var channel_gram(TapeT<T>& tape, Var d_level, bool normalize = false);

// Mean squared difference between correlation matrices over real-token
// columns; padded columns are excluded from the denominator unless
// count_padded is set.
template <typename T>
Var vl_relation_loss(TapeT<T>& tape, Var a_s, Var a_t, const std::vector<std::uint8_t>& key_mask,
                     bool count_padded = false);

template <typename T>
Var channel_relation_loss(TapeT<T>& tape, Var ac_t, Var ac_s);

template <typename T>
TeacherSignalsT<T> extract_teacher_signals(TapeT<T>& teacher_tape, const ModelOutputsT<T>& out,
                                           bool gram_normalize = false);

// The combined objective: segmentation CE plus the two relational terms, each
// averaged over its three stages/levels.
template <typename T>
LossGraphT<T> total_loss(TapeT<T>& tape, const ModelOutputsT<T>& student,
                         const TeacherSignalsT<T>& teacher,
                         const std::vector<std::uint8_t>& key_mask, const TensorT<T>& gt_mask,
                         const DistillOptions& opt);

} // namespace cmkd
