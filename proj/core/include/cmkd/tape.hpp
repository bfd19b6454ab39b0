#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cmkd/error.hpp"
#include "cmkd/tensor.hpp"

namespace cmkd {

template <typename T>
struct ParameterT {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad; // same shape, zero-initialized
};

template <typename T>
struct ParamStoreT {
  std::vector<ParameterT<T>> items;

  int add(const std::string& name, std::vector<int> shape);
  int find(std::string_view name) const; // -1 if absent
  void zero_grads();
  long long param_count() const; // total scalar elements

  ParameterT<T>& operator[](int i) { return items[static_cast<std::size_t>(i)]; }
  const ParameterT<T>& operator[](int i) const { return items[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(items.size()); }
};

// Gradient sink aligned with one ParamStore. Each training sample backwards
// into its own table; the batch loop then folds tables into Parameter.grad in
// sample order, which keeps results independent of worker-thread count.
template <typename T>
struct GradTableT {
  const ParamStoreT<T>* store = nullptr;
  std::vector<TensorT<T>> grads; // entry allocated on first touch

  GradTableT() = default;
  explicit GradTableT(const ParamStoreT<T>& s)
      : store(&s), grads(static_cast<std::size_t>(s.size())) {}

  TensorT<T>& slot(int param_index);
  void add_into(ParamStoreT<T>& dst) const; // dst.grad += this, elementwise
  void clear();
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over the fixed primitive set the pipeline needs.
// Values are immutable once produced; one backward pass visits each recorded
// node exactly once, in reverse recording order.
template <typename T>
class TapeT {
public:
  TapeT() = default;                                      // eval mode: no gradients
  explicit TapeT(GradTableT<T>* table) : table_(table) {} // training mode

  // Leaves.
  Var constant(TensorT<T> v);
  Var param(const ParamStoreT<T>& store, int index);

  // Primitives. Each validates shapes and registers its backward rule.
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, std::vector<int> new_shape);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var scale(Var a, T factor);
  Var add_row_bias(Var x, Var bias);     // x: MxN, bias: N
  Var add_channel_bias(Var x, Var bias); // x: HxWxC, bias: C
  Var channel_scale_shift(Var x, Var gamma, Var beta);
  Var conv2d(Var x, Var w, int stride); // x: HxWxCin, w: KhxKwxCinxCout, SAME padding
  Var upsample_nearest2x(Var x);
  Var softmax_rows(Var a);
  Var mse_mean(Var a, Var b);
  Var bce_with_logits_mean(Var logits, Var targets);
  Var embed_rows(Var table, const std::vector<int>& ids);
  Var sum_all(Var a);
  Var normalize_cols(Var a); // L2-normalize each column

  void backward(Var loss); // accumulates into the bound GradTable

  const TensorT<T>& value(Var v) const;
  T scalar(Var v) const;
  const std::vector<int>& shape(Var v) const;
  bool training() const { return table_ != nullptr; }
  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad; // allocated lazily during backward
    std::function<void(TapeT&)> back;
    bool needs_grad = false;
    int param_index = -1; // >= 0 for parameter leaves
  };

  GradTableT<T>* table_ = nullptr;
  std::vector<Node> nodes_;

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
  TensorT<T>& grad_buf(Var v); // allocate (zeros) on first touch
  bool wants(Var v) const { return node(v).needs_grad; }
  Var push(TensorT<T> value, bool needs_grad);
  void set_back(Var v, std::function<void(TapeT&)> fn) { node(v).back = std::move(fn); }

  friend struct TapeTestPeer;
};

using Tape32 = TapeT<float>;
using Tape64 = TapeT<double>;

} // namespace cmkd
