#include "cmkd/tape.hpp"

#include <algorithm>
#include <cmath>

namespace cmkd {

// ---------------------------------------------------------------------------
// ParamStore / GradTable

template <typename T>
int ParamStoreT<T>::add(const std::string& name, std::vector<int> shape) {
  require(find(name) < 0, Err::DuplicateKey, "duplicate parameter name: " + name);
  ParameterT<T> p;
  p.name = name;
  p.value = TensorT<T>(shape);
  p.grad = TensorT<T>(std::move(shape));
  items.push_back(std::move(p));
  return static_cast<int>(items.size()) - 1;
}

template <typename T>
int ParamStoreT<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].name == name) return static_cast<int>(i);
  return -1;
}

template <typename T>
void ParamStoreT<T>::zero_grads() {
  for (auto& p : items) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
}

template <typename T>
long long ParamStoreT<T>::param_count() const {
  long long n = 0;
  for (const auto& p : items) n += p.value.numel();
  return n;
}

template <typename T>
TensorT<T>& GradTableT<T>::slot(int param_index) {
  auto& g = grads[static_cast<std::size_t>(param_index)];
  if (g.data.empty()) g = TensorT<T>(store->items[static_cast<std::size_t>(param_index)].value.shape);
  return g;
}

template <typename T>
void GradTableT<T>::add_into(ParamStoreT<T>& dst) const {
  require(dst.size() == static_cast<int>(grads.size()), Err::StateShapeMismatch,
          "grad table does not match parameter store");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& g = grads[i];
    if (g.data.empty()) continue; // parameter unreachable from the loss
    auto& acc = dst.items[i].grad.data;
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g.data[k];
  }
}

template <typename T>
void GradTableT<T>::clear() {
  for (auto& g : grads) g = TensorT<T>();
}

// ---------------------------------------------------------------------------
// Tape basics

template <typename T>
Var TapeT<T>::push(TensorT<T> value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
TensorT<T>& TapeT<T>::grad_buf(Var v) {
  Node& n = node(v);
  if (n.grad.data.empty()) n.grad = TensorT<T>(n.value.shape);
  return n.grad;
}

template <typename T>
const TensorT<T>& TapeT<T>::value(Var v) const {
  require(v.valid() && v.id < static_cast<int>(nodes_.size()), Err::InvalidValue, "bad tape handle");
  return node(v).value;
}

template <typename T>
T TapeT<T>::scalar(Var v) const {
  const auto& t = value(v);
  require(t.numel() == 1, Err::NonScalarLoss, "expected scalar value");
  return t.data[0];
}

template <typename T>
const std::vector<int>& TapeT<T>::shape(Var v) const {
  return value(v).shape;
}

template <typename T>
Var TapeT<T>::constant(TensorT<T> v) {
  return push(std::move(v), false);
}

template <typename T>
Var TapeT<T>::param(const ParamStoreT<T>& store, int index) {
  require(index >= 0 && index < store.size(), Err::InvalidValue, "parameter index out of range");
  bool track = table_ != nullptr;
  if (track)
    require(table_->store == &store, Err::StateShapeMismatch,
            "tape grad table bound to a different parameter store");
  Var v = push(store[index].value, track);
  node(v).param_index = track ? index : -1;
  return v;
}

template <typename T>
void TapeT<T>::backward(Var loss) {
  require(value(loss).numel() == 1, Err::NonScalarLoss, "backward requires a scalar loss");
  grad_buf(loss).data[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.data.empty()) continue;
    if (n.back) n.back(*this);
    if (n.param_index >= 0 && table_ != nullptr) {
      auto& sink = table_->slot(n.param_index).data;
      for (std::size_t k = 0; k < sink.size(); ++k) sink[k] += n.grad.data[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives

template <typename T>
Var TapeT<T>::matmul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.rank() == 2 && bv.rank() == 2, Err::RankError, "matmul requires rank-2 operands");
  require(av.dim(1) == bv.dim(0), Err::ShapeMismatch,
          "matmul inner dims " + shape_str(av) + " x " + shape_str(bv));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  TensorT<T> out({m, n});
  {
    const T* A = av.data.data();
    const T* B = bv.data.data();
    T* C = out.data.data();
    for (int i = 0; i < m; ++i) {
      T* ci = C + static_cast<std::size_t>(i) * n;
      const T* ai = A + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const T aip = ai[p];
        const T* bp = B + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }
  bool ng = wants(a) || wants(b);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, b, out_v, m, k, n](TapeT& t) {
      const T* G = t.node(out_v).grad.data.data();
      const T* A = t.value(a).data.data();
      const T* B = t.value(b).data.data();
      if (t.wants(a)) {
        T* dA = t.grad_buf(a).data.data();
        for (int i = 0; i < m; ++i) {
          const T* gi = G + static_cast<std::size_t>(i) * n;
          T* dai = dA + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const T* bp = B + static_cast<std::size_t>(p) * n;
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += gi[j] * bp[j];
            dai[p] += acc;
          }
        }
      }
      if (t.wants(b)) {
        T* dB = t.grad_buf(b).data.data();
        for (int i = 0; i < m; ++i) {
          const T* gi = G + static_cast<std::size_t>(i) * n;
          const T* ai = A + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const T aip = ai[p];
            T* dbp = dB + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbp[j] += aip * gi[j];
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::transpose(Var a) {
  const auto& av = value(a);
  require(av.rank() == 2, Err::RankError, "transpose requires rank-2 input");
  const int m = av.dim(0), n = av.dim(1);
  TensorT<T> out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v, m, n](TapeT& t) {
      const auto& g = t.node(out_v).grad;
      auto& da = t.grad_buf(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) da.at2(i, j) += g.at2(j, i);
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::reshape(Var a, std::vector<int> new_shape) {
  const auto& av = value(a);
  long long n = TensorT<T>::checked_numel(new_shape);
  require(n == av.numel(), Err::ElementCountMismatch,
          "reshape " + shape_str(av) + " to incompatible element count");
  TensorT<T> out;
  out.shape = std::move(new_shape);
  out.data = av.data; // row-major buffer unchanged
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      auto& da = t.grad_buf(a).data;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::add(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.same_shape(bv), Err::ShapeMismatch,
          "add shapes " + shape_str(av) + " vs " + shape_str(bv));
  TensorT<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  bool ng = wants(a) || wants(b);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, b, out_v](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      if (t.wants(a)) {
        auto& da = t.grad_buf(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (t.wants(b)) {
        auto& db = t.grad_buf(b).data;
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::mul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.same_shape(bv), Err::ShapeMismatch,
          "mul shapes " + shape_str(av) + " vs " + shape_str(bv));
  TensorT<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
  bool ng = wants(a) || wants(b);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, b, out_v](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      const auto& avd = t.value(a).data;
      const auto& bvd = t.value(b).data;
      if (t.wants(a)) {
        auto& da = t.grad_buf(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bvd[i];
      }
      if (t.wants(b)) {
        auto& db = t.grad_buf(b).data;
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * avd[i];
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::relu(Var a) {
  const auto& av = value(a);
  TensorT<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] > T(0) ? av.data[i] : T(0);
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      const auto& x = t.value(a).data;
      auto& da = t.grad_buf(a).data;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) da[i] += g[i];
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::sigmoid(Var a) {
  const auto& av = value(a);
  TensorT<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const T x = av.data[i];
    if (x >= T(0)) {
      out.data[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out.data[i] = e / (T(1) + e);
    }
  }
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      const auto& s = t.node(out_v).value.data;
      auto& da = t.grad_buf(a).data;
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s[i] * (T(1) - s[i]);
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::scale(Var a, T factor) {
  const auto& av = value(a);
  TensorT<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * factor;
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v, factor](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      auto& da = t.grad_buf(a).data;
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::add_row_bias(Var x, Var bias) {
  const auto& xv = value(x);
  const auto& bv = value(bias);
  require(xv.rank() == 2 && bv.rank() == 1, Err::RankError, "add_row_bias expects MxN and N");
  require(xv.dim(1) == bv.dim(0), Err::ShapeMismatch,
          "row bias length " + shape_str(bv) + " vs " + shape_str(xv));
  const int m = xv.dim(0), n = xv.dim(1);
  TensorT<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data[static_cast<std::size_t>(i) * n + j] = xv.data[static_cast<std::size_t>(i) * n + j] + bv.data[static_cast<std::size_t>(j)];
  bool ng = wants(x) || wants(bias);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [x, bias, out_v, m, n](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      if (t.wants(x)) {
        auto& dx = t.grad_buf(x).data;
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (t.wants(bias)) {
        auto& db = t.grad_buf(bias).data;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::add_channel_bias(Var x, Var bias) {
  const auto& xv = value(x);
  const auto& bv = value(bias);
  require(xv.rank() == 3 && bv.rank() == 1, Err::RankError, "add_channel_bias expects HxWxC and C");
  require(xv.dim(2) == bv.dim(0), Err::ShapeMismatch,
          "channel bias length " + shape_str(bv) + " vs " + shape_str(xv));
  const int hw = xv.dim(0) * xv.dim(1), c = xv.dim(2);
  TensorT<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  for (int p = 0; p < hw; ++p)
    for (int j = 0; j < c; ++j)
      out.data[static_cast<std::size_t>(p) * c + j] = xv.data[static_cast<std::size_t>(p) * c + j] + bv.data[static_cast<std::size_t>(j)];
  bool ng = wants(x) || wants(bias);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [x, bias, out_v, hw, c](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      if (t.wants(x)) {
        auto& dx = t.grad_buf(x).data;
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (t.wants(bias)) {
        auto& db = t.grad_buf(bias).data;
        for (int p = 0; p < hw; ++p)
          for (int j = 0; j < c; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(p) * c + j];
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::channel_scale_shift(Var x, Var gamma, Var beta) {
  const auto& xv = value(x);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  require(xv.rank() == 3 && gv.rank() == 1 && bv.rank() == 1, Err::RankError,
          "channel_scale_shift expects HxWxC, C, C");
  require(xv.dim(2) == gv.dim(0) && xv.dim(2) == bv.dim(0), Err::ShapeMismatch,
          "scale/shift length vs " + shape_str(xv));
  const int hw = xv.dim(0) * xv.dim(1), c = xv.dim(2);
  TensorT<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  for (int p = 0; p < hw; ++p)
    for (int j = 0; j < c; ++j)
      out.data[static_cast<std::size_t>(p) * c + j] =
          xv.data[static_cast<std::size_t>(p) * c + j] * gv.data[static_cast<std::size_t>(j)] + bv.data[static_cast<std::size_t>(j)];
  bool ng = wants(x) || wants(gamma) || wants(beta);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [x, gamma, beta, out_v, hw, c](TapeT& t) {
      const auto& g = t.node(out_v).grad.data;
      const auto& xd = t.value(x).data;
      const auto& gd = t.value(gamma).data;
      if (t.wants(x)) {
        auto& dx = t.grad_buf(x).data;
        for (int p = 0; p < hw; ++p)
          for (int j = 0; j < c; ++j)
            dx[static_cast<std::size_t>(p) * c + j] += g[static_cast<std::size_t>(p) * c + j] * gd[static_cast<std::size_t>(j)];
      }
      if (t.wants(gamma)) {
        auto& dg = t.grad_buf(gamma).data;
        for (int p = 0; p < hw; ++p)
          for (int j = 0; j < c; ++j)
            dg[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(p) * c + j] * xd[static_cast<std::size_t>(p) * c + j];
      }
      if (t.wants(beta)) {
        auto& db = t.grad_buf(beta).data;
        for (int p = 0; p < hw; ++p)
          for (int j = 0; j < c; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(p) * c + j];
      }
    });
  }
  return out_v;
}

namespace {

// TF-style SAME padding: output extent ceil(in/stride).
inline int same_out(int in, int stride) { return (in + stride - 1) / stride; }
inline int same_pad_begin(int in, int stride, int k) {
  int out = same_out(in, stride);
  int total = std::max((out - 1) * stride + k - in, 0);
  return total / 2;
}

} // namespace

template <typename T>
Var TapeT<T>::conv2d(Var x, Var w, int stride) {
  const auto& xv = value(x);
  const auto& wv = value(w);
  require(xv.rank() == 3 && wv.rank() == 4, Err::RankError, "conv2d expects HxWxCin and KhxKwxCinxCout");
  const int h = xv.dim(0), wd = xv.dim(1), cin = xv.dim(2);
  const int kh = wv.dim(0), kw = wv.dim(1), cout = wv.dim(3);
  require(kh == kw && (kh == 1 || kh == 3), Err::ShapeMismatch, "conv2d kernel must be 1x1 or 3x3");
  require(stride == 1 || stride == 2, Err::ShapeMismatch, "conv2d stride must be 1 or 2");
  require(wv.dim(2) == cin, Err::ShapeMismatch,
          "conv2d Cin mismatch: " + shape_str(xv) + " vs " + shape_str(wv));
  const int oh = same_out(h, stride), ow = same_out(wd, stride);
  const int ph = same_pad_begin(h, stride, kh), pw = same_pad_begin(wd, stride, kw);

  TensorT<T> out({oh, ow, cout});
  {
    const T* X = xv.data.data();
    const T* W = wv.data.data();
    T* O = out.data.data();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T* orow = O + (static_cast<std::size_t>(oy) * ow + ox) * cout;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - ph + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pw + kx;
            if (ix < 0 || ix >= wd) continue;
            const T* xrow = X + (static_cast<std::size_t>(iy) * wd + ix) * cin;
            const T* wrow = W + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              const T xv_ = xrow[ci];
              const T* wc = wrow + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) orow[co] += xv_ * wc[co];
            }
          }
        }
      }
    }
  }
  bool ng = wants(x) || wants(w);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [x, w, out_v, h, wd, cin, kh, kw, cout, stride, ph, pw, oh, ow](TapeT& t) {
      const T* G = t.node(out_v).grad.data.data();
      const T* X = t.value(x).data.data();
      const T* W = t.value(w).data.data();
      const bool want_x = t.wants(x);
      const bool want_w = t.wants(w);
      T* dX = want_x ? t.grad_buf(x).data.data() : nullptr;
      T* dW = want_w ? t.grad_buf(w).data.data() : nullptr;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T* grow = G + (static_cast<std::size_t>(oy) * ow + ox) * cout;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - ph + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pw + kx;
              if (ix < 0 || ix >= wd) continue;
              const T* xrow = X + (static_cast<std::size_t>(iy) * wd + ix) * cin;
              const std::size_t wbase = (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
              if (want_w) {
                T* dwrow = dW + wbase;
                for (int ci = 0; ci < cin; ++ci) {
                  const T xv_ = xrow[ci];
                  T* dwc = dwrow + static_cast<std::size_t>(ci) * cout;
                  for (int co = 0; co < cout; ++co) dwc[co] += xv_ * grow[co];
                }
              }
              if (want_x) {
                T* dxrow = dX + (static_cast<std::size_t>(iy) * wd + ix) * cin;
                const T* wrow = W + wbase;
                for (int ci = 0; ci < cin; ++ci) {
                  const T* wc = wrow + static_cast<std::size_t>(ci) * cout;
                  T acc = 0;
                  for (int co = 0; co < cout; ++co) acc += wc[co] * grow[co];
                  dxrow[ci] += acc;
                }
              }
            }
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::upsample_nearest2x(Var x) {
  const auto& xv = value(x);
  require(xv.rank() == 3, Err::RankError, "upsample_nearest2x expects HxWxC");
  const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  TensorT<T> out({2 * h, 2 * w, c});
  for (int i = 0; i < 2 * h; ++i)
    for (int j = 0; j < 2 * w; ++j) {
      const T* src = xv.data.data() + (static_cast<std::size_t>(i / 2) * w + j / 2) * c;
      T* dst = out.data.data() + (static_cast<std::size_t>(i) * 2 * w + j) * c;
      for (int k = 0; k < c; ++k) dst[k] = src[k];
    }
  bool ng = wants(x);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [x, out_v, h, w, c](TapeT& t) {
      const auto& g = t.node(out_v).grad;
      auto& dx = t.grad_buf(x);
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) {
          const T* src = g.data.data() + (static_cast<std::size_t>(i) * 2 * w + j) * c;
          T* dst = dx.data.data() + (static_cast<std::size_t>(i / 2) * w + j / 2) * c;
          for (int k = 0; k < c; ++k) dst[k] += src[k];
        }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::softmax_rows(Var a) {
  const auto& av = value(a);
  require(av.rank() == 2, Err::RankError, "softmax_rows expects rank-2 input");
  const int m = av.dim(0), n = av.dim(1);
  TensorT<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = av.data.data() + static_cast<std::size_t>(i) * n;
    T* orow = out.data.data() + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) orow[j] *= inv;
  }
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v, m, n](TapeT& t) {
      const auto& g = t.node(out_v).grad;
      const auto& y = t.node(out_v).value;
      auto& da = t.grad_buf(a);
      for (int i = 0; i < m; ++i) {
        const T* gi = g.data.data() + static_cast<std::size_t>(i) * n;
        const T* yi = y.data.data() + static_cast<std::size_t>(i) * n;
        T* di = da.data.data() + static_cast<std::size_t>(i) * n;
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += gi[j] * yi[j];
        for (int j = 0; j < n; ++j) di[j] += yi[j] * (gi[j] - dot);
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::mse_mean(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.same_shape(bv), Err::ShapeMismatch,
          "mse_mean shapes " + shape_str(av) + " vs " + shape_str(bv));
  const std::size_t n = av.data.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(av.data[i]) - static_cast<double>(bv.data[i]);
    acc += d * d;
  }
  const T val = static_cast<T>(acc / static_cast<double>(n));
  require(std::isfinite(static_cast<double>(val)), Err::NonFinite, "mse_mean is not finite");
  bool ng = wants(a) || wants(b);
  Var out_v = push(TensorT<T>::scalar(val), ng);
  if (ng) {
    set_back(out_v, [a, b, out_v, n](TapeT& t) {
      const T g = t.node(out_v).grad.data[0];
      const auto& ad = t.value(a).data;
      const auto& bd = t.value(b).data;
      const T c = g * T(2) / static_cast<T>(n);
      if (t.wants(a)) {
        auto& da = t.grad_buf(a).data;
        for (std::size_t i = 0; i < n; ++i) da[i] += c * (ad[i] - bd[i]);
      }
      if (t.wants(b)) {
        auto& db = t.grad_buf(b).data;
        for (std::size_t i = 0; i < n; ++i) db[i] -= c * (ad[i] - bd[i]);
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::bce_with_logits_mean(Var logits, Var targets) {
  const auto& xv = value(logits);
  const auto& yv = value(targets);
  require(xv.same_shape(yv), Err::ShapeMismatch,
          "bce shapes " + shape_str(xv) + " vs " + shape_str(yv));
  const std::size_t n = xv.data.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(xv.data[i]);
    const double y = static_cast<double>(yv.data[i]);
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  const T val = static_cast<T>(acc / static_cast<double>(n));
  require(std::isfinite(static_cast<double>(val)), Err::NonFinite, "bce loss is not finite");
  bool ng = wants(logits) || wants(targets);
  Var out_v = push(TensorT<T>::scalar(val), ng);
  if (ng) {
    set_back(out_v, [logits, targets, out_v, n](TapeT& t) {
      const T g = t.node(out_v).grad.data[0];
      const auto& xd = t.value(logits).data;
      const auto& yd = t.value(targets).data;
      const T c = g / static_cast<T>(n);
      if (t.wants(logits)) {
        auto& dx = t.grad_buf(logits).data;
        for (std::size_t i = 0; i < n; ++i) {
          const T x = xd[i];
          T s;
          if (x >= T(0)) {
            s = T(1) / (T(1) + std::exp(-x));
          } else {
            const T e = std::exp(x);
            s = e / (T(1) + e);
          }
          dx[i] += c * (s - yd[i]);
        }
      }
      require(!t.wants(targets), Err::InvalidValue, "bce targets must be constant");
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::embed_rows(Var table, const std::vector<int>& ids) {
  const auto& tv = value(table);
  require(tv.rank() == 2, Err::RankError, "embed_rows expects a VxD table");
  const int v = tv.dim(0), d = tv.dim(1);
  require(!ids.empty(), Err::ShapeMismatch, "embed_rows requires at least one id");
  for (int id : ids)
    require(id >= 0 && id < v, Err::UnknownTokenId, "token id " + std::to_string(id) + " out of range");
  const int l = static_cast<int>(ids.size());
  TensorT<T> out({l, d});
  for (int i = 0; i < l; ++i) {
    const T* src = tv.data.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d;
    T* dst = out.data.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  bool ng = wants(table);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [table, out_v, ids, d, l](TapeT& t) {
      const auto& g = t.node(out_v).grad;
      auto& dt = t.grad_buf(table);
      for (int i = 0; i < l; ++i) {
        const T* src = g.data.data() + static_cast<std::size_t>(i) * d;
        T* dst = dt.data.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::sum_all(Var a) {
  const auto& av = value(a);
  double acc = 0;
  for (T x : av.data) acc += static_cast<double>(x);
  const T val = static_cast<T>(acc);
  require(std::isfinite(static_cast<double>(val)), Err::NonFinite, "sum is not finite");
  bool ng = wants(a);
  Var out_v = push(TensorT<T>::scalar(val), ng);
  if (ng) {
    set_back(out_v, [a, out_v](TapeT& t) {
      const T g = t.node(out_v).grad.data[0];
      auto& da = t.grad_buf(a).data;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
    });
  }
  return out_v;
}

template <typename T>
Var TapeT<T>::normalize_cols(Var a) {
  const auto& av = value(a);
  require(av.rank() == 2, Err::RankError, "normalize_cols expects rank-2 input");
  const int m = av.dim(0), n = av.dim(1);
  const T eps = static_cast<T>(1e-12);
  TensorT<T> out({m, n});
  std::vector<T> inv_norm(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    double s = 0;
    for (int i = 0; i < m; ++i) {
      const double x = static_cast<double>(av.at2(i, j));
      s += x * x;
    }
    inv_norm[static_cast<std::size_t>(j)] = T(1) / std::sqrt(static_cast<T>(s) + eps);
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at2(i, j) = av.at2(i, j) * inv_norm[static_cast<std::size_t>(j)];
  bool ng = wants(a);
  Var out_v = push(std::move(out), ng);
  if (ng) {
    set_back(out_v, [a, out_v, m, n, inv_norm](TapeT& t) {
      const auto& g = t.node(out_v).grad;
      const auto& y = t.node(out_v).value;
      auto& da = t.grad_buf(a);
      for (int j = 0; j < n; ++j) {
        T dot = 0;
        for (int i = 0; i < m; ++i) dot += g.at2(i, j) * y.at2(i, j);
        for (int i = 0; i < m; ++i)
          da.at2(i, j) += (g.at2(i, j) - y.at2(i, j) * dot) * inv_norm[static_cast<std::size_t>(j)];
      }
    });
  }
  return out_v;
}

template struct ParamStoreT<float>;
template struct ParamStoreT<double>;
template struct GradTableT<float>;
template struct GradTableT<double>;
template class TapeT<float>;
template class TapeT<double>;

} // namespace cmkd
