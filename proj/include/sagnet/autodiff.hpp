#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape records every primitive applied during one forward pass; Var is a
// handle (tape, node id) to a recorded value. Nodes are appended in evaluation
// order, so walking the tape backwards visits them in reverse topological order.
//
// Primitive table (dims rules):
//   matmul            [m,k] x [k,n] -> [m,n]
//   add_bias          [m,n] + [n] -> [m,n]
//   row_scale         [m,n] * [m,1] -> [m,n]
//   conv3d            [N,C,D,D,D], w [O,C,K,K,K], b [O] -> [N,O,D',D',D'],  D' = (D + 2p - K) / s + 1
//   conv_transpose3d  [N,C,D,D,D], w [C,O,K,K,K], b [O] -> [N,O,D',D',D'], D' = (D - 1) s - 2p + K
//   add, sub, mul     equal dims
//   sigmoid, tanh, exp, log, square, scale, add_scalar   elementwise
//   concat            equal leading dims, joined along the last axis
//   sum, mean         any -> scalar
//   reshape           same element count
//   bce_logits_rows   [m,n] logits, [m,n] targets -> [m,1] per-row mean binary cross-entropy
//   softmax_xent      [m,c] logits, m labels -> scalar mean cross-entropy

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sagnet/common.hpp"

namespace sagnet::ad {

using Dims = std::vector<std::size_t>;

inline std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

/// Cache-line aligned allocator. Eigen's vectorized kernels peel scalar heads by
/// address, so sums only repeat bit for bit if every buffer starts equally aligned.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, T fill = T(0)) : dims_(std::move(dims)), data_(element_count(dims_), fill) {}
  Tensor(Dims dims, const std::vector<T>& data) : Tensor(std::move(dims), Buffer<T>(data.begin(), data.end())) {}
  Tensor(Dims dims, Buffer<T>&& data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != element_count(dims_))
      throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for dims " + dims_string(dims_));
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Buffer<T>& vec() noexcept { return data_; }
  const Buffer<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Dims dims) {
    if (element_count(dims) != data_.size()) throw ShapeError("reshape: element count mismatch");
    dims_ = std::move(dims);
  }
  bool all_finite() const {
    return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(data_.data(), static_cast<Eigen::Index>(data_.size())).allFinite();
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(dims_, Buffer<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Dims dims_;
  Buffer<T> data_;
};

/// A learnable tensor and its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() {
    if (grad.dims() != value.dims()) grad = Tensor<T>(value.dims());
    else grad.fill(T(0));
  }
};

enum class OpKind {
  kConstant,
  kParameter,
  kMatmul,
  kAddBias,
  kRowScale,
  kConv3d,
  kConvTranspose3d,
  kSigmoid,
  kTanh,
  kExp,
  kLog,
  kSquare,
  kScale,
  kAddScalar,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kSum,
  kMean,
  kReshape,
  kBceLogitsRows,
  kSoftmaxXent,
  kCustom,
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Dims& dims() const { return value().dims(); }
  std::size_t size() const { return value().size(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.value;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  Var<T> constant(Tensor<T> value) {
    check_finite(value, "constant");
    nodes_.push_back(Node{OpKind::kConstant, std::move(value), nullptr, nullptr, false, {}, {}});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter; repeated uses share one node so their gradients sum.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back(Node{OpKind::kParameter, {}, &p.value, &p, true, {}, {}});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Appends a primitive application. The backward rule receives d(loss)/d(output)
  /// and must accumulate into the gradients of `inputs` via grad().
  Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, Backward backward, const char* name) {
    check_finite(value, name);
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [this](std::size_t i) { return nodes_[i].needs_grad; });
    nodes_.push_back(Node{kind, std::move(value), nullptr, nullptr, needs, std::move(inputs),
                          needs ? std::move(backward) : Backward{}});
    return {this, nodes_.size() - 1};
  }

  /// Gradient buffer of a node during backward; zero-initialized on first access.
  /// Parameter leaves write straight into Parameter::grad, which is never cleared here.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    touched_.at(id) = 1;
    if (n.param != nullptr) {
      if (n.param->grad.dims() != n.param->value.dims()) n.param->grad = Tensor<T>(n.param->value.dims());
      return n.param->grad;
    }
    Tensor<T>& g = grads_[id];
    if (g.dims() != n.value.dims() || g.empty()) g = Tensor<T>(n.value.dims());
    return g;
  }

  /// Reverse pass from a scalar loss. Parameter gradients are added to Parameter::grad.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
    if (value(loss.id).size() != 1) throw ContractError("backward: loss must be a scalar, got dims " + dims_string(value(loss.id).dims()));
    if (backward_done_) throw ContractError("backward: tape already consumed");
    if (nodes_[loss.id].param != nullptr) throw ContractError("backward: loss must be computed, not a parameter");
    backward_done_ = true;
    grads_.assign(nodes_.size(), Tensor<T>());
    touched_.assign(nodes_.size(), 0);
    grad(loss.id)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || !touched_[id] || n.param != nullptr) continue;
      if (n.backward) n.backward(*this, grads_[id]);
    }
  }

  /// Gradient w.r.t. a non-parameter node after backward (zeros if it received none).
  /// Parameter gradients are read from Parameter::grad.
  Tensor<T> gradient_of(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.param != nullptr) return n.param->grad;
    if (!backward_done_ || grads_.at(v.id).empty()) return Tensor<T>(value(v.id).dims());
    return grads_[v.id];
  }

  static void check_finite(const Tensor<T>& t, const std::string& what) {
    if (!t.all_finite()) throw NumericFault("non-finite value produced by " + what);
  }

 private:
  struct Node {
    OpKind kind;
    Tensor<T> value;
    const Tensor<T>* external;
    Parameter<T>* param;
    bool needs_grad;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  std::deque<Node> nodes_;  // stable references across push_back
  std::vector<Tensor<T>> grads_;
  std::vector<char> touched_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

[[noreturn]] inline void dims_error(const char* op, const Dims& a, const Dims& b) {
  throw ShapeError(std::string(op) + ": incompatible dims " + dims_string(a) + " and " + dims_string(b));
}

inline std::size_t rows_of(const Dims& d) { return d.empty() ? 1 : element_count(d) / d.back(); }

/// Geometry of a cubic convolution: input side, kernel, stride, padding, output side.
struct ConvGeom {
  std::size_t in_side, kernel, stride, pad, out_side;
};

/// cols[(c, kz, ky, kx), (oz, oy, ox)] = in[c, oz*s - p + kz, oy*s - p + ky, ox*s - p + kx].
template <class T>
void im2col(const T* in, std::size_t channels, const ConvGeom& g, T* cols) {
  const std::size_t d = g.in_side, o = g.out_side, k = g.kernel;
  const std::size_t out_cells = o * o * o;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t kz = 0; kz < k; ++kz)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          T* row = cols + (((c * k + kz) * k + ky) * k + kx) * out_cells;
          const T* plane = in + c * d * d * d;
          for (std::size_t oz = 0; oz < o; ++oz) {
            const long iz = static_cast<long>(oz * g.stride + kz) - static_cast<long>(g.pad);
            for (std::size_t oy = 0; oy < o; ++oy) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              T* dst = row + (oz * o + oy) * o;
              if (iz < 0 || iy < 0 || iz >= static_cast<long>(d) || iy >= static_cast<long>(d)) {
                std::fill(dst, dst + o, T(0));
                continue;
              }
              const T* src = plane + (static_cast<std::size_t>(iz) * d + static_cast<std::size_t>(iy)) * d;
              for (std::size_t ox = 0; ox < o; ++ox) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                dst[ox] = (ix < 0 || ix >= static_cast<long>(d)) ? T(0) : src[ix];
              }
            }
          }
        }
}

/// Adjoint of im2col: scatters-adds columns back into the input volume.
template <class T>
void col2im(const T* cols, std::size_t channels, const ConvGeom& g, T* in) {
  const std::size_t d = g.in_side, o = g.out_side, k = g.kernel;
  const std::size_t out_cells = o * o * o;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t kz = 0; kz < k; ++kz)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T* row = cols + (((c * k + kz) * k + ky) * k + kx) * out_cells;
          T* plane = in + c * d * d * d;
          for (std::size_t oz = 0; oz < o; ++oz) {
            const long iz = static_cast<long>(oz * g.stride + kz) - static_cast<long>(g.pad);
            if (iz < 0 || iz >= static_cast<long>(d)) continue;
            for (std::size_t oy = 0; oy < o; ++oy) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(d)) continue;
              const T* src = row + (oz * o + oy) * o;
              T* dst = plane + (static_cast<std::size_t>(iz) * d + static_cast<std::size_t>(iy)) * d;
              for (std::size_t ox = 0; ox < o; ++ox) {
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (ix >= 0 && ix < static_cast<long>(d)) dst[ix] += src[ox];
              }
            }
          }
        }
}

template <class T>
Var<T> unary(Var<T> x, OpKind kind, const char* name, T (*f)(T), T (*df)(T x, T y)) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.dims());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id;
  return x.tape->record(kind, std::move(out), {xi}, [xi, df, out_id = x.tape->size()](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv2 = t.value(xi);
    const Tensor<T>& yv = t.value(out_id);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv2[i], yv[i]);
  }, name);
}

template <class T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives.
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "matmul");
  const Dims& da = a.dims();
  const Dims& db = b.dims();
  if (da.size() != 2 || db.size() != 2 || da[1] != db[0]) detail::dims_error("matmul", da, db);
  const std::size_t m = da[0], k = da[1], n = db[1];
  Tensor<T> out({m, n});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(a.value(), m, k) * detail::as_matrix(b.value(), k, n);
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(OpKind::kMatmul, std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    const auto gm = detail::as_matrix(g, m, n);
    if (t.needs_grad(ai)) detail::as_matrix(t.grad(ai), m, k).noalias() += gm * detail::as_matrix(t.value(bi), k, n).transpose();
    if (t.needs_grad(bi)) detail::as_matrix(t.grad(bi), k, n).noalias() += detail::as_matrix(t.value(ai), m, k).transpose() * gm;
  }, "matmul");
}

template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::require_same_tape(x, bias, "add_bias");
  const Dims& dx = x.dims();
  if (dx.empty() || bias.size() != dx.back()) detail::dims_error("add_bias", dx, bias.dims());
  const std::size_t n = dx.back(), m = detail::rows_of(dx);
  Tensor<T> out = x.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  const std::size_t xi = x.id, bi = bias.id;
  return x.tape->record(OpKind::kAddBias, std::move(out), {xi, bi}, [xi, bi, m, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.needs_grad(xi)) {
      Tensor<T>& gx = t.grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad(bi);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
    }
  }, "add_bias");
}

/// Multiplies each row of x[m,n] by the matching entry of s[m,1].
template <class T>
Var<T> row_scale(Var<T> x, Var<T> s) {
  detail::require_same_tape(x, s, "row_scale");
  const Dims& dx = x.dims();
  if (dx.size() != 2 || s.size() != dx[0]) detail::dims_error("row_scale", dx, s.dims());
  const std::size_t m = dx[0], n = dx[1];
  Tensor<T> out = x.value();
  const Tensor<T>& sv = s.value();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= sv[r];
  const std::size_t xi = x.id, si = s.id;
  return x.tape->record(OpKind::kRowScale, std::move(out), {xi, si}, [xi, si, m, n](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& sv2 = t.value(si);
    if (t.needs_grad(xi)) {
      Tensor<T>& gx = t.grad(xi);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r * n + c] * sv2[r];
    }
    if (t.needs_grad(si)) {
      Tensor<T>& gs = t.grad(si);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gs[r] += g[r * n + c] * xv[r * n + c];
    }
  }, "row_scale");
}

struct ConvAttrs {
  std::size_t stride = 2;
  std::size_t pad = 1;
};

template <class T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b, ConvAttrs attrs = {}) {
  detail::require_same_tape(x, w, "conv3d");
  detail::require_same_tape(x, b, "conv3d");
  const Dims& dx = x.dims();
  const Dims& dw = w.dims();
  if (dx.size() != 5 || dw.size() != 5 || dx[1] != dw[1] || dx[2] != dx[3] || dx[3] != dx[4] || dw[2] != dw[3] ||
      dw[3] != dw[4] || b.size() != dw[0] || dx[2] + 2 * attrs.pad < dw[2] || attrs.stride == 0)
    detail::dims_error("conv3d", dx, dw);
  const std::size_t batch = dx[0], cin = dx[1], cout = dw[0], k = dw[2];
  const detail::ConvGeom geom{dx[2], k, attrs.stride, attrs.pad, (dx[2] + 2 * attrs.pad - k) / attrs.stride + 1};
  const std::size_t in_cells = geom.in_side * geom.in_side * geom.in_side;
  const std::size_t out_cells = geom.out_side * geom.out_side * geom.out_side;
  const std::size_t patch = cin * k * k * k;

  auto cols = std::make_shared<Buffer<T>>(batch * patch * out_cells);
  Tensor<T> out({batch, cout, geom.out_side, geom.out_side, geom.out_side});
  const auto wm = detail::as_matrix(w.value(), cout, patch);
  const Tensor<T>& bv = b.value();
  for (std::size_t n = 0; n < batch; ++n) {
    T* c = cols->data() + n * patch * out_cells;
    detail::im2col(x.value().data() + n * cin * in_cells, cin, geom, c);
    detail::MatMap<T> om(out.data() + n * cout * out_cells, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(out_cells));
    om.noalias() = wm * detail::ConstMatMap<T>(c, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(out_cells));
    for (std::size_t o = 0; o < cout; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bv[o];
  }
  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return x.tape->record(OpKind::kConv3d, std::move(out), {xi, wi, bi},
                        [=](Tape<T>& t, const Tensor<T>& g) {
                          Buffer<T> dcols(patch * out_cells);
                          for (std::size_t n = 0; n < batch; ++n) {
                            detail::ConstMatMap<T> gm(g.data() + n * cout * out_cells, static_cast<Eigen::Index>(cout),
                                                      static_cast<Eigen::Index>(out_cells));
                            detail::ConstMatMap<T> cm(cols->data() + n * patch * out_cells, static_cast<Eigen::Index>(patch),
                                                      static_cast<Eigen::Index>(out_cells));
                            if (t.needs_grad(wi)) detail::as_matrix(t.grad(wi), cout, patch).noalias() += gm * cm.transpose();
                            if (t.needs_grad(bi)) {
                              Tensor<T>& gb = t.grad(bi);
                              for (std::size_t o = 0; o < cout; ++o) gb[o] += gm.row(static_cast<Eigen::Index>(o)).sum();
                            }
                            if (t.needs_grad(xi)) {
                              detail::MatMap<T> dm(dcols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(out_cells));
                              dm.noalias() = detail::as_matrix(t.value(wi), cout, patch).transpose() * gm;
                              detail::col2im(dcols.data(), cin, geom, t.grad(xi).data() + n * cin * in_cells);
                            }
                          }
                        },
                        "conv3d");
}

template <class T>
Var<T> conv_transpose3d(Var<T> x, Var<T> w, Var<T> b, ConvAttrs attrs = {}) {
  detail::require_same_tape(x, w, "conv_transpose3d");
  detail::require_same_tape(x, b, "conv_transpose3d");
  const Dims& dx = x.dims();
  const Dims& dw = w.dims();
  if (dx.size() != 5 || dw.size() != 5 || dx[1] != dw[0] || dx[2] != dx[3] || dx[3] != dx[4] || dw[2] != dw[3] ||
      dw[3] != dw[4] || b.size() != dw[1] || attrs.stride == 0 || (dx[2] - 1) * attrs.stride + dw[2] < 2 * attrs.pad + 1)
    detail::dims_error("conv_transpose3d", dx, dw);
  const std::size_t batch = dx[0], cin = dx[1], cout = dw[1], k = dw[2];
  const std::size_t side = (dx[2] - 1) * attrs.stride + k - 2 * attrs.pad;
  // The output volume plays the role of a convolution input whose output is x.
  const detail::ConvGeom geom{side, k, attrs.stride, attrs.pad, dx[2]};
  if ((side + 2 * attrs.pad - k) / attrs.stride + 1 != dx[2]) detail::dims_error("conv_transpose3d", dx, dw);
  const std::size_t in_cells = dx[2] * dx[2] * dx[2];
  const std::size_t out_cells = side * side * side;
  const std::size_t patch = cout * k * k * k;

  Tensor<T> out({batch, cout, side, side, side});
  Buffer<T> cols(patch * in_cells);
  const auto wm = detail::as_matrix(w.value(), cin, patch);
  const Tensor<T>& bv = b.value();
  for (std::size_t n = 0; n < batch; ++n) {
    detail::MatMap<T> cm(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(in_cells));
    cm.noalias() = wm.transpose() * detail::ConstMatMap<T>(x.value().data() + n * cin * in_cells, static_cast<Eigen::Index>(cin),
                                                           static_cast<Eigen::Index>(in_cells));
    T* o = out.data() + n * cout * out_cells;
    detail::col2im(cols.data(), cout, geom, o);
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t i = 0; i < out_cells; ++i) o[c * out_cells + i] += bv[c];
  }
  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return x.tape->record(OpKind::kConvTranspose3d, std::move(out), {xi, wi, bi},
                        [=](Tape<T>& t, const Tensor<T>& g) {
                          Buffer<T> gcols(patch * in_cells);
                          for (std::size_t n = 0; n < batch; ++n) {
                            const T* go = g.data() + n * cout * out_cells;
                            detail::im2col(go, cout, geom, gcols.data());
                            detail::ConstMatMap<T> gc(gcols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(in_cells));
                            if (t.needs_grad(xi)) {
                              detail::MatMap<T> gx(t.grad(xi).data() + n * cin * in_cells, static_cast<Eigen::Index>(cin),
                                                   static_cast<Eigen::Index>(in_cells));
                              gx.noalias() += detail::as_matrix(t.value(wi), cin, patch) * gc;
                            }
                            if (t.needs_grad(wi)) {
                              detail::ConstMatMap<T> xm(t.value(xi).data() + n * cin * in_cells, static_cast<Eigen::Index>(cin),
                                                        static_cast<Eigen::Index>(in_cells));
                              detail::as_matrix(t.grad(wi), cin, patch).noalias() += xm * gc.transpose();
                            }
                            if (t.needs_grad(bi)) {
                              Tensor<T>& gb = t.grad(bi);
                              for (std::size_t c = 0; c < cout; ++c)
                                for (std::size_t i = 0; i < out_cells; ++i) gb[c] += go[c * out_cells + i];
                            }
                          }
                        },
                        "conv_transpose3d");
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>(x, OpKind::kSigmoid, "sigmoid", &detail::sigmoid_scalar<T>,
                          [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>(x, OpKind::kTanh, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>(x, OpKind::kExp, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(Var<T> x) {
  return detail::unary<T>(x, OpKind::kLog, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Var<T> square(Var<T> x) {
  return detail::unary<T>(x, OpKind::kSquare, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v *= c;
  const std::size_t xi = x.id;
  return x.tape->record(OpKind::kScale, std::move(out), {xi}, [xi, c](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  }, "scale");
}

template <class T>
Var<T> add_scalar(Var<T> x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v += c;
  const std::size_t xi = x.id;
  return x.tape->record(OpKind::kAddScalar, std::move(out), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }, "add_scalar");
}

namespace detail {

template <class T>
Var<T> binary(Var<T> a, Var<T> b, OpKind kind, const char* name) {
  require_same_tape(a, b, name);
  if (a.dims() != b.dims()) dims_error(name, a.dims(), b.dims());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.dims());
  for (std::size_t i = 0; i < av.size(); ++i) {
    switch (kind) {
      case OpKind::kAdd: out[i] = av[i] + bv[i]; break;
      case OpKind::kSub: out[i] = av[i] - bv[i]; break;
      default: out[i] = av[i] * bv[i]; break;
    }
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(kind, std::move(out), {ai, bi}, [ai, bi, kind](Tape<T>& t, const Tensor<T>& g) {
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad(ai);
      if (kind == OpKind::kMul) {
        const Tensor<T>& bv2 = t.value(bi);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad(bi);
      if (kind == OpKind::kMul) {
        const Tensor<T>& av2 = t.value(ai);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      } else if (kind == OpKind::kSub) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    }
  }, name);
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(a, b, OpKind::kAdd, "add");
}
template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(a, b, OpKind::kSub, "sub");
}
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(a, b, OpKind::kMul, "mul");
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return mul(a, b);
}

/// Joins tensors along their last axis.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Dims& d0 = parts.front().dims();
  if (d0.empty()) throw ShapeError("concat: inputs need at least one axis");
  const std::size_t rows = detail::rows_of(d0);
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p, "concat");
    const Dims& d = p.dims();
    if (d.size() != d0.size() || !std::equal(d.begin(), d.end() - 1, d0.begin())) detail::dims_error("concat", d0, d);
    widths.push_back(d.back());
    ids.push_back(p.id);
    total += d.back();
  }
  Dims od = d0;
  od.back() = total;
  Tensor<T> out(od);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * total + off);
    off += widths[p];
  }
  return parts.front().tape->record(OpKind::kConcat, std::move(out), ids, [ids, widths, rows, total](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off2 = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.needs_grad(ids[p])) {
        Tensor<T>& gp = t.grad(ids[p]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[p]; ++c) gp[r * widths[p] + c] += g[r * total + off2 + c];
      }
      off2 += widths[p];
    }
  }, "concat");
}

template <class T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T s = T(0);
  for (T v : xv.vec()) s += v;
  const std::size_t xi = x.id;
  return x.tape->record(OpKind::kSum, Tensor<T>(Dims{}, std::vector<T>{s}), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(xi);
    for (auto& v : gx.vec()) v += g[0];
  }, "sum");
}

template <class T>
Var<T> mean(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T s = T(0);
  for (T v : xv.vec()) s += v;
  const T n = static_cast<T>(xv.size());
  const std::size_t xi = x.id;
  return x.tape->record(OpKind::kMean, Tensor<T>(Dims{}, std::vector<T>{s / n}), {xi}, [xi, n](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(xi);
    for (auto& v : gx.vec()) v += g[0] / n;
  }, "mean");
}

template <class T>
Var<T> reshape(Var<T> x, Dims dims) {
  Tensor<T> out = x.value();
  if (element_count(dims) != out.size()) detail::dims_error("reshape", x.dims(), dims);
  out.reshape(std::move(dims));
  const std::size_t xi = x.id;
  return x.tape->record(OpKind::kReshape, std::move(out), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }, "reshape");
}

/// Per-row mean of the binary cross-entropy between sigmoid(logits) and targets.
template <class T>
Var<T> bce_logits_rows(Var<T> logits, Var<T> targets) {
  detail::require_same_tape(logits, targets, "bce_logits_rows");
  if (logits.dims() != targets.dims() || logits.dims().size() != 2) detail::dims_error("bce_logits_rows", logits.dims(), targets.dims());
  const std::size_t m = logits.dims()[0], n = logits.dims()[1];
  const Tensor<T>& x = logits.value();
  const Tensor<T>& y = targets.value();
  Tensor<T> out({m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    T acc = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      const T v = x[r * n + c];
      acc += std::max(v, T(0)) - v * y[r * n + c] + std::log1p(std::exp(-std::abs(v)));
    }
    out[r] = acc / static_cast<T>(n);
  }
  const std::size_t li = logits.id, ti = targets.id;
  return logits.tape->record(OpKind::kBceLogitsRows, std::move(out), {li, ti}, [li, ti, m, n](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(li);
    const Tensor<T>& yv = t.value(ti);
    if (t.needs_grad(li)) {
      Tensor<T>& gx = t.grad(li);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c)
          gx[r * n + c] += g[r] * (detail::sigmoid_scalar(xv[r * n + c]) - yv[r * n + c]) / static_cast<T>(n);
    }
    if (t.needs_grad(ti)) {
      Tensor<T>& gy = t.grad(ti);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gy[r * n + c] -= g[r] * xv[r * n + c] / static_cast<T>(n);
    }
  }, "bce_logits_rows");
}

/// Mean softmax cross-entropy of logits[m,c] against integer labels.
template <class T>
Var<T> softmax_xent(Var<T> logits, std::vector<std::size_t> labels) {
  const Dims& d = logits.dims();
  if (d.size() != 2 || labels.size() != d[0]) throw ShapeError("softmax_xent: need [m,c] logits and m labels, got " + dims_string(d));
  const std::size_t m = d[0], c = d[1];
  const Tensor<T>& x = logits.value();
  auto probs = std::make_shared<Buffer<T>>(m * c);
  T loss = T(0);
  for (std::size_t r = 0; r < m; ++r) {
    if (labels[r] >= c) throw ContractError("softmax_xent: label out of range");
    T mx = x[r * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[r * c + j]);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[r * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(x[r * c + j] - mx) / z;
    loss += -(x[r * c + labels[r]] - mx - std::log(z));
  }
  const std::size_t li = logits.id;
  return logits.tape->record(OpKind::kSoftmaxXent, Tensor<T>(Dims{}, std::vector<T>{loss / static_cast<T>(m)}), {li},
                             [li, probs, labels = std::move(labels), m, c](Tape<T>& t, const Tensor<T>& g) {
                               Tensor<T>& gx = t.grad(li);
                               for (std::size_t r = 0; r < m; ++r)
                                 for (std::size_t j = 0; j < c; ++j)
                                   gx[r * c + j] += g[0] * ((*probs)[r * c + j] - (j == labels[r] ? T(1) : T(0))) / static_cast<T>(m);
                             },
                             "softmax_xent");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t probes = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string fault;  ///< non-empty if the function raised a numeric fault while probing
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double epsilon = 1e-4;
  /// Errors are |a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from
  /// turning round-off into huge relative errors.
  double floor = 1e-4;
  std::size_t max_probes_per_param = 64;
  std::uint64_t seed = 0;
};

/// Compares backward() against central differences of `fn` for every parameter.
/// `fn` must build the same scalar loss on any fresh tape.
template <class T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&)>& fn, const std::vector<Parameter<T>*>& params,
                           const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  auto eval = [&fn]() {
    Tape<T> tape;
    return static_cast<double>(fn(tape).value()[0]);
  };
  try {
    for (auto* p : params) p->zero_grad();
    {
      Tape<T> tape;
      Var<T> loss = fn(tape);
      tape.backward(loss);
    }
    Rng rng(opts.seed);
    for (auto* p : params) {
      GradCheckEntry e;
      e.name = p->name;
      std::vector<std::size_t> idx(p->value.size());
      std::iota(idx.begin(), idx.end(), 0);
      if (idx.size() > opts.max_probes_per_param) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(opts.max_probes_per_param);
      }
      for (std::size_t i : idx) {
        const T saved = p->value[i];
        p->value[i] = saved + static_cast<T>(opts.epsilon);
        const double up = eval();
        p->value[i] = saved - static_cast<T>(opts.epsilon);
        const double down = eval();
        p->value[i] = saved;
        const double numeric = (up - down) / (2.0 * opts.epsilon);
        const double analytic = static_cast<double>(p->grad[i]);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.floor});
        e.max_rel_error = std::max(e.max_rel_error, std::abs(numeric - analytic) / denom);
        ++e.probes;
      }
      report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
      report.entries.push_back(std::move(e));
    }
  } catch (const NumericFault& f) {
    report.fault = f.what();
    report.passed = false;
    return report;
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

}  // namespace sagnet::ad
