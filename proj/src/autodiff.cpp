#include "xmmp/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace xmmp::ad {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t row, std::size_t col) {
  return data_[row * shape_[1] + col];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return data_[row * shape_[1] + col];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

// ---- primitive names -------------------------------------------------------

namespace {

constexpr std::array<std::pair<Primitive, std::string_view>, 23> kPrimitiveNames{{
    {Primitive::leaf, "leaf"},
    {Primitive::constant, "constant"},
    {Primitive::add, "add"},
    {Primitive::sub, "sub"},
    {Primitive::mul, "mul"},
    {Primitive::div, "div"},
    {Primitive::matmul, "matmul"},
    {Primitive::transpose, "transpose"},
    {Primitive::reshape, "reshape"},
    {Primitive::concat, "concat"},
    {Primitive::slice, "slice"},
    {Primitive::sum, "sum"},
    {Primitive::mean, "mean"},
    {Primitive::max, "max"},
    {Primitive::exp, "exp"},
    {Primitive::log, "log"},
    {Primitive::sqrt, "sqrt"},
    {Primitive::relu, "relu"},
    {Primitive::softmax, "softmax"},
    {Primitive::scale, "scale"},
    {Primitive::broadcast, "broadcast"},
    {Primitive::gather_rows, "gather_rows"},
    {Primitive::detach, "detach"},
}};

}  // namespace

std::string_view primitive_name(Primitive kind) {
  for (const auto& [k, name] : kPrimitiveNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::optional<Primitive> parse_primitive(std::string_view name) {
  for (const auto& [k, n] : kPrimitiveNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

// ---- Var / Tape ------------------------------------------------------------

Tape& Var::tape() const {
  if (!tape_) throw TapeError("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

bool Var::requires_grad() const { return tape().requires_grad(id_); }

Var Tape::push(Node node) {
  if (backward_done_) throw TapeError("cannot record onto a tape after backward(); call reset_gradients()");
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.kind = Primitive::leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value) {
  Node n;
  n.kind = Primitive::leaf;
  n.borrowed = &value;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.kind = Primitive::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

const Tensor& Tape::value(NodeId id) const {
  const Node& n = nodes_.at(id);
  return n.borrowed ? *n.borrowed : n.value;
}

Var Tape::record(Primitive kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from primitive '") + std::string(primitive_name(kind)) + "'");
  }
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  if (kind != Primitive::detach) {
    for (NodeId in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  n.inputs = std::move(inputs);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(NodeId id) {
  Node& n = nodes_.at(id);
  if (!n.has_grad) {
    n.grad = Tensor(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(const Var& output) {
  if (output.value().size() != 1) {
    throw TapeError("backward() without a seed requires a scalar output, got " + to_string(output.shape()));
  }
  backward(output, Tensor(output.shape(), 1.0));
}

void Tape::backward(const Var& output, const Tensor& seed) {
  if (&output.tape() != this) throw TapeError("output belongs to a different tape");
  if (backward_done_) throw TapeError("backward() called twice without reset_gradients()");
  if (seed.shape() != output.shape()) {
    throw ShapeError("seed shape " + to_string(seed.shape()) + " does not match output " + to_string(output.shape()));
  }
  backward_done_ = true;
  if (!nodes_[output.id()].requires_grad) return;
  grad_buffer(output.id()) = seed;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.has_grad && n.backward) n.backward(*this, static_cast<NodeId>(i));
  }
}

void Tape::reset_gradients() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
  backward_done_ = false;
}

const Tensor& Tape::grad(const Var& v) { return grad_buffer(v.id()); }

bool Tape::has_grad(const Var& v) const { return nodes_.at(v.id()).has_grad; }

void Tape::replay_detached(std::vector<Tensor> values) {
  replay_ = std::move(values);
  replay_pos_ = 0;
}

Tensor Tape::take_detached(const Tensor& live) {
  Tensor out;
  if (replay_) {
    if (replay_pos_ >= replay_->size()) throw TapeError("detach replay exhausted");
    out = (*replay_)[replay_pos_++];
    if (out.shape() != live.shape()) throw ShapeError("detach replay shape mismatch");
  } else {
    out = live;
  }
  if (capture_detached_) detached_.push_back(out);
  return out;
}

// ---- primitive implementations ---------------------------------------------

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands live on different tapes");
  return a.tape();
}

void require_same_shape(const Var& a, const Var& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void accumulate(Tape& t, NodeId id, const Tensor& g, double factor = 1.0) {
  if (!t.requires_grad(id)) return;
  Tensor& dst = t.grad_buffer(id);
  double* d = dst.data();
  const double* s = g.data();
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < n; ++i) d[i] += factor * s[i];
}

template <typename F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  const double* xs = x.data();
  double* o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(xs[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const double* as = a.data();
  const double* bs = b.data();
  double* o = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = f(as[i], bs[i]);
  return out;
}

// Strides of `from` mapped onto the index space of `to` (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
  std::vector<std::size_t> strides(to.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = to.size() - from.size();
  for (std::size_t i = to.size(); i-- > offset;) {
    const std::size_t fd = from[i - offset];
    if (fd != 1 && fd != to[i]) {
      throw ShapeError("cannot broadcast " + to_string(from) + " to " + to_string(to));
    }
    strides[i] = fd == 1 ? 0 : stride;
    stride *= fd;
  }
  return strides;
}

// Calls f(out_index, src_index) for every element of `to`.
template <typename F>
void for_each_broadcast(const Shape& to, const std::vector<std::size_t>& strides, F f) {
  const std::size_t total = element_count(to);
  if (total == 0) return;
  const std::size_t rank = to.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t out = 0; out < total; ++out) {
    f(out, src);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < to[d]) break;
      src -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "add");
  const NodeId ia = a.id(), ib = b.id();
  return t.record(Primitive::add, {ia, ib},
                  map_binary(a.value(), b.value(), [](double x, double y) { return x + y; }),
                  [ia, ib](Tape& tp, NodeId self) {
                    const Tensor& g = tp.grad_buffer(self);
                    accumulate(tp, ia, g);
                    accumulate(tp, ib, g);
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "sub");
  const NodeId ia = a.id(), ib = b.id();
  return t.record(Primitive::sub, {ia, ib},
                  map_binary(a.value(), b.value(), [](double x, double y) { return x - y; }),
                  [ia, ib](Tape& tp, NodeId self) {
                    const Tensor& g = tp.grad_buffer(self);
                    accumulate(tp, ia, g);
                    accumulate(tp, ib, g, -1.0);
                  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "mul");
  const NodeId ia = a.id(), ib = b.id();
  return t.record(Primitive::mul, {ia, ib},
                  map_binary(a.value(), b.value(), [](double x, double y) { return x * y; }),
                  [ia, ib](Tape& tp, NodeId self) {
                    const Tensor& g = tp.grad_buffer(self);
                    if (tp.requires_grad(ia)) {
                      accumulate(tp, ia, map_binary(g, tp.value(ib), [](double u, double v) { return u * v; }));
                    }
                    if (tp.requires_grad(ib)) {
                      accumulate(tp, ib, map_binary(g, tp.value(ia), [](double u, double v) { return u * v; }));
                    }
                  });
}

Var div(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "div");
  const NodeId ia = a.id(), ib = b.id();
  return t.record(Primitive::div, {ia, ib},
                  map_binary(a.value(), b.value(), [](double x, double y) { return x / y; }),
                  [ia, ib](Tape& tp, NodeId self) {
                    const Tensor& g = tp.grad_buffer(self);
                    const Tensor& bv = tp.value(ib);
                    if (tp.requires_grad(ia)) {
                      accumulate(tp, ia, map_binary(g, bv, [](double u, double v) { return u / v; }));
                    }
                    if (tp.requires_grad(ib)) {
                      const Tensor& out = tp.value(self);
                      Tensor gb(bv.shape());
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -g[i] * out[i] / bv[i];
                      accumulate(tp, ib, gb);
                    }
                  });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(av.shape()) + " and " + to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  {
    const double* A = av.data();
    const double* B = bv.data();
    double* C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  const NodeId ia = a.id(), ib = b.id();
  return t.record(Primitive::matmul, {ia, ib}, std::move(out), [ia, ib, m, k, n](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    const double* G = g.data();
    if (tp.requires_grad(ia)) {
      const double* B = tp.value(ib).data();
      double* dA = tp.grad_buffer(ia).data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * n;
          // Four partial sums keep the reduction pipelined.
          double acc[4] = {0.0, 0.0, 0.0, 0.0};
          std::size_t j = 0;
          for (; j + 4 <= n; j += 4) {
            acc[0] += grow[j] * brow[j];
            acc[1] += grow[j + 1] * brow[j + 1];
            acc[2] += grow[j + 2] * brow[j + 2];
            acc[3] += grow[j + 3] * brow[j + 3];
          }
          for (; j < n; ++j) acc[0] += grow[j] * brow[j];
          dA[i * k + p] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
        }
      }
    }
    if (tp.requires_grad(ib)) {
      const double* A = tp.value(ia).data();
      double* dB = tp.grad_buffer(ib).data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* drow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
        }
      }
    }
  });
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(xv.shape()));
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  const NodeId ix = x.id();
  return x.tape().record(Primitive::transpose, {ix}, std::move(out), [ix, r, c](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& dx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += g[j * r + i];
  });
}

Var reshape(const Var& x, Shape shape) {
  if (element_count(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.value().values().begin(), x.value().values().end()));
  const NodeId ix = x.id();
  return x.tape().record(Primitive::reshape, {ix}, std::move(out), [ix](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& dx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw TapeError("concat: operands live on different tapes");
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat: shape mismatch " + to_string(s) + " vs " + to_string(first));
      }
    }
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    extents.push_back(s[axis]);
  }
  const AxisSplit os = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::size_t block = extents[k] * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(pv.data() + o * block, block, out.data() + o * os.extent * os.inner + offset * os.inner);
    }
    offset += extents[k];
  }
  return t.record(Primitive::concat, ids, std::move(out), [ids, extents, os](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t block = extents[k] * os.inner;
      if (tp.requires_grad(ids[k])) {
        Tensor& dx = tp.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < os.outer; ++o) {
          const double* src = g.data() + o * os.extent * os.inner + off * os.inner;
          double* dst = dx.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      off += extents[k];
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  const AxisSplit xs = split_axis(s, axis);
  if (begin >= end || end > xs.extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     to_string(s) + " on axis " + std::to_string(axis));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t block = (end - begin) * xs.inner;
  for (std::size_t o = 0; o < xs.outer; ++o) {
    std::copy_n(x.value().data() + o * xs.extent * xs.inner + begin * xs.inner, block, out.data() + o * block);
  }
  const NodeId ix = x.id();
  return x.tape().record(Primitive::slice, {ix}, std::move(out), [ix, xs, begin, block](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& dx = tp.grad_buffer(ix);
    for (std::size_t o = 0; o < xs.outer; ++o) {
      double* dst = dx.data() + o * xs.extent * xs.inner + begin * xs.inner;
      const double* src = g.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

namespace {

Var reduce_sum(const Var& x, std::size_t axis, double factor, Primitive kind) {
  const AxisSplit xs = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < xs.outer; ++o)
    for (std::size_t a = 0; a < xs.extent; ++a)
      for (std::size_t i = 0; i < xs.inner; ++i)
        out[o * xs.inner + i] += xv[(o * xs.extent + a) * xs.inner + i];
  if (factor != 1.0)
    for (double& v : out.values()) v *= factor;
  const NodeId ix = x.id();
  return x.tape().record(kind, {ix}, std::move(out), [ix, xs, factor](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& dx = tp.grad_buffer(ix);
    for (std::size_t o = 0; o < xs.outer; ++o)
      for (std::size_t a = 0; a < xs.extent; ++a)
        for (std::size_t i = 0; i < xs.inner; ++i)
          dx[(o * xs.extent + a) * xs.inner + i] += factor * g[o * xs.inner + i];
  });
}

}  // namespace

Var sum(const Var& x, std::size_t axis) { return reduce_sum(x, axis, 1.0, Primitive::sum); }

Var mean(const Var& x, std::size_t axis) {
  const std::size_t n = split_axis(x.shape(), axis).extent;
  if (n == 0) throw ShapeError("mean over an empty axis");
  return reduce_sum(x, axis, 1.0 / static_cast<double>(n), Primitive::mean);
}

Var max(const Var& x, std::size_t axis) {
  const AxisSplit xs = split_axis(x.shape(), axis);
  if (xs.extent == 0) throw ShapeError("max over an empty axis");
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < xs.outer; ++o) {
    for (std::size_t i = 0; i < xs.inner; ++i) {
      std::size_t best = o * xs.extent * xs.inner + i;
      for (std::size_t a = 1; a < xs.extent; ++a) {
        const std::size_t idx = (o * xs.extent + a) * xs.inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      out[o * xs.inner + i] = xv[best];
      argmax[o * xs.inner + i] = best;
    }
  }
  const NodeId ix = x.id();
  return x.tape().record(Primitive::max, {ix}, std::move(out), [ix, argmax](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& dx = tp.grad_buffer(ix);
    for (std::size_t k = 0; k < argmax.size(); ++k) dx[argmax[k]] += g[k];
  });
}

Var exp(const Var& x) {
  const NodeId ix = x.id();
  return x.tape().record(Primitive::exp, {ix}, map_unary(x.value(), [](double v) { return std::exp(v); }),
                         [ix](Tape& tp, NodeId self) {
                           const Tensor& g = tp.grad_buffer(self);
                           const Tensor& y = tp.value(self);
                           Tensor& dx = tp.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i];
                         });
}

Var log(const Var& x) {
  const NodeId ix = x.id();
  return x.tape().record(Primitive::log, {ix}, map_unary(x.value(), [](double v) { return std::log(v); }),
                         [ix](Tape& tp, NodeId self) {
                           const Tensor& g = tp.grad_buffer(self);
                           const Tensor& xv = tp.value(ix);
                           Tensor& dx = tp.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / xv[i];
                         });
}

Var sqrt(const Var& x) {
  const NodeId ix = x.id();
  return x.tape().record(Primitive::sqrt, {ix}, map_unary(x.value(), [](double v) { return std::sqrt(v); }),
                         [ix](Tape& tp, NodeId self) {
                           const Tensor& g = tp.grad_buffer(self);
                           const Tensor& y = tp.value(self);
                           Tensor& dx = tp.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * 0.5 / y[i];
                         });
}

Var relu(const Var& x) {
  const NodeId ix = x.id();
  return x.tape().record(Primitive::relu, {ix}, map_unary(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
                         [ix](Tape& tp, NodeId self) {
                           const Tensor& g = tp.grad_buffer(self);
                           const Tensor& xv = tp.value(ix);
                           Tensor& dx = tp.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (xv[i] > 0.0) dx[i] += g[i];
                         });
}

Var softmax(const Var& x, std::size_t axis) {
  const AxisSplit xs = split_axis(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t o = 0; o < xs.outer; ++o) {
    for (std::size_t i = 0; i < xs.inner; ++i) {
      const std::size_t base = o * xs.extent * xs.inner + i;
      double m = xv[base];
      for (std::size_t a = 1; a < xs.extent; ++a) m = std::max(m, xv[base + a * xs.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < xs.extent; ++a) {
        const double e = std::exp(xv[base + a * xs.inner] - m);
        out[base + a * xs.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < xs.extent; ++a) out[base + a * xs.inner] /= z;
    }
  }
  const NodeId ix = x.id();
  return x.tape().record(Primitive::softmax, {ix}, std::move(out), [ix, xs](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value(self);
    Tensor& dx = tp.grad_buffer(ix);
    for (std::size_t o = 0; o < xs.outer; ++o) {
      for (std::size_t i = 0; i < xs.inner; ++i) {
        const std::size_t base = o * xs.extent * xs.inner + i;
        double dot = 0.0;
        for (std::size_t a = 0; a < xs.extent; ++a) dot += g[base + a * xs.inner] * y[base + a * xs.inner];
        for (std::size_t a = 0; a < xs.extent; ++a) {
          const std::size_t k = base + a * xs.inner;
          dx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

Var scale(const Var& x, double factor) {
  const NodeId ix = x.id();
  return x.tape().record(Primitive::scale, {ix}, map_unary(x.value(), [factor](double v) { return v * factor; }),
                         [ix, factor](Tape& tp, NodeId self) { accumulate(tp, ix, tp.grad_buffer(self), factor); });
}

Var broadcast(const Var& x, Shape shape) {
  const Shape& from = x.shape();
  if (from.size() > shape.size()) {
    throw ShapeError("cannot broadcast " + to_string(from) + " to " + to_string(shape));
  }
  const auto strides = broadcast_strides(from, shape);
  Tensor out(shape);
  const Tensor& xv = x.value();
  for_each_broadcast(shape, strides, [&](std::size_t o, std::size_t s) { out[o] = xv[s]; });
  const NodeId ix = x.id();
  return x.tape().record(Primitive::broadcast, {ix}, std::move(out),
                         [ix, shape = std::move(shape), strides](Tape& tp, NodeId self) {
                           const Tensor& g = tp.grad_buffer(self);
                           Tensor& dx = tp.grad_buffer(ix);
                           for_each_broadcast(shape, strides, [&](std::size_t o, std::size_t s) { dx[s] += g[o]; });
                         });
}

Var gather_rows(const Var& table, std::span<const std::size_t> rows) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows: table must be a matrix, got " + to_string(tv.shape()));
  const std::size_t n = tv.dim(0), w = tv.dim(1);
  Tensor out({rows.size(), w});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " + std::to_string(n) + " rows");
    }
    std::copy_n(tv.data() + rows[r] * w, w, out.data() + r * w);
  }
  const NodeId it = table.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return table.tape().record(Primitive::gather_rows, {it}, std::move(out), [it, idx, w](Tape& tp, NodeId self) {
    const Tensor& g = tp.grad_buffer(self);
    Tensor& dt = tp.grad_buffer(it);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < w; ++c) dt[idx[r] * w + c] += g[r * w + c];
  });
}

Var detach(const Var& x) {
  Tape& t = x.tape();
  return t.record(Primitive::detach, {x.id()}, t.take_detached(x.value()), nullptr);
}

Var sum_all(const Var& x) { return sum(reshape(x, {x.value().size()}), 0); }

Var forward_primitive(Primitive kind, std::span<const Var> in, const PrimitiveArgs& args) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(primitive_name(kind)) + " expects " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind) {
    case Primitive::add: need(2); return add(in[0], in[1]);
    case Primitive::sub: need(2); return sub(in[0], in[1]);
    case Primitive::mul: need(2); return mul(in[0], in[1]);
    case Primitive::div: need(2); return div(in[0], in[1]);
    case Primitive::matmul: need(2); return matmul(in[0], in[1]);
    case Primitive::transpose: need(1); return transpose(in[0]);
    case Primitive::reshape: need(1); return reshape(in[0], args.shape);
    case Primitive::concat: return concat(in, args.axis);
    case Primitive::slice: need(1); return slice(in[0], args.axis, args.begin, args.end);
    case Primitive::sum: need(1); return sum(in[0], args.axis);
    case Primitive::mean: need(1); return mean(in[0], args.axis);
    case Primitive::max: need(1); return max(in[0], args.axis);
    case Primitive::exp: need(1); return exp(in[0]);
    case Primitive::log: need(1); return log(in[0]);
    case Primitive::sqrt: need(1); return sqrt(in[0]);
    case Primitive::relu: need(1); return relu(in[0]);
    case Primitive::softmax: need(1); return softmax(in[0], args.axis);
    case Primitive::scale: need(1); return scale(in[0], args.factor);
    case Primitive::broadcast: need(1); return broadcast(in[0], args.shape);
    case Primitive::gather_rows: need(1); return gather_rows(in[0], args.indices);
    case Primitive::detach: need(1); return detach(in[0]);
    case Primitive::leaf:
    case Primitive::constant:
      break;
  }
  throw std::invalid_argument("unknown primitive '" + std::string(primitive_name(kind)) + "'");
}

// ---- grad_check --------------------------------------------------------------

GradCheckResult grad_check(const ScalarFunction& f, const Tensor& point, double step,
                           std::span<const std::size_t> coordinates) {
  if (!(step >= 1e-6 && step <= 1e-3)) throw std::invalid_argument("grad_check: step must lie in [1e-6, 1e-3]");

  Tensor analytic;
  std::vector<Tensor> frozen;
  {
    Tape tape;
    tape.capture_detached(true);
    Var x = tape.leaf(point);
    Var y = f(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
    frozen = tape.detached_values();
  }

  auto eval = [&](const Tensor& p) {
    Tape tape;
    tape.replay_detached(frozen);
    return f(tape, tape.leaf(p)).value().item();
  };

  std::vector<std::size_t> all;
  if (coordinates.empty()) {
    all.resize(point.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coordinates = all;
  }

  GradCheckResult result;
  Tensor probe = point;
  for (std::size_t c : coordinates) {
    if (c >= point.size()) throw std::out_of_range("grad_check: coordinate out of range");
    const double orig = probe[c];
    probe[c] = orig + step;
    const double up = eval(probe);
    probe[c] = orig - step;
    const double down = eval(probe);
    probe[c] = orig;
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite finite-difference estimate");
    const double a = analytic[c];
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = c;
    }
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace xmmp::ad
