#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// A Tape records every primitive applied during a forward pass together with
// a closure that knows how to push gradients back to the primitive's inputs.
// Nodes are appended in execution order, so the tape is topologically sorted
// by construction and backward() is a single reverse sweep.
//
// detach() is a forward identity whose output never requires a gradient.
// Anything computed from a detached value behaves as a constant during the
// backward sweep.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xmmp::ad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row-major 2-D access.
  double& at(std::size_t row, std::size_t col);
  double at(std::size_t row, std::size_t col) const;

  double item() const;
  bool all_finite() const noexcept;
  void fill(double value);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class Primitive : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  div,
  matmul,
  transpose,
  reshape,
  concat,
  slice,
  sum,
  mean,
  max,
  exp,
  log,
  sqrt,
  relu,
  softmax,
  scale,
  broadcast,
  gather_rows,
  detach,
};

std::string_view primitive_name(Primitive kind);
std::optional<Primitive> parse_primitive(std::string_view name);

using NodeId = std::uint32_t;

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  NodeId id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input owned by the tape.
  Var leaf(Tensor value);
  // Differentiable input borrowed from the caller; must outlive the tape.
  Var parameter(const Tensor& value);
  // Never receives a gradient.
  Var constant(Tensor value);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(NodeId id) const;
  Primitive kind(NodeId id) const { return nodes_.at(id).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  void backward(const Var& output);
  void backward(const Var& output, const Tensor& seed);
  void reset_gradients();
  bool backward_done() const noexcept { return backward_done_; }

  // Gradient accumulated at any node (zeros when none reached it).
  const Tensor& grad(const Var& v);
  bool has_grad(const Var& v) const;

  // Every value produced by detach() can be captured, then replayed on a
  // fresh tape so that the same forward program sees frozen constants
  // instead of recomputed ones. Replay keeps finite-difference checks of an
  // attribution-mode graph consistent with its analytic gradient.
  void capture_detached(bool on) { capture_detached_ = on; }
  const std::vector<Tensor>& detached_values() const noexcept { return detached_; }
  void replay_detached(std::vector<Tensor> values);

  // Used by primitive implementations.
  Var record(Primitive kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);
  Tensor& grad_buffer(NodeId id);
  Tensor take_detached(const Tensor& live);

 private:
  struct Node {
    Primitive kind = Primitive::leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);

  // deque keeps references to recorded values stable while the tape grows.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
  bool capture_detached_ = false;
  std::vector<Tensor> detached_;
  std::optional<std::vector<Tensor>> replay_;
  std::size_t replay_pos_ = 0;
};

// ---- primitives ------------------------------------------------------------
// Elementwise binaries require identical shapes; use broadcast() first.
// Axis reductions keep the reduced axis with extent 1.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);
Var sum(const Var& x, std::size_t axis);
Var mean(const Var& x, std::size_t axis);
Var max(const Var& x, std::size_t axis);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var relu(const Var& x);
Var softmax(const Var& x, std::size_t axis);
Var scale(const Var& x, double factor);
Var broadcast(const Var& x, Shape shape);
Var gather_rows(const Var& table, std::span<const std::size_t> rows);
Var detach(const Var& x);

// Sum of every element, as a {1} tensor.
Var sum_all(const Var& x);

struct PrimitiveArgs {
  std::size_t axis = 0;
  double factor = 1.0;
  Shape shape;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> indices;
};

// Name-driven dispatch onto the primitives above.
Var forward_primitive(Primitive kind, std::span<const Var> inputs, const PrimitiveArgs& args = {});

// ---- verification ----------------------------------------------------------

using ScalarFunction = std::function<Var(Tape&, const Var&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t coordinates_checked = 0;
};

// Compares the tape gradient of f at `point` against central differences.
// Per-coordinate error is |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
// When `coordinates` is empty every coordinate of `point` is checked.
GradCheckResult grad_check(const ScalarFunction& f, const Tensor& point, double step,
                           std::span<const std::size_t> coordinates = {});

}  // namespace xmmp::ad
