#pragma once

// Reverse-mode (and forward-mode JVP) differentiation over a fixed set of
// raster ops. Tensors are dense, row-major, channels innermost: an image
// activation has shape {H, W, C}, a per-pixel map {H, W}, a scalar {1}.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace metadcseg::diff {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// A NaN or Inf appeared. `op()` names the producing op (suffixed with
/// ":grad" or ":tangent" for adjoint passes), `index()` the flat element.
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string op, std::size_t index);
  const std::string& op() const noexcept { return op_; }
  std::size_t index() const noexcept { return index_; }

 private:
  std::string op_;
  std::size_t index_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Segment {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Flat parameter array with a named, ordered segment table. Segments are
/// contiguous and tile the array exactly.
class ParamVector {
 public:
  const Segment& add(std::string name, Shape shape);

  const std::vector<Segment>& segments() const noexcept { return segments_; }
  const Segment& segment(std::string_view name) const;

  std::size_t size() const noexcept { return values_.size(); }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::span<double> view(const Segment& s) { return {values_.data() + s.offset, s.size}; }
  std::span<const double> view(const Segment& s) const { return {values_.data() + s.offset, s.size}; }

  /// Same names, shapes and offsets.
  bool same_layout(const ParamVector& other) const;

  bool operator==(const ParamVector& other) const {
    return same_layout(other) && values_ == other.values_;
  }

 private:
  std::vector<Segment> segments_;
  std::vector<double> values_;
};

/// High-water mark of live tape buffers, process wide.
struct ArenaStats {
  static std::size_t current_bytes();
  static std::size_t peak_bytes();
  static void reset_peak();
};

struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

template <typename Real>
class Tape {
 public:
  using Buffer = std::vector<Real>;
  using Hook = std::function<void(Tape&, int self)>;

  struct Seed {
    Var var;
    Buffer values;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  Var constant(Shape shape, Buffer value);
  Var variable(Shape shape, Buffer value);

  /// Appends one op record. The value is checked for non-finite entries.
  /// `backward` reads the node's gradient and accumulates into its inputs;
  /// `jvp` writes the node's tangent from its inputs' tangents.
  Var record(std::string_view op, Shape shape, Buffer value, std::vector<Var> inputs,
             Hook backward, Hook jvp);

  const Shape& shape(Var v) const { return nodes_[check(v)].shape; }
  const Buffer& value(Var v) const { return nodes_[check(v)].value; }
  Real scalar(Var v) const;
  std::string_view op(Var v) const { return nodes_[check(v)].op; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  /// Gradient of the last backward pass; zeros if nothing reached `v`.
  Buffer grad(Var v) const;
  /// Tangent of the last forward_tangents pass; zeros if none reached `v`.
  Buffer tangent(Var v) const;

  /// Seed d(output)/d(output) = 1 on a single-element node.
  void backward(Var output);
  /// Backward with explicit output cotangents (vector-Jacobian product).
  void backward(std::span<const Seed> seeds);
  void zero_grads();

  /// Forward-mode pass: tangents seeded on variables, propagated through
  /// every later record (Jacobian-vector product).
  void forward_tangents(std::span<const Seed> seeds);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Records whose backward hook ran in the most recent backward pass.
  std::size_t backward_visits() const noexcept { return visits_; }

  // Hook helpers. Pointers are null when no gradient/tangent exists.
  const Real* grad_ptr(int id) const;
  Real* grad_acc(Var v);  // allocates zeros; null if v does not require grad
  const Real* tangent_ptr(Var v) const;
  Real* tangent_out(int id);  // allocates zeros

 private:
  struct Node {
    std::string_view op;
    Shape shape;
    Buffer value;
    Buffer grad;
    Buffer tangent;
    std::vector<Var> inputs;
    bool requires_grad = false;
    bool is_variable = false;
    Hook backward;
    Hook jvp;
  };

  std::size_t check(Var v) const;
  void account(std::ptrdiff_t bytes);
  void run_backward();

  std::deque<Node> nodes_;  // stable references while recording
  std::size_t visits_ = 0;
  std::size_t bytes_ = 0;
};

// --- op whitelist -------------------------------------------------------------

/// Contiguous piece of a flat vector, reshaped.
template <typename Real>
Var slice(Tape<Real>& t, Var x, std::size_t offset, Shape shape);

/// 3x3 convolution, stride 1, zero padding. x {H,W,Ci}, w {3,3,Ci,Co}.
template <typename Real>
Var conv3x3(Tape<Real>& t, Var x, Var w);

/// x {..., C} + b {C}.
template <typename Real>
Var bias_add(Tape<Real>& t, Var x, Var b);

template <typename Real>
Var relu(Tape<Real>& t, Var x);

/// Nearest-neighbour 2x down-sample: out(y,x) = in(2y, 2x).
template <typename Real>
Var downsample2(Tape<Real>& t, Var x);

/// Nearest-neighbour 2x up-sample.
template <typename Real>
Var upsample2(Tape<Real>& t, Var x);

/// Per-pixel affine map: x {H,W,D}, w {D,L}, b {L} -> {H,W,L}.
template <typename Real>
Var pixel_affine(Tape<Real>& t, Var x, Var w, Var b);

/// Softmax over the innermost axis (max-subtracted).
template <typename Real>
Var softmax(Tape<Real>& t, Var logits);

/// Per-pixel cross-entropy of softmax(logits) against integer labels.
/// logits {H,W,L}, labels H*W entries in [0, L) -> map {H,W}.
template <typename Real>
Var cross_entropy(Tape<Real>& t, Var logits, std::span<const int> labels);

/// Innermost-axis channel c of x {H,W,L} -> {H,W}.
template <typename Real>
Var channel(Tape<Real>& t, Var x, int c);

template <typename Real>
Var add(Tape<Real>& t, Var a, Var b);
template <typename Real>
Var sub(Tape<Real>& t, Var a, Var b);
template <typename Real>
Var mul(Tape<Real>& t, Var a, Var b);
template <typename Real>
Var div(Tape<Real>& t, Var a, Var b);

/// scale * x + shift, elementwise.
template <typename Real>
Var affine(Tape<Real>& t, Var x, double scale, double shift);

/// Sum of all elements -> {1}.
template <typename Real>
Var sum(Tape<Real>& t, Var x);

/// Flat-index gather -> {n}.
template <typename Real>
Var gather(Tape<Real>& t, Var x, std::vector<std::size_t> indices);

/// Euclidean norm of all elements -> {1}. Gradient at 0 is taken as 0.
template <typename Real>
Var norm(Tape<Real>& t, Var x);

// --- function-level API -------------------------------------------------------

template <typename Real>
using ScalarFn = std::function<Var(Tape<Real>&, Var theta)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// f(theta) and its gradient; theta enters the tape as one flat variable.
template <typename Real>
ValueAndGrad value_and_grad(const ScalarFn<Real>& f, std::span<const double> theta);

template <typename Real>
ValueAndGrad value_and_grad(const ScalarFn<Real>& f, const ParamVector& theta) {
  return value_and_grad<Real>(f, std::span<const double>(theta.values()));
}

template <typename Real>
double evaluate(const ScalarFn<Real>& f, std::span<const double> theta);

/// Central differences (f(th + h e_k) - f(th - h e_k)) / 2h for every k.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h);

std::vector<double> finite_diff_grad(const ScalarFn<double>& f, std::span<const double> theta,
                                     double h);

/// max_k |a_k - b_k| / max(|a|_inf, |b|_inf, floor).
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace metadcseg::diff
