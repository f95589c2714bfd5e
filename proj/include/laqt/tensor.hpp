#pragma once

// Dense f64 tensors with define-by-run reverse-mode differentiation.
//
// Every op allocates a fresh node. When grad mode is on and any input requires
// a gradient, the node keeps its inputs and a backward rule; otherwise it is a
// plain constant. Node ids grow monotonically per thread, so sorting reachable
// nodes by id gives a valid topological order for the backward sweep.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace laqt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// uniform(-bound, bound), drawn in row-major order.
  static Tensor uniform(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  /// Gradient buffer of a leaf after backward(); empty if none was produced.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Reverse sweep from this scalar. Leaves accumulate into their gradient;
  /// a leaf that already holds an un-zeroed gradient is a contract violation.
  void backward() const;

  /// Same values, no graph history.
  Tensor detach() const;
  /// Independent copy of the values (a new leaf).
  Tensor clone(bool requires_grad) const;

  std::uint64_t id() const;
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<void(Node&)>;

struct Node {
  std::uint64_t id = 0;
  const char* op = "leaf";
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool grad_written = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
  /// Lazily sized gradient buffer.
  std::vector<double>& grad_buffer();
};

/// One recorded operation of a differentiation graph.
struct GraphEntry {
  const char* op;
  std::vector<std::uint64_t> input_ids;
  std::uint64_t output_id;
};

/// Operations reachable from a root, in topological order (inputs first).
struct Graph {
  std::vector<GraphEntry> entries;
};

Graph trace(const Tensor& root);

bool grad_enabled();

/// Disables graph recording in its scope (rollouts, targets, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise (binary ops broadcast numpy-style) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor elu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }

// ---- reductions ----
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// Max along the last axis. Gradient flows to the first maximal element.
Tensor max_last(const Tensor& x);

// ---- structure ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose_last(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// x[..., n] -> [...], taking index[i] from the i-th row of the last axis.
Tensor gather_last(const Tensor& x, std::span<const std::size_t> index);
/// x[R, T, D] -> [R, D], taking row index[r] of block r.
Tensor pick_rows(const Tensor& x, std::span<const std::size_t> index);
/// Where mask is nonzero the output is `value` (no gradient), else x.
Tensor masked_fill(const Tensor& x, std::span<const double> mask, double value);

// ---- linear algebra ----
/// a[..., m, k] x b[k, n] or a[B..., m, k] x b[B..., k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] W[out, in]^T + bias[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- normalisation / attention numerics ----
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalise over the last axis, then gain * xhat + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Forward value is `hard`; the gradient flows unchanged into `soft`.
Tensor straight_through(const Tensor& hard, const Tensor& soft);
/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

}  // namespace laqt
