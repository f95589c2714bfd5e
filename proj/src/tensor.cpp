#include "laqt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "laqt/errors.hpp"

namespace laqt {
namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_id = 1;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

std::shared_ptr<Node> new_node(const char* op, Shape shape, std::vector<double> value) {
  auto node = std::make_shared<Node>();
  node->id = g_next_id++;
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

// Wraps a computed value into a graph node. The backward rule is kept only
// when recording is on and some input needs a gradient.
Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  auto node = new_node(op, std::move(shape), std::move(value));
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_op_list(const char* op, Shape shape, std::vector<double> value,
                    const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto node = new_node(op, std::move(shape), std::move(value));
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Broadcast plan: output shape plus per-operand strides (0 on broadcast axes).
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  enum Kind { kSame, kScalarB, kScalarA, kSuffixB, kGeneral } kind = kGeneral;
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.kind = Broadcast::kSame;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(pa[i], pb[i]);
  }
  auto sa = strides_of(pa), sb = strides_of(pb);
  p.sa.resize(r);
  p.sb.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    p.sa[i] = pa[i] == 1 ? 0 : sa[i];
    p.sb[i] = pb[i] == 1 ? 0 : sb[i];
  }
  if (numel(b) == 1) {
    p.kind = Broadcast::kScalarB;
  } else if (numel(a) == 1) {
    p.kind = Broadcast::kScalarA;
  } else if (pa == p.out && b.size() <= a.size() &&
             std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    p.kind = Broadcast::kSuffixB;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, std::size_t na, std::size_t nb, F&& f) {
  const std::size_t n = numel(p.out);
  switch (p.kind) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case Broadcast::kScalarB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, 0);
      return;
    case Broadcast::kScalarA:
      for (std::size_t i = 0; i < n; ++i) f(i, 0, i);
      return;
    case Broadcast::kSuffixB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
      return;
    case Broadcast::kGeneral:
      break;
  }
  (void)na;
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * idx[d];
      ib -= p.sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class Da, class Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  Broadcast p = plan_broadcast(a.shape(), b.shape(), op);
  std::vector<double> out(numel(p.out));
  auto av = a.data(), bv = b.data();
  for_each_broadcast(p, av.size(), bv.size(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  return make_op(op, p.out, std::move(out), {&a, &b}, [p, da, db](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& av = na.value;
    const auto& bv = nb.value;
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for_each_broadcast(p, av.size(), bv.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * da(av[ia], bv[ib]);
      });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for_each_broadcast(p, av.size(), bv.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * db(av[ia], bv[ib]);
      });
    }
  });
}

// Unary op where the derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_op(op, x.shape(), std::move(out), {&x}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
  });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = laqt::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (laqt::numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(laqt::numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = new_node("leaf", std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::uniform(Shape shape, double bound, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(laqt::numel(shape));
  for (double& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
std::vector<double> Tensor::to_vector() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return node_->grad_written; }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  node_->grad_written = false;
}

std::uint64_t Tensor::id() const { return node_->id; }

namespace {

std::vector<Node*> topo_nodes(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id < b->id; });
  return order;
}

}  // namespace

Graph trace(const Tensor& root) {
  Graph g;
  for (Node* n : topo_nodes(root)) {
    GraphEntry e{n->op, {}, n->id};
    for (const auto& in : n->inputs) e.input_ids.push_back(in->id);
    g.entries.push_back(std::move(e));
  }
  return g;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) throw ContractError("backward: loss does not depend on any parameter");
  auto order = topo_nodes(*this);
  for (Node* n : order) {
    if (n->is_leaf()) {
      if (n->grad_written) {
        throw ContractError("backward: leaf gradient not zeroed since the previous backward (call zero_grad)");
      }
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->is_leaf()) {
      n->grad_buffer();
      n->grad_written = true;
    } else {
      std::vector<double>().swap(n->grad);
    }
  }
}

Tensor Tensor::detach() const {
  auto node = new_node("detach", shape(), node_->value);
  return Tensor(std::move(node));
}

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor elu(const Tensor& x) {
  return unary(
      "elu", x, [](double v) { return v > 0.0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0.0 ? 1.0 : y + 1.0; });
}

// d|x|/dx taken as sign(x), 0 at exactly 0.
Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "sum");
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.n + k) * s.inner + i];
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return make_op("sum", std::move(shape), std::move(out), {&x}, [s](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) gi[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "mean");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor sum_all(const Tensor& x) {
  auto xv = x.data();
  double s = 0.0;
  for (double v : xv) s += v;
  return make_op("sum_all", {}, {s}, {&x}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (double& g : gi) g += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor max_last(const Tensor& x) {
  require(x.rank() >= 1, "max_last: needs rank >= 1");
  const std::size_t n = x.shape().back();
  require(n > 0, "max_last: empty last axis");
  const std::size_t rows = x.numel() / n;
  auto xv = x.data();
  std::vector<double> out(rows);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (xv[r * n + j] > xv[r * n + best]) best = j;
    arg[r] = best;
    out[r] = xv[r * n + best];
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return make_op("max_last", std::move(shape), std::move(out), {&x}, [arg, n](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < arg.size(); ++r) gi[r * n + arg[r]] += self.grad[r];
  });
}

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_op("reshape", std::move(shape), x.to_vector(), {&x}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  require(order.size() == r, "permute: order length " + std::to_string(order.size()) + " vs rank " + std::to_string(r));
  std::vector<bool> used(r, false);
  for (std::size_t d : order) {
    require(d < r && !used[d], "permute: invalid axis order");
    used[d] = true;
  }
  const Shape& in_shape = x.shape();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[order[i]];
  const auto in_strides = strides_of(in_shape);
  // src[i] = input flat index for output flat index i
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    src[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += in_strides[order[d]];
      if (idx[d] < out_shape[d]) break;
      off -= in_strides[order[d]] * idx[d];
      idx[d] = 0;
    }
  }
  auto xv = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return make_op("permute", std::move(out_shape), std::move(out), {&x}, [src = std::move(src)](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) gi[src[i]] += self.grad[i];
  });
}

Tensor transpose_last(const Tensor& x) {
  require(x.rank() >= 2, "transpose_last: needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  check_axis(parts.front(), axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat: " + shape_str(first) + " and " + shape_str(s) + " differ off axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  const AxisSplit so = split_axis(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape()[axis] * so.inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * so.n * so.inner + offset));
    offsets.push_back(offset);
    offset += w;
  }
  return make_op_list("concat", std::move(out_shape), std::move(out), parts, [so, offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      auto& gi = in.grad_buffer();
      const std::size_t w = gi.size() / so.outer;
      for (std::size_t o = 0; o < so.outer; ++o)
        for (std::size_t j = 0; j < w; ++j) gi[o * w + j] += self.grad[o * so.n * so.inner + offsets[k] + j];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(x, axis, "slice");
  if (start + length > x.shape()[axis]) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) + ") exceeds axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t w = length * s.inner;
  std::vector<double> out(s.outer * w);
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  return make_op("slice", std::move(out_shape), std::move(out), {&x}, [s, w, start](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < w; ++j) gi[(o * s.n + start) * s.inner + j] += self.grad[o * w + j];
  });
}

Tensor gather_last(const Tensor& x, std::span<const std::size_t> index) {
  require(x.rank() >= 1, "gather_last: needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  require(index.size() == rows, "gather_last: " + std::to_string(index.size()) + " indices for " + std::to_string(rows) +
                                    " rows of " + shape_str(x.shape()));
  std::vector<std::size_t> idx(index.begin(), index.end());
  auto xv = x.data();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= n) throw ShapeError("gather_last: index " + std::to_string(idx[r]) + " out of range " + std::to_string(n));
    out[r] = xv[r * n + idx[r]];
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return make_op("gather_last", std::move(shape), std::move(out), {&x}, [idx, n](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) gi[r * n + idx[r]] += self.grad[r];
  });
}

Tensor pick_rows(const Tensor& x, std::span<const std::size_t> index) {
  require(x.rank() == 3, "pick_rows: expects [R,T,D], got " + shape_str(x.shape()));
  const std::size_t R = x.shape()[0], T = x.shape()[1], D = x.shape()[2];
  require(index.size() == R, "pick_rows: index count mismatch");
  std::vector<std::size_t> idx(index.begin(), index.end());
  auto xv = x.data();
  std::vector<double> out(R * D);
  for (std::size_t r = 0; r < R; ++r) {
    require(idx[r] < T, "pick_rows: index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((r * T + idx[r]) * D), D,
                out.begin() + static_cast<std::ptrdiff_t>(r * D));
  }
  return make_op("pick_rows", {R, D}, std::move(out), {&x}, [idx, T, D](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t d = 0; d < D; ++d) gi[(r * T + idx[r]) * D + d] += self.grad[r * D + d];
  });
}

Tensor masked_fill(const Tensor& x, std::span<const double> mask, double value) {
  require(mask.size() == x.numel(), "masked_fill: mask size " + std::to_string(mask.size()) + " vs " + shape_str(x.shape()));
  std::vector<double> m(mask.begin(), mask.end());
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] != 0.0 ? value : xv[i];
  return make_op("masked_fill", x.shape(), std::move(out), {&x}, [m = std::move(m)](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (m[i] == 0.0) gi[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] { return ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb)); };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw mismatch();
  const std::size_t batch = a.numel() / (m * k);
  const bool shared_b = sb.size() == 2;
  if (!shared_b) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
  }
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n);
  auto av = a.data(), bv = b.data();
  if (shared_b) {
    Map(out.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(n)).noalias() =
        MapC(av.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(k)) *
        MapC(bv.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  } else {
    for (std::size_t t = 0; t < batch; ++t)
      Map(out.data() + t * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
          MapC(av.data() + t * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
          MapC(bv.data() + t * k * n, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  }
  return make_op("matmul", std::move(out_shape), std::move(out), {&a, &b}, [batch, m, k, n, shared_b](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    if (shared_b) {
      MapC g(self.grad.data(), E(batch * m), E(n));
      if (na.requires_grad)
        Map(na.grad_buffer().data(), E(batch * m), E(k)).noalias() += g * MapC(nb.value.data(), E(k), E(n)).transpose();
      if (nb.requires_grad)
        Map(nb.grad_buffer().data(), E(k), E(n)).noalias() += MapC(na.value.data(), E(batch * m), E(k)).transpose() * g;
      return;
    }
    for (std::size_t t = 0; t < batch; ++t) {
      MapC g(self.grad.data() + t * m * n, E(m), E(n));
      if (na.requires_grad)
        Map(na.grad_buffer().data() + t * m * k, E(m), E(k)).noalias() +=
            g * MapC(nb.value.data() + t * k * n, E(k), E(n)).transpose();
      if (nb.requires_grad)
        Map(nb.grad_buffer().data() + t * k * n, E(k), E(n)).noalias() +=
            MapC(na.value.data() + t * m * k, E(m), E(k)).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[1] || bias.shape() != Shape{sw[0]}) {
    throw ShapeError("linear: input " + shape_str(sx) + " weight " + shape_str(sw) + " bias " + shape_str(bias.shape()));
  }
  const std::size_t in = sw[1], outd = sw[0];
  const std::size_t rows = x.numel() / in;
  Shape out_shape = sx;
  out_shape.back() = outd;
  std::vector<double> out(rows * outd);
  const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Map y(out.data(), E(rows), E(outd));
  y.noalias() = MapC(x.data().data(), E(rows), E(in)) * MapC(weight.data().data(), E(outd), E(in)).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), E(outd));
  return make_op("linear", std::move(out_shape), std::move(out), {&x, &weight, &bias},
                 [rows, in, outd, E](Node& self) {
                   Node& nx = *self.inputs[0];
                   Node& nw = *self.inputs[1];
                   Node& nbias = *self.inputs[2];
                   MapC g(self.grad.data(), E(rows), E(outd));
                   if (nx.requires_grad)
                     Map(nx.grad_buffer().data(), E(rows), E(in)).noalias() += g * MapC(nw.value.data(), E(outd), E(in));
                   if (nw.requires_grad)
                     Map(nw.grad_buffer().data(), E(outd), E(in)).noalias() +=
                         g.transpose() * MapC(nx.value.data(), E(rows), E(in));
                   if (nbias.requires_grad)
                     Eigen::Map<Eigen::RowVectorXd>(nbias.grad_buffer().data(), E(outd)) += g.colwise().sum();
                 });
}

// ---------------------------------------------------------------- attention numerics

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  }
  return make_op("softmax", x.shape(), std::move(out), {&x}, [s](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) dot += y[base + k * s.inner] * g[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          gi[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require(x.rank() >= 1, "layer_norm: needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " gain " + shape_str(gain.shape()) + " bias " +
                     shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<double> out(xv.size()), xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv[r * d + j] - mu) * (xv[r * d + j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xv[r * d + j] - mu) * inv_std[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node& self) {
                   Node& nx = *self.inputs[0];
                   Node& ng = *self.inputs[1];
                   Node& nb = *self.inputs[2];
                   const auto& g = self.grad;
                   const auto& gv = ng.value;
                   if (ng.requires_grad) {
                     auto& gg = ng.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                   }
                   if (nb.requires_grad) {
                     auto& gb = nb.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                   }
                   if (nx.requires_grad) {
                     auto& gx = nx.grad_buffer();
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dxh = g[r * d + j] * gv[j];
                         m1 += dxh;
                         m2 += dxh * xhat[r * d + j];
                       }
                       m1 *= inv_d;
                       m2 *= inv_d;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dxh = g[r * d + j] * gv[j];
                         gx[r * d + j] += inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
                       }
                     }
                   }
                 });
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight_through: " + shape_str(hard.shape()) + " vs " + shape_str(soft.shape()));
  }
  return make_op("straight_through", hard.shape(), hard.to_vector(), {&soft}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

}  // namespace laqt
