#include "tempose/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace tempose::ad {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<Scalar>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), Scalar(0));
  return grad;
}

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) {
    if (!t.node_) throw Error("use of an undefined tensor");
    return t.node_;
  }
  static Tensor wrap(NodePtr node) { return Tensor(std::move(node)); }
};

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

NodePtr make_node(Shape shape) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_size(shape), Scalar(0));
  n->shape = std::move(shape);
  return n;
}

const NodePtr& N(const Tensor& t) { return TensorAccess::node(t); }

// Records `out` when any input participates in differentiation.
template <typename Fn>
Tensor finish(NodePtr out, std::initializer_list<const NodePtr*> inputs, Fn&& backward_fn) {
  Tape* tape = g_active_tape;
  if (tape) {
    bool any = false;
    for (const NodePtr* in : inputs) {
      const Node& n = **in;
      if (n.tape_id >= 0 && n.tape != tape) {
        throw TapeError("input tensor was recorded on a different tape");
      }
      any = any || n.tracked();
    }
    if (any) tape->push({out, std::forward<Fn>(backward_fn)});
  }
  return TensorAccess::wrap(std::move(out));
}

template <typename Fn>
Tensor finish_many(NodePtr out, const std::vector<NodePtr>& inputs, Fn&& backward_fn) {
  Tape* tape = g_active_tape;
  if (tape) {
    bool any = false;
    for (const NodePtr& n : inputs) {
      if (n->tape_id >= 0 && n->tape != tape) {
        throw TapeError("input tensor was recorded on a different tape");
      }
      any = any || n->tracked();
    }
    if (any) tape->push({out, std::forward<Fn>(backward_fn)});
  }
  return TensorAccess::wrap(std::move(out));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename F, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const NodePtr& na = N(a);
  const NodePtr& nb = N(b);
  Shape out_shape;
  if (na->shape == nb->shape || is_suffix(nb->shape, na->shape)) {
    out_shape = na->shape;
  } else if (is_suffix(na->shape, nb->shape)) {
    out_shape = nb->shape;
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(na->shape) + " and " +
                     shape_str(nb->shape));
  }
  auto out = make_node(out_shape);
  const std::size_t n = out->value.size();
  const std::size_t sa = na->value.size();
  const std::size_t sb = nb->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = f(na->value[i % sa], nb->value[i % sb]);
  Node* o = out.get();
  return finish(out, {&na, &nb}, [o, na, nb, da, db, n, sa, sb] {
    const auto& g = o->grad;
    if (na->tracked()) {
      auto& ga = na->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        ga[i % sa] += g[i] * da(na->value[i % sa], nb->value[i % sb], o->value[i]);
    }
    if (nb->tracked()) {
      auto& gb = nb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        gb[i % sb] += g[i] * db(na->value[i % sa], nb->value[i % sb], o->value[i]);
    }
  });
}

// df(x, y) is the derivative given input x and output y.
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const NodePtr& nx = N(x);
  auto out = make_node(nx->shape);
  const std::size_t n = out->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = f(nx->value[i]);
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, df, n] {
    auto& gx = nx->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) gx[i] += o->grad[i] * df(nx->value[i], o->value[i]);
  });
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// -- Tensor ----------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  check_shape(shape);
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  check_shape(shape);
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return N(*this)->shape; }
std::size_t Tensor::size() const { return N(*this)->value.size(); }
std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_str(s));
  return s[axis];
}
std::span<const Scalar> Tensor::data() const { return N(*this)->value; }
std::span<Scalar> Tensor::mutable_data() { return N(*this)->value; }

Scalar Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return N(*this)->requires_grad; }
void Tensor::set_requires_grad(bool value) { N(*this)->requires_grad = value; }
bool Tensor::has_grad() const { return !N(*this)->grad.empty(); }
std::span<const Scalar> Tensor::grad() const { return N(*this)->grad; }
void Tensor::zero_grad() { N(*this)->grad.clear(); }
bool Tensor::on_tape() const { return N(*this)->tape_id >= 0; }

Tensor Tensor::detach() const {
  return Tensor(N(*this)->shape, N(*this)->value, false);
}

// -- Tape ------------------------------------------------------------------

Tape::~Tape() { reset(); }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::push(Record record) {
  record.output->tape = this;
  record.output->tape_id = static_cast<std::ptrdiff_t>(records_.size());
  records_.push_back(std::move(record));
}

void Tape::reset() {
  for (auto& r : records_) {
    r.output->tape = nullptr;
    r.output->tape_id = -1;
  }
  records_.clear();
  consumed_ = false;
}

void Tape::backward(const Tensor& root) {
  const NodePtr& r = N(root);
  if (r->tape != this || r->tape_id < 0) {
    throw TapeError("backward on a tensor that is not recorded on this tape");
  }
  if (r->value.size() != 1) {
    throw TapeError("backward root must be scalar, got shape " + shape_str(r->shape));
  }
  if (consumed_) throw TapeError("backward called twice without resetting the tape");
  consumed_ = true;
  r->ensure_grad()[0] = Scalar(1);
  for (auto i = r->tape_id; i >= 0; --i) {
    auto& rec = records_[static_cast<std::size_t>(i)];
    if (rec.output->grad.empty()) continue;
    rec.backward();
  }
}

void backward(const Tensor& root) {
  const NodePtr& r = N(root);
  if (r->tape == nullptr || r->tape_id < 0) {
    throw TapeError("backward on a tape-free tensor");
  }
  r->tape->backward(root);
}

// -- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar, Scalar) { return Scalar(1); },
      [](Scalar, Scalar, Scalar) { return Scalar(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar, Scalar) { return Scalar(1); },
      [](Scalar, Scalar, Scalar) { return Scalar(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Scalar x, Scalar y) { return x * y; },
      [](Scalar, Scalar y, Scalar) { return y; }, [](Scalar x, Scalar, Scalar) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](Scalar x, Scalar y) { return x / y; },
      [](Scalar, Scalar y, Scalar) { return Scalar(1) / y; },
      [](Scalar x, Scalar y, Scalar) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](Scalar v) { return -v; }, [](Scalar, Scalar) { return Scalar(-1); });
}

Tensor scale(const Tensor& x, Scalar factor) {
  return unary(
      x, [factor](Scalar v) { return v * factor; }, [factor](Scalar, Scalar) { return factor; });
}

Tensor add_scalar(const Tensor& x, Scalar offset) {
  return unary(
      x, [offset](Scalar v) { return v + offset; }, [](Scalar, Scalar) { return Scalar(1); });
}

// The subgradient at 0 is taken as 0 so ||v|| at v = 0 stays finite.
Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::sqrt(v); },
      [](Scalar, Scalar y) { return y == Scalar(0) ? Scalar(0) : Scalar(0.5) / y; });
}

Tensor power(const Tensor& x, Scalar exponent) {
  if (exponent == Scalar(2)) {
    return unary(
        x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
  }
  return unary(
      x, [exponent](Scalar v) { return std::pow(v, exponent); },
      [exponent](Scalar v, Scalar) { return exponent * std::pow(v, exponent - Scalar(1)); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return std::abs(v); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); });
}

// tanh approximation, as used by GPT-2.
Tensor gelu(const Tensor& x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar kA = Scalar(0.044715);
  return unary(
      x,
      [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::tanh(kC * (v + kA * v * v * v))); },
      [](Scalar v, Scalar) {
        const Scalar t = std::tanh(kC * (v + kA * v * v * v));
        return Scalar(0.5) * (Scalar(1) + t) +
               Scalar(0.5) * v * (Scalar(1) - t * t) * kC * (Scalar(1) + Scalar(3) * kA * v * v);
      });
}

// -- structural ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const NodePtr& na = N(a);
  const NodePtr& nb = N(b);
  if (na->shape.size() != 2 || nb->shape.size() != 2 || na->shape[1] != nb->shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(na->shape) + " and " +
                     shape_str(nb->shape));
  }
  const std::size_t m = na->shape[0], k = na->shape[1], n = nb->shape[1];
  auto out = make_node({m, n});
  const Scalar* A = na->value.data();
  const Scalar* B = nb->value.data();
  Scalar* C = out->value.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar aip = A[i * k + p];
      if (aip == Scalar(0)) continue;  // keeps masked attention rows exact
      const Scalar* brow = B + p * n;
      Scalar* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  Node* o = out.get();
  return finish(out, {&na, &nb}, [o, na, nb, m, k, n] {
    const Scalar* G = o->grad.data();
    if (na->tracked()) {
      auto& ga = na->ensure_grad();
      const Scalar* B = nb->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Scalar acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (nb->tracked()) {
      auto& gb = nb->ensure_grad();
      const Scalar* A = na->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Scalar aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

Tensor transpose(const Tensor& x) {
  const NodePtr& nx = N(x);
  if (nx->shape.size() != 2) {
    throw ShapeError("transpose: expected rank 2, got " + shape_str(nx->shape));
  }
  const std::size_t r = nx->shape[0], c = nx->shape[1];
  auto out = make_node({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out->value[j * r + i] = nx->value[i * c + j];
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, r, c] {
    auto& gx = nx->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += o->grad[j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  const NodePtr& nx = N(x);
  check_shape(shape);
  if (shape_size(shape) != nx->value.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(nx->shape) + " as " + shape_str(shape));
  }
  auto out = make_node(std::move(shape));
  out->value = nx->value;
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx] {
    auto& gx = nx->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o->grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(N(p));
  const Shape& first = nodes.front()->shape;
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& n : nodes) {
    bool ok = n->shape.size() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) ok = d == axis || n->shape[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " +
                       shape_str(n->shape));
    }
    out_shape[axis] += n->shape[axis];
  }
  auto out = make_node(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& n : nodes) {
    offsets.push_back(offset);
    const std::size_t ext = n->shape[axis];
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(n->value.begin() + static_cast<std::ptrdiff_t>(o * ext * os.inner),
                  ext * os.inner,
                  out->value.begin() +
                      static_cast<std::ptrdiff_t>((o * os.extent + offset) * os.inner));
    }
    offset += ext;
  }
  Node* o = out.get();
  return finish_many(out, nodes, [o, nodes, offsets, os, axis] {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const auto& n = nodes[p];
      if (!n->tracked()) continue;
      auto& g = n->ensure_grad();
      const std::size_t ext = n->shape[axis];
      for (std::size_t q = 0; q < os.outer; ++q) {
        const std::size_t src = (q * os.extent + offsets[p]) * os.inner;
        const std::size_t dst = q * ext * os.inner;
        for (std::size_t i = 0; i < ext * os.inner; ++i) g[dst + i] += o->grad[src + i];
      }
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const NodePtr& nx = N(x);
  if (axis >= nx->shape.size() || begin >= end || end > nx->shape[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " + shape_str(nx->shape));
  }
  Shape out_shape = nx->shape;
  out_shape[axis] = end - begin;
  auto out = make_node(out_shape);
  const AxisSplit s = split_at(nx->shape, axis);
  const std::size_t ext = end - begin;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(nx->value.begin() + static_cast<std::ptrdiff_t>((o * s.extent + begin) * s.inner),
                ext * s.inner, out->value.begin() + static_cast<std::ptrdiff_t>(o * ext * s.inner));
  }
  Node* op = out.get();
  return finish(out, {&nx}, [op, nx, s, begin, ext] {
    auto& g = nx->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t dst = (o * s.extent + begin) * s.inner;
      const std::size_t src = o * ext * s.inner;
      for (std::size_t i = 0; i < ext * s.inner; ++i) g[dst + i] += op->grad[src + i];
    }
  });
}

// -- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const NodePtr& nx = N(x);
  auto out = make_node({1});
  Scalar acc = 0;
  for (Scalar v : nx->value) acc += v;
  out->value[0] = acc;
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx] {
    auto& g = nx->ensure_grad();
    for (auto& v : g) v += o->grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const NodePtr& nx = N(x);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(nx->value.size());
  auto out = make_node({1});
  Scalar acc = 0;
  for (Scalar v : nx->value) acc += v;
  out->value[0] = acc * inv;
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, inv] {
    auto& g = nx->ensure_grad();
    for (auto& v : g) v += o->grad[0] * inv;
  });
}

Tensor sum_last(const Tensor& x) {
  const NodePtr& nx = N(x);
  if (nx->shape.empty()) throw ShapeError("sum_last: rank-0 input");
  Shape out_shape = nx->shape;
  const std::size_t k = out_shape.back();
  out_shape.back() = 1;
  auto out = make_node(out_shape);
  const std::size_t rows = out->value.size();
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar acc = 0;
    for (std::size_t j = 0; j < k; ++j) acc += nx->value[r * k + j];
    out->value[r] = acc;
  }
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, rows, k] {
    auto& g = nx->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += o->grad[r];
  });
}

Tensor softmax(const Tensor& x) {
  const NodePtr& nx = N(x);
  if (nx->shape.empty()) throw ShapeError("softmax: rank-0 input");
  const std::size_t k = nx->shape.back();
  const std::size_t rows = nx->value.size() / k;
  auto out = make_node(nx->shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = nx->value.data() + r * k;
    Scalar* y = out->value.data() + r * k;
    const Scalar mx = *std::max_element(in, in + k);
    Scalar total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < k; ++j) y[j] /= total;
  }
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, rows, k] {
    auto& g = nx->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* y = o->value.data() + r * k;
      const Scalar* gy = o->grad.data() + r * k;
      Scalar dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  const NodePtr& nx = N(x);
  const NodePtr& ng = N(gamma);
  const NodePtr& nb = N(beta);
  if (nx->shape.empty()) throw ShapeError("layer_norm: rank-0 input");
  const std::size_t k = nx->shape.back();
  if (ng->shape != Shape{k} || nb->shape != Shape{k}) {
    throw ShapeError("layer_norm: scale/shift shapes " + shape_str(ng->shape) + ", " +
                     shape_str(nb->shape) + " do not match input " + shape_str(nx->shape));
  }
  const std::size_t rows = nx->value.size() / k;
  auto out = make_node(nx->shape);
  auto xhat = std::make_shared<std::vector<Scalar>>(nx->value.size());
  auto rstd = std::make_shared<std::vector<Scalar>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = nx->value.data() + r * k;
    Scalar mu = 0;
    for (std::size_t j = 0; j < k; ++j) mu += in[j];
    mu /= static_cast<Scalar>(k);
    Scalar var = 0;
    for (std::size_t j = 0; j < k; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<Scalar>(k);
    const Scalar rs = Scalar(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < k; ++j) {
      const Scalar h = (in[j] - mu) * rs;
      (*xhat)[r * k + j] = h;
      out->value[r * k + j] = h * ng->value[j] + nb->value[j];
    }
  }
  Node* o = out.get();
  return finish(out, {&nx, &ng, &nb}, [o, nx, ng, nb, xhat, rstd, rows, k] {
    const auto& gy = o->grad;
    if (ng->tracked() || nb->tracked()) {
      auto& gg = ng->ensure_grad();
      auto& gb = nb->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) {
          gg[j] += gy[r * k + j] * (*xhat)[r * k + j];
          gb[j] += gy[r * k + j];
        }
    }
    if (nx->tracked()) {
      auto& gx = nx->ensure_grad();
      const Scalar inv_k = Scalar(1) / static_cast<Scalar>(k);
      for (std::size_t r = 0; r < rows; ++r) {
        Scalar mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < k; ++j) {
          const Scalar d = gy[r * k + j] * ng->value[j];
          mean_d += d;
          mean_dx += d * (*xhat)[r * k + j];
        }
        mean_d *= inv_k;
        mean_dx *= inv_k;
        for (std::size_t j = 0; j < k; ++j) {
          const Scalar d = gy[r * k + j] * ng->value[j];
          gx[r * k + j] += (*rstd)[r] * (d - mean_d - (*xhat)[r * k + j] * mean_dx);
        }
      }
    }
  });
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, Scalar fill) {
  const NodePtr& nx = N(x);
  if (mask.size() != nx->value.size()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) +
                     " entries does not match " + shape_str(nx->shape));
  }
  auto out = make_node(nx->shape);
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  for (std::size_t i = 0; i < mask.size(); ++i) out->value[i] = mask[i] ? fill : nx->value[i];
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, m] {
    auto& g = nx->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(*m)[i]) g[i] += o->grad[i];
  });
}

Tensor dropout(const Tensor& x, Scalar rate, std::mt19937_64& rng) {
  if (rate <= Scalar(0)) return x;
  if (rate >= Scalar(1)) throw Error("dropout: rate must be < 1");
  const NodePtr& nx = N(x);
  auto out = make_node(nx->shape);
  auto keep = std::make_shared<std::vector<Scalar>>(nx->value.size());
  std::bernoulli_distribution bern(1.0 - static_cast<double>(rate));
  const Scalar s = Scalar(1) / (Scalar(1) - rate);
  for (std::size_t i = 0; i < keep->size(); ++i) {
    (*keep)[i] = bern(rng) ? s : Scalar(0);
    out->value[i] = nx->value[i] * (*keep)[i];
  }
  Node* o = out.get();
  return finish(out, {&nx}, [o, nx, keep] {
    auto& g = nx->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * (*keep)[i];
  });
}

// -- TNSR ------------------------------------------------------------------

namespace {
constexpr std::uint32_t kTnsrVersion = 1;
}

void write_tnsr(std::ostream& out, const Tensor& t) {
  io::write_magic(out, "TNSR");
  io::write_le<std::uint32_t>(out, kTnsrVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::write_le<std::uint64_t>(out, e);
  io::write_le<std::uint32_t>(out, sizeof(Scalar));
  for (Scalar v : t.data()) io::write_le<Scalar>(out, v);
}

Tensor read_tnsr(std::istream& in) {
  io::expect_magic(in, "TNSR");
  const auto version = io::read_le<std::uint32_t>(in);
  if (version != kTnsrVersion) {
    throw VersionError("unsupported TNSR version " + std::to_string(version));
  }
  const auto rank = io::read_le<std::uint32_t>(in);
  if (rank == 0 || rank > 8) throw IoError("TNSR rank out of range: " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(io::read_le<std::uint64_t>(in));
  check_shape(shape);
  const auto width = io::read_le<std::uint32_t>(in);
  std::vector<Scalar> values(shape_size(shape));
  if (width == 8) {
    for (auto& v : values) v = static_cast<Scalar>(io::read_le<double>(in));
  } else if (width == 4) {
    for (auto& v : values) v = static_cast<Scalar>(io::read_le<float>(in));
  } else {
    throw IoError("TNSR scalar width must be 4 or 8, got " + std::to_string(width));
  }
  return Tensor(std::move(shape), std::move(values));
}

void save_tnsr(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_tnsr(out, t);
  if (!out) throw IoError("failed writing " + path);
}

Tensor load_tnsr(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_tnsr(in);
}

}  // namespace tempose::ad
