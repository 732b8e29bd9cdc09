#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// Ops record onto the thread's active Tape (see Tape::Scope) whenever at
// least one input is a requires-grad leaf or was itself recorded. With no
// active tape every op is a plain forward computation.
//
// Broadcasting is limited to the leading axes: in a binary elementwise op
// the smaller operand's shape must equal a suffix of the larger one's.
// slice and reshape always copy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tempose/errors.hpp"

namespace tempose::ad {

#ifdef TEMPOSE_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until materialized
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::ptrdiff_t tape_id = -1;

  bool tracked() const { return requires_grad || tape_id >= 0; }
  std::vector<Scalar>& ensure_grad();
};
}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const Scalar> data() const;
  // Direct mutation bypasses the tape; meant for optimizers and loaders.
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const Scalar> grad() const;
  void zero_grad();

  bool on_tape() const;
  bool defined() const { return static_cast<bool>(node_); }

  // Value copy with no tape history and no gradient.
  Tensor detach() const;

  // Identity of the underlying storage, for tests and bookkeeping.
  const void* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node);
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

// Append-only record of operations. Insertion order is a topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Makes `tape` the active tape for the current thread until destroyed.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  // Drops all records. Tensors recorded earlier become tape-free.
  void reset();

  // Reverse sweep from a scalar root recorded on this tape.
  void backward(const Tensor& root);

  struct Record {
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;
  };
  void push(Record record);

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

// Backward through the tape the root was recorded on.
void backward(const Tensor& root);

// -- elementwise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, Scalar factor);
Tensor add_scalar(const Tensor& x, Scalar offset);
Tensor sqrt(const Tensor& x);
Tensor power(const Tensor& x, Scalar exponent);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor gelu(const Tensor& x);

// -- structural ----------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& x);                 // rank 2
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// -- reductions and normalizers -------------------------------------------
Tensor sum(const Tensor& x);       // -> shape {1}
Tensor mean(const Tensor& x);      // -> shape {1}
Tensor sum_last(const Tensor& x);  // keeps a trailing axis of extent 1
Tensor softmax(const Tensor& x);   // last axis, max-subtracted
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps = Scalar(1e-5));

// Sets entries where mask != 0 to `fill` (default -inf). The mask has the
// same number of elements as x; filled entries receive no gradient.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask,
                   Scalar fill = -std::numeric_limits<Scalar>::infinity());

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, Scalar rate, std::mt19937_64& rng);

// -- serialization ("TNSR" chunk) -----------------------------------------
void write_tnsr(std::ostream& out, const Tensor& t);
Tensor read_tnsr(std::istream& in);
void save_tnsr(const std::string& path, const Tensor& t);
Tensor load_tnsr(const std::string& path);

}  // namespace tempose::ad
