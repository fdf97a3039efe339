#pragma once

// Dense double-precision tensors recorded on a reverse-mode tape.
//
// A Tape owns every value produced during one forward pass. Tensors are cheap
// handles (tape pointer + record id) and are immutable once recorded.
// Parameters live outside the tape so they survive across steps; the tape
// reads them when they are bound with Tape::param and accumulates their
// gradients during backward().

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pclab::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a forward pass produces NaN or Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Shape shape, std::vector<double> values);
  Parameter(std::string name, Shape shape);  // zero-filled

  const std::string& name() const { return name_; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return value_.size(); }

  std::vector<double>& value() { return value_; }
  const std::vector<double>& value() const { return value_; }
  std::vector<double>& grad() { return grad_; }
  const std::vector<double>& grad() const { return grad_; }

  void zero_grad();

  // Frozen parameters are bound as constants and receive no gradient.
  bool requires_grad = true;

 private:
  std::string name_;
  Shape shape_;
  std::vector<double> value_;
  std::vector<double> grad_;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::span<const double> values() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  double item() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

  Tape& tape() const;
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Computes the record's value from its inputs (buffer already sized).
  using ForwardFn = std::function<void(Tape&, std::size_t self)>;
  // Accumulates the record's gradient into its inputs' gradients.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor constant(Shape shape, double fill);
  Tensor param(Parameter& p);

  // Records a new value. The forward function runs immediately; the result
  // must be finite or NumericalError is thrown.
  Tensor record(Shape shape, std::vector<std::size_t> inputs, ForwardFn forward,
                BackwardFn backward);

  // Reverse sweep from a scalar loss. Parameter gradients are accumulated
  // (not overwritten) so several losses may share one optimizer step.
  void backward(const Tensor& loss);

  // Recomputes every record in order and reports whether all values are
  // bit-identical to the recorded ones.
  bool replay();

  std::size_t size() const { return records_.size(); }

  // Accessors for op implementations.
  const Shape& shape(std::size_t id) const { return records_[id].shape; }
  std::span<const double> value(std::size_t id) const { return records_[id].value; }
  std::vector<double>& mutable_value(std::size_t id) { return records_[id].value; }
  std::size_t input(std::size_t id, std::size_t k) const { return records_[id].inputs[k]; }
  bool requires_grad(std::size_t id) const { return records_[id].requires_grad; }
  std::span<const double> grad(std::size_t id) const { return records_[id].grad; }
  // Gradient buffer of a record, allocated (zeroed) on first access.
  std::vector<double>& grad_buffer(std::size_t id);

  // Gradient of the last backward() w.r.t. a recorded tensor; empty if none.
  std::span<const double> grad(const Tensor& t) const { return records_[t.id()].grad; }

 private:
  struct Record {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Tensor push(Record record);
  static void check_finite(const Record& r);

  std::vector<Record> records_;
};

}  // namespace pclab::diff
