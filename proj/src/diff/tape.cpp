#include "pclab/diff/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace pclab::diff {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Parameter::Parameter(std::string name, Shape shape, std::vector<double> values)
    : name_(std::move(name)), shape_(std::move(shape)), value_(std::move(values)) {
  if (numel(shape_) != value_.size()) {
    throw ShapeError("parameter " + name_ + ": shape " + shape_string(shape_) +
                     " does not match " + std::to_string(value_.size()) + " values");
  }
  grad_.assign(value_.size(), 0.0);
}

Parameter::Parameter(std::string name, Shape shape)
    : Parameter(std::move(name), shape, std::vector<double>(numel(shape), 0.0)) {}

void Parameter::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

const Shape& Tensor::shape() const { return tape_->shape(id_); }
std::span<const double> Tensor::values() const { return tape_->value(id_); }
std::size_t Tensor::size() const { return tape_->value(id_).size(); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return values()[0];
}

Tape& Tensor::tape() const {
  if (!tape_) throw std::logic_error("tensor is not bound to a tape");
  return *tape_;
}

Tensor Tape::push(Record record) {
  records_.push_back(std::move(record));
  return Tensor(this, records_.size() - 1);
}

void Tape::check_finite(const Record& r) {
  for (double v : r.value) {
    if (!std::isfinite(v)) {
      throw NumericalError("non-finite value in forward pass (shape " + shape_string(r.shape) +
                           ")");
    }
  }
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("constant: shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  Record r;
  r.shape = std::move(shape);
  r.value = std::move(values);
  check_finite(r);
  return push(std::move(r));
}

Tensor Tape::constant(Shape shape, double fill) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, fill));
}

Tensor Tape::param(Parameter& p) {
  Record r;
  r.shape = p.shape();
  r.value = p.value();
  r.requires_grad = p.requires_grad;
  r.param = &p;
  r.forward = [](Tape& t, std::size_t self) {
    t.records_[self].value = t.records_[self].param->value();
  };
  check_finite(r);
  return push(std::move(r));
}

Tensor Tape::record(Shape shape, std::vector<std::size_t> inputs, ForwardFn forward,
                    BackwardFn backward) {
  Record r;
  r.value.assign(numel(shape), 0.0);
  r.shape = std::move(shape);
  for (auto in : inputs) r.requires_grad = r.requires_grad || records_[in].requires_grad;
  r.inputs = std::move(inputs);
  r.forward = std::move(forward);
  r.backward = std::move(backward);
  Tensor out = push(std::move(r));
  records_[out.id()].forward(*this, out.id());
  check_finite(records_[out.id()]);
  return out;
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& r = records_[id];
  if (r.grad.empty()) r.grad.assign(r.value.size(), 0.0);
  return r.grad;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw std::logic_error("backward: loss belongs to another tape");
  if (records_[loss.id()].value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  }
  for (auto& r : records_) r.grad.clear();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& r = records_[i];
    if (!r.requires_grad || r.grad.empty()) continue;
    if (r.param) {
      auto& g = r.param->grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += r.grad[k];
    } else if (r.backward) {
      r.backward(*this, i);
    }
  }
}

bool Tape::replay() {
  bool identical = true;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    auto& r = records_[i];
    if (!r.forward) continue;
    std::vector<double> before = r.value;
    r.forward(*this, i);
    if (before.size() != r.value.size() ||
        std::memcmp(before.data(), r.value.data(), before.size() * sizeof(double)) != 0) {
      identical = false;
    }
  }
  return identical;
}

}  // namespace pclab::diff
