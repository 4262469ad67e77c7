#include "asr/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "asr/errors.hpp"

namespace asr::nd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
  st_->data.assign(numel(shape_), 0.0);
  st_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
  if (values.size() != numel(shape_)) {
    throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape_));
  }
  st_->data.assign(values.begin(), values.end());
  st_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.st_->data) v = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  return Tensor({}, std::vector<double>{value});
}

Tensor Tensor::uninitialized(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.st_ = std::make_shared<Storage>();
  t.st_->data.resize(numel(t.shape_));  // default-inserted: no fill
  return t;
}

std::size_t Tensor::size() const { return st_ ? st_->data.size() : 0; }

double* Tensor::data() { return st_->data.data(); }
const double* Tensor::data() const { return st_->data.data(); }

std::span<double> Tensor::values() { return {st_->data.data(), st_->data.size()}; }
std::span<const double> Tensor::values() const {
  return {st_->data.data(), st_->data.size()};
}

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!st_) throw std::logic_error("set_requires_grad on undefined tensor");
  st_->requires_grad = on;
  if (!on) st_->grad.clear();
  return *this;
}

double* Tensor::grad() {
  if (!requires_grad()) {
    throw std::logic_error("grad() on tensor without requires_grad");
  }
  if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
  return st_->grad.data();
}

std::span<double> Tensor::grad_values() {
  return {grad(), st_->data.size()};
}

const double* Tensor::grad_if() const {
  if (!st_ || st_->grad.empty()) return nullptr;
  return st_->grad.data();
}

bool Tensor::has_grad() const { return st_ && !st_->grad.empty(); }

void Tensor::zero_grad() {
  if (st_ && !st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> contribution) {
  if (contribution.size() != st_->data.size()) {
    throw std::invalid_argument("accumulate_grad: size mismatch");
  }
  double* g = grad();
  for (std::size_t i = 0; i < contribution.size(); ++i) g[i] += contribution[i];
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::logic_error("item() on tensor of size " + std::to_string(size()));
  }
  return st_->data[0];
}

double& Tensor::at(std::size_t i) { return st_->data[i]; }
double& Tensor::at(std::size_t i, std::size_t j) {
  return st_->data[i * shape_[1] + j];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return st_->data[(i * shape_[1] + j) * shape_[2] + k];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
  return st_->data[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
double Tensor::at(std::size_t i) const { return st_->data[i]; }
double Tensor::at(std::size_t i, std::size_t j) const {
  return st_->data[i * shape_[1] + j];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return st_->data[(i * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k,
                  std::size_t l) const {
  return st_->data[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw std::invalid_argument("reshaped: " + shape_str(shape_) + " -> " +
                                shape_str(new_shape) + " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.st_ = st_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.st_ = std::make_shared<Storage>();
  t.st_->data = st_->data;
  return t;
}

namespace {
bool g_finite_checks = true;
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

void ensure_finite(const Tensor& t, std::string_view op) {
  if (!g_finite_checks) return;
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

void Graph::record(std::string op, std::function<void()> backward_step) {
  if (consumed_) {
    throw std::logic_error("Graph::record after backward");
  }
  ops_.push_back({std::move(op), std::move(backward_step)});
}

void Graph::backward(Tensor& loss) {
  if (consumed_) {
    throw std::logic_error("Graph::backward called twice");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss does not require grad");
  }
  consumed_ = true;
  loss.grad()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->step();
    it->step = nullptr;  // release captured activations as we go
  }
  ops_.clear();
}

}  // namespace asr::nd
