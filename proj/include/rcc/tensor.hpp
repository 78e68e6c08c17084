#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rcc/rng.hpp"

namespace rcc {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);
std::vector<int64_t> strides_of(const Shape& s);

// Throws std::invalid_argument when cond is false.
void check(bool cond, const std::string& msg);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;

  // Persistent gradient, leaves only. Allocated on first write, then
  // accumulated into across backward passes until zero_grad().
  std::unique_ptr<std::vector<double>> grad;
  bool requires_grad = false;

  // True when produced by a recorded op; such tensors carry adjoints in `adj`
  // during a backward pass instead of a persistent grad.
  bool is_node_output = false;

  // Pass-local adjoint scratch. Valid only while adj_pass matches the pass
  // that stamped it; stale buffers are re-zeroed on first touch of a new pass.
  std::vector<double> adj;
  uint64_t adj_pass = 0;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& s);
  static Tensor ones(const Shape& s);
  static Tensor full(const Shape& s, double v);
  static Tensor scalar(double v);
  static Tensor from_data(const Shape& s, std::vector<double> v);
  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0,
                      double mean = 0.0);
  static Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;  // negative axes count from the back
  int64_t numel() const;

  double* data();
  const double* data() const;
  double item() const;  // scalar tensors only
  double at(const std::vector<int64_t>& idx) const;

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const;
  bool has_grad() const;
  Tensor grad() const;  // zeros when no gradient has been written yet
  double* grad_data();  // allocates (zeroed) on demand
  void zero_grad();

  // Copy with no autodiff history.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Define-by-run gradient tape. Construct one around the differentiable region;
// ops record themselves on the innermost live tape. backward() may be called
// repeatedly: leaf .grad accumulates across calls.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // root must be scalar. Walks recorded nodes in reverse order; only nodes
  // whose output received an adjoint this pass fire.
  void backward(const Tensor& root);

  size_t node_count() const { return nodes_.size(); }

  static Tape* active();
  void record(std::shared_ptr<TensorImpl> out, std::function<void()> fn);

  // Accumulation target for an op input during backward: the persistent grad
  // for requires_grad leaves, the pass-local adjoint for node outputs, or
  // nullptr when the tensor needs no gradient (caller skips the work).
  static double* grad_sink(const std::shared_ptr<TensorImpl>& t);

  // Adjoint of a node output inside its backward fn (stamped by grad_sink).
  static const double* node_adj(const TensorImpl* t) { return t->adj.data(); }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

}  // namespace rcc
