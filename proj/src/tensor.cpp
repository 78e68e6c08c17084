#include "rcc/tensor.hpp"

#include <atomic>
#include <sstream>
#include <stdexcept>

namespace rcc {

namespace {

thread_local std::vector<Tape*> g_tape_stack;
std::atomic<uint64_t> g_pass_counter{0};
thread_local uint64_t g_current_pass = 0;

}  // namespace

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

static std::shared_ptr<TensorImpl> make_impl(const Shape& s) {
  for (int64_t d : s)
    check(d >= 0, "tensor dims must be non-negative, got " + shape_str(s));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->data.assign(static_cast<size_t>(shape_numel(s)), 0.0);
  return impl;
}

Tensor Tensor::zeros(const Shape& s) { return Tensor(make_impl(s)); }

Tensor Tensor::ones(const Shape& s) { return full(s, 1.0); }

Tensor Tensor::full(const Shape& s, double v) {
  auto impl = make_impl(s);
  std::fill(impl->data.begin(), impl->data.end(), v);
  return Tensor(impl);
}

Tensor Tensor::scalar(double v) { return full({}, v); }

Tensor Tensor::from_data(const Shape& s, std::vector<double> v) {
  check(static_cast<int64_t>(v.size()) == shape_numel(s),
        "from_data: " + std::to_string(v.size()) +
            " values do not fill shape " + shape_str(s));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->data = std::move(v);
  return Tensor(impl);
}

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev, double mean) {
  auto impl = make_impl(s);
  for (auto& x : impl->data) x = rng.normal(mean, stddev);
  return Tensor(impl);
}

Tensor Tensor::rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
  auto impl = make_impl(s);
  for (auto& x : impl->data) x = rng.uniform(lo, hi);
  return Tensor(impl);
}

const Shape& Tensor::shape() const {
  check(defined(), "use of undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  check(axis >= 0 && axis < n, "dim(): axis out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

int64_t Tensor::numel() const {
  check(defined(), "use of undefined tensor");
  return impl_->numel();
}

double* Tensor::data() {
  check(defined(), "use of undefined tensor");
  return impl_->data.data();
}

const double* Tensor::data() const {
  check(defined(), "use of undefined tensor");
  return impl_->data.data();
}

double Tensor::item() const {
  check(numel() == 1, "item(): tensor " + shape_str(shape()) + " is not scalar");
  return impl_->data[0];
}

double Tensor::at(const std::vector<int64_t>& idx) const {
  check(idx.size() == shape().size(),
        "at(): index rank mismatch for " + shape_str(shape()));
  const auto st = strides_of(impl_->shape);
  int64_t off = 0;
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < impl_->shape[i],
          "at(): index out of range for " + shape_str(shape()));
    off += idx[i] * st[i];
  }
  return impl_->data[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  check(defined(), "use of undefined tensor");
  check(!impl_->is_node_output,
        "requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::requires_grad() const {
  return defined() && impl_->requires_grad;
}

bool Tensor::has_grad() const { return defined() && impl_->grad != nullptr; }

Tensor Tensor::grad() const {
  check(defined(), "use of undefined tensor");
  if (!impl_->grad) return Tensor::zeros(impl_->shape);
  return Tensor::from_data(impl_->shape, *impl_->grad);
}

double* Tensor::grad_data() {
  check(defined(), "use of undefined tensor");
  if (!impl_->grad)
    impl_->grad = std::make_unique<std::vector<double>>(impl_->data.size(), 0.0);
  return impl_->grad->data();
}

void Tensor::zero_grad() {
  if (defined() && impl_->grad)
    std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::detach() const {
  check(defined(), "use of undefined tensor");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(impl);
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this)
    g_tape_stack.pop_back();
}

Tape* Tape::active() {
  return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

void Tape::record(std::shared_ptr<TensorImpl> out, std::function<void()> fn) {
  out->is_node_output = true;
  nodes_.push_back(Node{std::move(out), std::move(fn)});
}

double* Tape::grad_sink(const std::shared_ptr<TensorImpl>& t) {
  if (t->is_node_output) {
    if (t->adj_pass != g_current_pass) {
      t->adj.assign(t->data.size(), 0.0);
      t->adj_pass = g_current_pass;
    }
    return t->adj.data();
  }
  if (t->requires_grad) {
    if (!t->grad)
      t->grad = std::make_unique<std::vector<double>>(t->data.size(), 0.0);
    return t->grad->data();
  }
  return nullptr;
}

void Tape::backward(const Tensor& root) {
  check(root.defined(), "backward: undefined root");
  check(root.numel() == 1,
        "backward: root must be scalar, got " + shape_str(root.shape()));
  g_current_pass = ++g_pass_counter;
  double* seed = grad_sink(root.impl());
  if (seed == nullptr) return;  // root is a constant
  seed[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->adj_pass == g_current_pass) it->fn();
  }
}

}  // namespace rcc
