#pragma once
// Dense float32 tensor with value semantics over a shared buffer. All math in
// this codebase is float32; shapes are row-major with the last axis contiguous.

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dppn/runtime.hpp"

namespace dppn {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

namespace detail {

// Recycles value and gradient buffers across training steps. A tape allocates
// the same buffer sizes every step; returning the vectors here on tensor
// destruction replaces per-step malloc + page-fault churn with plain reuse.
// Single-threaded by design, matching the one-tape-per-run contract.
class BufferPool {
 public:
  // Contents of a recycled buffer are stale; callers that need zeros clear it.
  std::vector<float> take(size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      std::vector<float> v = std::move(it->second.back());
      it->second.pop_back();
      held_ -= n;
      return v;
    }
    return std::vector<float>(n);
  }

  void give(std::vector<float>&& v) {
    const size_t n = v.size();
    if (n == 0) return;
    if (held_ + n > kMaxHeldFloats) return;  // let odd sizes fall to the heap
    auto& bucket = free_[n];
    if (bucket.size() >= 32) return;
    bucket.push_back(std::move(v));
    held_ += n;
  }

  static BufferPool& instance() {
    static BufferPool p;
    return p;
  }

 private:
  static constexpr size_t kMaxHeldFloats = size_t(384) << 20;  // 1.5 GB of floats
  std::unordered_map<size_t, std::vector<std::vector<float>>> free_;
  size_t held_ = 0;
};

}  // namespace detail

struct TensorImpl {
  Shape shape;
  std::vector<float> v;
  std::vector<float> g;  // allocated lazily on first gradient accumulation
  bool requires_grad = false;

  ~TensorImpl() {
    detail::BufferPool::instance().give(std::move(v));
    detail::BufferPool::instance().give(std::move(g));
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t = uninit(std::move(shape), requires_grad);
    std::fill(t.impl_->v.begin(), t.impl_->v.end(), 0.0f);
    return t;
  }

  // Allocation without clearing, for outputs every element of which the op
  // overwrites before anyone reads. Recycled buffers carry stale data, so
  // reading before writing is a real bug, not just slow.
  static Tensor uninit(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->v = detail::BufferPool::instance().take(static_cast<size_t>(shape_numel(t.impl_->shape)));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.impl_->v) x = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(t.impl_->shape))
      throw std::invalid_argument("Tensor::from: value count does not match shape");
    t.impl_->v = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return shape_numel(impl_->shape); }

  float* data() { return impl_->v.data(); }
  const float* data() const { return impl_->v.data(); }
  std::vector<float>& values() { return impl_->v; }
  const std::vector<float>& values() const { return impl_->v; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return !impl_->g.empty(); }
  // Gradient buffer, zero-initialized on first touch.
  float* grad() {
    if (impl_->g.empty()) {
      impl_->g = detail::BufferPool::instance().take(impl_->v.size());
      std::fill(impl_->g.begin(), impl_->g.end(), 0.0f);
    }
    return impl_->g.data();
  }
  const std::vector<float>& grad_vec() const { return impl_->g; }
  void zero_grad() {
    if (!impl_->g.empty()) std::fill(impl_->g.begin(), impl_->g.end(), 0.0f);
  }
  void drop_grad() { impl_->g.clear(); }

  // Multi-index accessor for tests and small constructions; row-major.
  float& at(std::initializer_list<int> idx) {
    int64_t off = 0;
    size_t k = 0;
    for (int i : idx) {
      off = off * impl_->shape[k] + i;
      ++k;
    }
    assert(k == impl_->shape.size());
    return impl_->v[static_cast<size_t>(off)];
  }
  float at(std::initializer_list<int> idx) const { return const_cast<Tensor*>(this)->at(idx); }

  // Identity of the underlying buffer; used by the tape and the optimizer.
  const TensorImpl* id() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

}  // namespace dppn
