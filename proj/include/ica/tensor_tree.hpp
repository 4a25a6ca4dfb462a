#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ica/error.hpp"

namespace ica {

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Ordered list of named tensors packed into one flat buffer.
class TensorLayout {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    TensorSpec spec{std::move(name), std::move(shape), total_, n};
    total_ += n;
    tensors_.push_back(std::move(spec));
    return tensors_.back().offset;
  }

  const std::vector<TensorSpec>& tensors() const noexcept { return tensors_; }
  std::size_t total() const noexcept { return total_; }

  const TensorSpec& find(const std::string& name) const {
    auto it = std::find_if(tensors_.begin(), tensors_.end(), [&](const TensorSpec& t) { return t.name == name; });
    if (it == tensors_.end()) throw InvalidArgument("no tensor named " + name);
    return *it;
  }

  bool same_shapes(const TensorLayout& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name != other.tensors_[i].name || tensors_[i].shape != other.tensors_[i].shape) return false;
    }
    return true;
  }

 private:
  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
};

/// A flat buffer of doubles interpreted through a shared layout. The tag keeps
/// parameters and gradients from being mixed up at compile time.
template <class Tag>
class TensorTree {
 public:
  TensorTree() = default;
  explicit TensorTree(std::shared_ptr<const TensorLayout> layout)
      : layout_(std::move(layout)), values_(layout_->total(), 0.0) {}

  const TensorLayout& layout() const { return *layout_; }
  const std::shared_ptr<const TensorLayout>& shared_layout() const noexcept { return layout_; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  std::span<double> tensor(const std::string& name) {
    const auto& t = layout_->find(name);
    return std::span<double>(values_).subspan(t.offset, t.size);
  }
  std::span<const double> tensor(const std::string& name) const {
    const auto& t = layout_->find(name);
    return std::span<const double>(values_).subspan(t.offset, t.size);
  }

  template <class OtherTag>
  bool congruent(const TensorTree<OtherTag>& other) const {
    return layout_ && other.shared_layout() &&
           (layout_ == other.shared_layout() || layout_->same_shapes(other.layout()));
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  friend bool operator==(const TensorTree& a, const TensorTree& b) {
    return a.congruent(b) && a.values_ == b.values_;
  }

 private:
  std::shared_ptr<const TensorLayout> layout_;
  std::vector<double> values_;
};

struct GradientTag;
using Gradients = TensorTree<GradientTag>;

template <class Tag>
Gradients zero_gradients_like(const TensorTree<Tag>& t) {
  return Gradients(t.shared_layout());
}

}  // namespace ica
