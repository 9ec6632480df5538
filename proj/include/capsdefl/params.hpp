#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "capsdefl/error.hpp"
#include "capsdefl/tensor.hpp"

namespace capsdefl {

// Ordered, uniquely named parameter tensors.
template <typename T>
class ParameterStore {
 public:
  void add(std::string name, BasicTensor<T> tensor) {
    for (const auto& n : names_)
      if (n == name) throw ConfigError("parameter `" + name + "` registered twice");
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(tensor));
  }

  const BasicTensor<T>& get(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return tensors_[i];
    throw UsageError("unknown parameter `" + std::string(name) + "`");
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<BasicTensor<T>>& tensors() { return tensors_; }
  const std::vector<BasicTensor<T>>& tensors() const { return tensors_; }

  void set_trainable(bool on) {
    for (auto& t : tensors_) {
      t.set_requires_grad(on);
      t.zero_grad();
    }
  }
  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  template <typename U>
  ParameterStore<U> cast(bool requires_grad = false) const {
    ParameterStore<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i)
      out.add(names_[i], tensors_[i].template cast<U>(requires_grad));
    return out;
  }

  // Independent copy (no shared storage).
  ParameterStore clone() const { return cast<T>(false); }

 private:
  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> tensors_;
};

}  // namespace capsdefl
