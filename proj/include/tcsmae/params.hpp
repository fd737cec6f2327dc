#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "tcsmae/tensor.hpp"

namespace tcsmae {

struct NamedParameter {
  std::string name;
  ad::Tensor tensor;
};

/// Ordered list of named leaf tensors. Order is part of the checkpoint format.
class ParameterSet {
 public:
  void add(std::string name, ad::Tensor t) {
    require(t.requires_grad() && t.is_leaf(), "ParameterSet: '" + name + "' is not a trainable leaf");
    require(!find(name), "ParameterSet: duplicate name '" + name + "'");
    items_.push_back({std::move(name), std::move(t)});
  }
  void append(const ParameterSet& other) {
    for (const auto& p : other) add(p.name, p.tensor);
  }

  const NamedParameter* find(const std::string& name) const {
    auto it = std::find_if(items_.begin(), items_.end(), [&](const auto& p) { return p.name == name; });
    return it == items_.end() ? nullptr : &*it;
  }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }
  std::vector<NamedParameter>::const_iterator begin() const { return items_.begin(); }
  std::vector<NamedParameter>::const_iterator end() const { return items_.end(); }
  std::vector<NamedParameter>::iterator begin() { return items_.begin(); }
  std::vector<NamedParameter>::iterator end() { return items_.end(); }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter> items_;
};

}  // namespace tcsmae
