#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "softcpt/tensor.hpp"

namespace softcpt {

/// Named dense tensors in a deterministic (lexicographic) order. Holds
/// learnable parameters, their gradients, and non-learnable buffers alike.
class ParameterSet {
 public:
  using Map = std::map<std::string, Matrix>;

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  void set(const std::string& name, Matrix value) { tensors_[name] = std::move(value); }
  /// Adds `value` into the entry, creating a zero entry of matching shape first.
  void accumulate(const std::string& name, const Matrix& value);

  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return tensors_.size(); }
  bool empty() const noexcept { return tensors_.empty(); }
  /// Total number of scalar entries.
  std::size_t element_count() const noexcept;
  bool all_finite() const;

  ParameterSet zeros_like() const;

  Map::const_iterator begin() const noexcept { return tensors_.begin(); }
  Map::const_iterator end() const noexcept { return tensors_.end(); }
  Map::iterator begin() noexcept { return tensors_.begin(); }
  Map::iterator end() noexcept { return tensors_.end(); }

  bool operator==(const ParameterSet& other) const;

 private:
  Map tensors_;
};

}  // namespace softcpt
