#include "softcpt/params.hpp"

namespace softcpt {

Matrix& ParameterSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidArgument("no tensor named '" + name + "'");
  return it->second;
}

const Matrix& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidArgument("no tensor named '" + name + "'");
  return it->second;
}

void ParameterSet::accumulate(const std::string& name, const Matrix& value) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    tensors_.emplace(name, value);
    return;
  }
  if (it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
    throw ShapeError("accumulate '" + name + "': shape mismatch");
  }
  it->second += value;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::size_t ParameterSet::element_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, m] : tensors_) n += static_cast<std::size_t>(m.size());
  return n;
}

bool ParameterSet::all_finite() const {
  for (const auto& [_, m] : tensors_) {
    if (!m.allFinite()) return false;
  }
  return true;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& [name, m] : tensors_) out.set(name, Matrix::Zero(m.rows(), m.cols()));
  return out;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols()) return false;
    if (a->second != b->second) return false;
  }
  return true;
}

}  // namespace softcpt
