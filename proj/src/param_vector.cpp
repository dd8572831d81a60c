#include "mcl/param_vector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mcl::nn {

std::size_t ParamVector::add(std::string name, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("empty tensor '" + name + "'");
  for (const auto& s : layout_) {
    if (s.name == name) throw std::invalid_argument("duplicate tensor '" + name + "'");
  }
  layout_.push_back(TensorSlot{std::move(name), rows, cols, values_.size()});
  values_.resize(values_.size() + rows * cols, 0.0);
  grads_.resize(values_.size(), 0.0);
  return layout_.size() - 1;
}

std::size_t ParamVector::find(const std::string& name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].name == name) return i;
  }
  throw std::out_of_range("no tensor named '" + name + "'");
}

void ParamVector::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void ParamVector::assign_values(std::span<const double> values) {
  if (values.size() != values_.size()) {
    throw std::invalid_argument("assign_values: length " + std::to_string(values.size()) +
                                " != " + std::to_string(values_.size()));
  }
  std::copy(values.begin(), values.end(), values_.begin());
}

const std::string& ParamVector::name_at(std::size_t i) const {
  auto it = std::upper_bound(layout_.begin(), layout_.end(), i,
                             [](std::size_t idx, const TensorSlot& s) { return idx < s.offset; });
  if (it == layout_.begin() || i >= values_.size()) {
    throw std::out_of_range("flat index " + std::to_string(i) + " out of range");
  }
  return std::prev(it)->name;
}

std::uint64_t ParamVector::value_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values_) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) h = (h ^ b) * 0x100000001b3ULL;
  }
  return h;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace mcl::nn
