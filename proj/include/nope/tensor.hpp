#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nope {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major float32 array.
///
/// The element count always equals the product of the shape. A default
/// constructed tensor is empty (rank 0, no data) and is used as "not yet
/// allocated" by the autodiff graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rows/cols view a tensor as 2-D: all leading dims collapse into rows.
  int rows() const;
  int cols() const;

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  std::span<float> row(int r);
  std::span<const float> row(int r) const;

  Tensor reshaped(Shape shape) const;
  void fill(float v);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);

// Serialization: rank (u32), dims (u32 each), then little-endian f32 data.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in);

}  // namespace nope
