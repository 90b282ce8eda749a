#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xdiff/errors.hpp"

namespace xdiff {

using Vec = std::vector<double>;

// Dense row-major 2-D array of doubles. Used for images and sinogram data alike.
class Image {
 public:
  Image() = default;
  Image(int rows, int cols, double fill = 0.0);
  Image(int rows, int cols, Vec data);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  const Vec& vec() const { return data_; }
  Vec& vec() { return data_; }

  double sum() const;
  double max() const;
  double min() const;

  bool same_shape(const Image& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  Vec data_;
};

Image operator+(const Image& a, const Image& b);
Image operator-(const Image& a, const Image& b);
Image operator*(double s, const Image& a);

// Boolean region of interest, row-major, same layout as Image.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0) {}

  std::uint8_t& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::uint8_t operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  std::size_t count() const;
  bool any() const { return count() > 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

void require_same_shape(const Image& a, const Image& b, const std::string& what);
void require_same_shape(const Image& a, const Mask& m, const std::string& what);

// Rounds every element through float32 so that in-memory data equals its on-disk form.
Image round_to_float(const Image& img);

}  // namespace xdiff
