#include "xdiff/image.hpp"

#include <algorithm>
#include <numeric>

namespace xdiff {

Image::Image(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
  if (rows < 0 || cols < 0) throw ShapeError("negative image dimensions");
}

Image::Image(int rows, int cols, Vec data) : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows < 0 || cols < 0 || data_.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("image data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

double Image::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Image::max() const {
  return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end());
}

double Image::min() const {
  return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end());
}

Image operator+(const Image& a, const Image& b) {
  require_same_shape(a, b, "image addition");
  Image out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] += b.vec()[i];
  return out;
}

Image operator-(const Image& a, const Image& b) {
  require_same_shape(a, b, "image subtraction");
  Image out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] -= b.vec()[i];
  return out;
}

Image operator*(double s, const Image& a) {
  Image out = a;
  for (double& v : out.vec()) v *= s;
  return out;
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

void require_same_shape(const Image& a, const Image& b, const std::string& what) {
  if (!a.same_shape(b)) {
    throw ShapeError(what + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

void require_same_shape(const Image& a, const Mask& m, const std::string& what) {
  if (a.rows() != m.rows || a.cols() != m.cols) {
    throw ShapeError(what + ": mask shape does not match image");
  }
}

Image round_to_float(const Image& img) {
  Image out = img;
  for (double& v : out.vec()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace xdiff
