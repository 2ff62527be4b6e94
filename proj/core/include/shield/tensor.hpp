#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "shield/errors.hpp"
#include "shield/rng.hpp"

namespace shield {

// Dense row-major tensor of doubles. Rank 1 or 2 is all the models need.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> values;

  Tensor() = default;

  explicit Tensor(std::vector<size_t> shp, double fill = 0.0) : shape(std::move(shp)) {
    values.assign(numel(shape), fill);
  }

  Tensor(std::vector<size_t> shp, std::vector<double> vals)
      : shape(std::move(shp)), values(std::move(vals)) {
    if (values.size() != numel(shape)) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    }
  }

  static size_t numel(const std::vector<size_t>& shp) {
    size_t n = 1;
    for (size_t d : shp) n *= d;
    return n;
  }

  static std::string shape_str(const std::vector<size_t>& shp) {
    std::string s = "[";
    for (size_t i = 0; i < shp.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(shp[i]);
    }
    return s + "]";
  }

  size_t size() const { return values.size(); }
  size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

  double& at(size_t r, size_t c) { return values[r * shape[1] + c]; }
  double at(size_t r, size_t c) const { return values[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  // U(-1/sqrt(fan_in), +1/sqrt(fan_in)), the init used for every dense layer.
  static Tensor uniform_init(std::vector<size_t> shp, size_t fan_in, Rng& rng) {
    Tensor t(std::move(shp));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    for (double& v : t.values) v = rng.uniform(-bound, bound);
    return t;
  }
};

}  // namespace shield
