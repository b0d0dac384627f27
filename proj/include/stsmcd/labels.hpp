#pragma once

#include <cstddef>
#include <vector>

#include "stsmcd/errors.hpp"

namespace stsmcd {

/// Label value excluded from losses and metrics.
inline constexpr int kIgnore = 255;

/// Integer class map of one image, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), data(h * w, fill) {}
  LabelMap(std::size_t h, std::size_t w, std::vector<int> values) : height(h), width(w), data(std::move(values)) {
    if (data.size() != h * w) throw ShapeError("label map data does not match " + std::to_string(h) + "x" + std::to_string(w));
  }

  std::size_t size() const noexcept { return data.size(); }
  int& at(std::size_t i, std::size_t j) { return data[i * width + j]; }
  int at(std::size_t i, std::size_t j) const { return data[i * width + j]; }
  bool same_extent(const LabelMap& o) const { return height == o.height && width == o.width; }
  bool operator==(const LabelMap&) const = default;
};

inline void require_same_extent(const LabelMap& a, const LabelMap& b, const char* what) {
  if (!a.same_extent(b)) {
    throw ShapeError(std::string(what) + ": label maps " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " and " + std::to_string(b.height) + "x" + std::to_string(b.width) + " differ");
  }
}

}  // namespace stsmcd
