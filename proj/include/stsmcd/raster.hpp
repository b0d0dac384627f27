#pragma once

// Raster files: "CMRD", u32 version, u8 dtype (0 = f64, 1 = u8), u32 rank,
// u32 dims, then the payload, all little endian.

#include <cstdint>
#include <filesystem>

#include "stsmcd/labels.hpp"
#include "stsmcd/tensor.hpp"

namespace stsmcd::raster {

inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f64 = 0, u8 = 1 };

void save(const std::filesystem::path& path, const Tensor& t);
/// Rank-2 u8 raster; every label must fit in 0..255.
void save(const std::filesystem::path& path, const LabelMap& labels);

Tensor load_tensor(const std::filesystem::path& path);
LabelMap load_labels(const std::filesystem::path& path);

}  // namespace stsmcd::raster
