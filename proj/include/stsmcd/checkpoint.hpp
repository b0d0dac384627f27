#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stsmcd/autodiff.hpp"

namespace stsmcd {

/// Owns named parameters with stable addresses, in registration order.
class ParamStore {
 public:
  Parameter& add(std::string name, Tensor init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const;
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout: "CMCK", u32 version, u32 count, then per tensor
/// u16 name length + UTF-8 name, u32 rank, u32 dims, f64 payload (little endian).
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Tensor value;
};
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into matching parameters. Every parameter must be
/// present with the same shape.
void load_checkpoint(ParamStore& store, const std::filesystem::path& path);

}  // namespace stsmcd
