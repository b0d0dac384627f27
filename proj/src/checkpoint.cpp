#include "stsmcd/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "stsmcd/binary_io.hpp"
#include "stsmcd/errors.hpp"

namespace stsmcd {

Parameter& ParamStore::add(std::string name, Tensor init) {
  if (find(name)) throw FormatError("duplicate parameter name " + name);
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
  return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("CMCK", 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    if (p->name.size() > 0xFFFF) throw FormatError("parameter name too long: " + p->name.substr(0, 32));
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : p->value.vec()) io::write_le<double>(os, v);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "CMCK") {
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = io::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = io::read_le<std::uint32_t>(is, "checkpoint tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = io::read_le<std::uint16_t>(is, "tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated tensor name");
    const auto rank = io::read_le<std::uint32_t>(is, "tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = io::read_le<std::uint32_t>(is, "tensor dims");
    Tensor value(shape);
    for (double& v : value.vec()) v = io::read_le<double>(is, "payload of " + name);
    out.push_back({std::move(name), std::move(value)});
  }
  return out;
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
  auto tensors = read_checkpoint(path);
  for (auto& p : store) {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == p->name; });
    if (it == tensors.end()) throw FormatError("checkpoint is missing parameter " + p->name);
    if (it->value.shape() != p->value.shape()) {
      throw FormatError("checkpoint shape " + shape_str(it->value.shape()) + " for " + p->name + " does not match " +
                        shape_str(p->value.shape()));
    }
    p->value = std::move(it->value);
  }
}

}  // namespace stsmcd
