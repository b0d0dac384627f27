#include "stsmcd/raster.hpp"

#include <fstream>

#include "stsmcd/binary_io.hpp"

namespace stsmcd::raster {

namespace {

std::ofstream open_out(const std::filesystem::path& path, DType dtype, const Shape& shape) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("CMRD", 4);
  io::write_le<std::uint32_t>(os, kVersion);
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  return os;
}

struct Header {
  DType dtype;
  Shape shape;
};

Header read_header(std::ifstream& is, const std::filesystem::path& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "CMRD") {
    throw FormatError(path.string() + " is not a raster (bad magic)");
  }
  const auto version = io::read_le<std::uint32_t>(is, "raster version");
  if (version != kVersion) throw FormatError(path.string() + ": unsupported raster version " + std::to_string(version));
  const auto tag = io::read_le<std::uint8_t>(is, "raster dtype");
  if (tag > 1) throw FormatError(path.string() + ": unknown dtype tag " + std::to_string(tag));
  const auto rank = io::read_le<std::uint32_t>(is, "raster rank");
  if (rank > 8) throw FormatError(path.string() + ": implausible rank " + std::to_string(rank));
  Header h{static_cast<DType>(tag), Shape(rank)};
  for (auto& d : h.shape) d = io::read_le<std::uint32_t>(is, "raster dims");
  return h;
}

void finish(std::ofstream& os, const std::filesystem::path& path) {
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open raster " + path.string());
  return is;
}

void expect_end(std::ifstream& is, const std::filesystem::path& path) {
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
}

}  // namespace

void save(const std::filesystem::path& path, const Tensor& t) {
  auto os = open_out(path, DType::f64, t.shape());
  for (double v : t.vec()) io::write_le<double>(os, v);
  finish(os, path);
}

void save(const std::filesystem::path& path, const LabelMap& labels) {
  for (int v : labels.data) {
    if (v < 0 || v > 255) throw DomainError("label " + std::to_string(v) + " does not fit a u8 raster");
  }
  auto os = open_out(path, DType::u8, {labels.height, labels.width});
  for (int v : labels.data) io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(v));
  finish(os, path);
}

Tensor load_tensor(const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is, path);
  if (h.dtype != DType::f64) throw FormatError(path.string() + ": expected an f64 raster");
  Tensor t(h.shape);
  const std::string what = "payload of " + path.string() + " (length shorter than dims)";
  for (double& v : t.vec()) v = io::read_le<double>(is, what);
  expect_end(is, path);
  return t;
}

LabelMap load_labels(const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is, path);
  if (h.dtype != DType::u8 || h.shape.size() != 2) throw FormatError(path.string() + ": expected a rank-2 u8 raster");
  LabelMap m(h.shape[0], h.shape[1]);
  const std::string what = "payload of " + path.string() + " (length shorter than dims)";
  for (int& v : m.data) v = io::read_le<std::uint8_t>(is, what);
  expect_end(is, path);
  return m;
}

}  // namespace stsmcd::raster
