#include "protoalign/ntsr.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace protoalign {

static_assert(std::endian::native == std::endian::little,
              "NTSR I/O assumes a little-endian host");

namespace {

void write_header(std::ofstream& f, NtsrDtype dtype, const Shape& shape) {
  const char magic[4] = {'N', 'T', 'S', 'R'};
  f.write(magic, 4);
  const uint8_t version = 0x01;
  f.write(reinterpret_cast<const char*>(&version), 1);
  const uint8_t dt = uint8_t(dtype);
  f.write(reinterpret_cast<const char*>(&dt), 1);
  const uint32_t rank = uint32_t(shape.size());
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (int64_t e : shape) {
    require(e > 0 && e <= INT64_C(0xffffffff), ErrKind::Io, "ntsr: extent out of range");
    const uint32_t ext = uint32_t(e);
    f.write(reinterpret_cast<const char*>(&ext), 4);
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrKind::Io, "ntsr: cannot open for writing: " + path);
  return f;
}

}  // namespace

void write_ntsr_f64(const std::string& path, const Shape& shape, std::span<const double> data) {
  require(int64_t(data.size()) == numel(shape), ErrKind::Shape,
          "ntsr: payload does not match shape " + shape_str(shape));
  auto f = open_out(path);
  write_header(f, NtsrDtype::F64, shape);
  f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 8));
  require(f.good(), ErrKind::Io, "ntsr: write failed: " + path);
}

void write_ntsr_u8(const std::string& path, const Shape& shape, std::span<const uint8_t> data) {
  require(int64_t(data.size()) == numel(shape), ErrKind::Shape,
          "ntsr: payload does not match shape " + shape_str(shape));
  auto f = open_out(path);
  write_header(f, NtsrDtype::U8, shape);
  f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
  require(f.good(), ErrKind::Io, "ntsr: write failed: " + path);
}

NtsrData read_ntsr(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrKind::Io, "ntsr: cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  require(f.good() && std::memcmp(magic, "NTSR", 4) == 0, ErrKind::Io,
          "ntsr: bad magic in " + path);
  uint8_t version = 0, dt = 0;
  f.read(reinterpret_cast<char*>(&version), 1);
  f.read(reinterpret_cast<char*>(&dt), 1);
  require(version == 0x01, ErrKind::Io, "ntsr: unsupported version in " + path);
  require(dt == uint8_t(NtsrDtype::F64) || dt == uint8_t(NtsrDtype::U8), ErrKind::Io,
          "ntsr: unsupported dtype in " + path);
  uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 4);
  require(f.good() && rank <= 8, ErrKind::Io, "ntsr: bad rank in " + path);

  NtsrData out;
  out.dtype = NtsrDtype(dt);
  out.shape.resize(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t ext = 0;
    f.read(reinterpret_cast<char*>(&ext), 4);
    require(f.good() && ext > 0, ErrKind::Io, "ntsr: bad extent in " + path);
    out.shape[i] = int64_t(ext);
  }
  const int64_t n = numel(out.shape);
  if (out.dtype == NtsrDtype::F64) {
    out.f64.resize(size_t(n));
    f.read(reinterpret_cast<char*>(out.f64.data()), std::streamsize(n * 8));
  } else {
    out.u8.resize(size_t(n));
    f.read(reinterpret_cast<char*>(out.u8.data()), std::streamsize(n));
  }
  require(f.good(), ErrKind::Io, "ntsr: truncated payload in " + path);
  return out;
}

Tensor read_ntsr_tensor(const std::string& path) {
  NtsrData d = read_ntsr(path);
  if (d.dtype == NtsrDtype::F64) return Tensor::from_data(d.shape, std::move(d.f64));
  std::vector<double> widened(d.u8.begin(), d.u8.end());
  return Tensor::from_data(d.shape, std::move(widened));
}

}  // namespace protoalign
