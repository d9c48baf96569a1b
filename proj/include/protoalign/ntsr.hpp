#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protoalign/tensor.hpp"

namespace protoalign {

// "NTSR" binary tensor file:
//   magic 'N','T','S','R', version byte 0x01, dtype byte (0x01=f64, 0x02=u8),
//   u32 LE rank, u32 LE extent per axis, raw little-endian payload.
enum class NtsrDtype : uint8_t { F64 = 0x01, U8 = 0x02 };

void write_ntsr_f64(const std::string& path, const Shape& shape, std::span<const double> data);
void write_ntsr_u8(const std::string& path, const Shape& shape, std::span<const uint8_t> data);

struct NtsrData {
  NtsrDtype dtype;
  Shape shape;
  std::vector<double> f64;   // filled for F64
  std::vector<uint8_t> u8;   // filled for U8
};

NtsrData read_ntsr(const std::string& path);

// Reads either dtype and widens u8 payloads to f64.
Tensor read_ntsr_tensor(const std::string& path);

}  // namespace protoalign
