#pragma once

#include <string>

#include "maskconver/tensor.hpp"

namespace maskconver {

// MCT1 tensor file:
//   4 bytes  magic "MCT1"
//   1 byte   dtype (0 = float32, 1 = uint16, 2 = uint8)
//   1 byte   rank
//   rank x uint32 little-endian dims
//   row-major little-endian payload
enum class Dtype : std::uint8_t { Float32 = 0, Uint16 = 1, Uint8 = 2 };

void save_mct(const std::string& path, const Tensor& t, Dtype dtype);

// Loads any dtype into doubles. When `dtype_out` is non-null it receives the
// stored dtype. Corrupt or truncated files raise DataError with the offending
// position / expected byte count.
Tensor load_mct(const std::string& path, Dtype* dtype_out = nullptr);

}  // namespace maskconver
