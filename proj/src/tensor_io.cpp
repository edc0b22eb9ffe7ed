#include "maskconver/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "maskconver/error.hpp"

namespace maskconver {

namespace {

void put_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

int dtype_size(Dtype d) {
  switch (d) {
    case Dtype::Float32: return 4;
    case Dtype::Uint16: return 2;
    case Dtype::Uint8: return 1;
  }
  throw DataError("unknown dtype byte " + std::to_string(static_cast<int>(d)));
}

}  // namespace

void save_mct(const std::string& path, const Tensor& t, Dtype dtype) {
  std::vector<unsigned char> buf;
  buf.reserve(16 + static_cast<std::size_t>(t.numel()) * dtype_size(dtype));
  buf.push_back('M');
  buf.push_back('C');
  buf.push_back('T');
  buf.push_back('1');
  buf.push_back(static_cast<unsigned char>(dtype));
  if (t.rank() > 255) throw std::invalid_argument("tensor rank exceeds MCT1 limit");
  buf.push_back(static_cast<unsigned char>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) {
    put_u32_le(buf, static_cast<std::uint32_t>(t.dim(i)));
  }
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double v = t[i];
    switch (dtype) {
      case Dtype::Float32: {
        float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32_le(buf, bits);
        break;
      }
      case Dtype::Uint16: {
        if (v < 0 || v > 65535 || v != std::floor(v)) {
          throw std::invalid_argument("value " + std::to_string(v) + " not representable as uint16");
        }
        auto u = static_cast<std::uint16_t>(v);
        buf.push_back(static_cast<unsigned char>(u & 0xff));
        buf.push_back(static_cast<unsigned char>(u >> 8));
        break;
      }
      case Dtype::Uint8: {
        if (v < 0 || v > 255 || v != std::floor(v)) {
          throw std::invalid_argument("value " + std::to_string(v) + " not representable as uint8");
        }
        buf.push_back(static_cast<unsigned char>(v));
        break;
      }
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("short write to " + path);
}

Tensor load_mct(const std::string& path, Dtype* dtype_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 6) {
    throw DataError(path + ": file too short for MCT1 header (have " + std::to_string(buf.size()) +
                    " bytes, need at least 6)");
  }
  if (std::memcmp(buf.data(), "MCT1", 4) != 0) {
    throw DataError(path + ": bad magic at byte 0, expected 'MCT1'");
  }
  int dbyte = buf[4];
  if (dbyte > 2) throw DataError(path + ": unknown dtype byte " + std::to_string(dbyte) + " at offset 4");
  Dtype dtype = static_cast<Dtype>(dbyte);
  int rank = buf[5];

  std::size_t off = 6;
  if (buf.size() < off + 4u * static_cast<std::size_t>(rank)) {
    throw DataError(path + ": truncated dims, expected " + std::to_string(4 * rank) +
                    " bytes at offset 6, file has " + std::to_string(buf.size() - off));
  }
  std::vector<int> shape(static_cast<std::size_t>(rank));
  std::int64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    std::uint32_t d = get_u32_le(buf.data() + off);
    off += 4;
    shape[static_cast<std::size_t>(i)] = static_cast<int>(d);
    count *= d;
  }

  std::size_t payload = static_cast<std::size_t>(count) * static_cast<std::size_t>(dtype_size(dtype));
  if (buf.size() - off != payload) {
    throw DataError(path + ": payload expected " + std::to_string(payload) + " bytes, file has " +
                    std::to_string(buf.size() - off));
  }

  std::vector<double> values(static_cast<std::size_t>(count));
  const unsigned char* p = buf.data() + off;
  for (std::int64_t i = 0; i < count; ++i) {
    switch (dtype) {
      case Dtype::Float32: {
        std::uint32_t bits = get_u32_le(p);
        float fv;
        std::memcpy(&fv, &bits, 4);
        values[static_cast<std::size_t>(i)] = static_cast<double>(fv);
        p += 4;
        break;
      }
      case Dtype::Uint16: {
        std::uint16_t u = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
        values[static_cast<std::size_t>(i)] = static_cast<double>(u);
        p += 2;
        break;
      }
      case Dtype::Uint8: {
        values[static_cast<std::size_t>(i)] = static_cast<double>(*p);
        p += 1;
        break;
      }
    }
  }
  if (dtype_out) *dtype_out = dtype;
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace maskconver
