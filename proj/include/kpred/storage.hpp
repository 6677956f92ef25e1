#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kpred::store {

enum class Dtype : uint16_t { F32 = 0, F64 = 1, U32 = 2 };

std::size_t dtype_size(Dtype d);

// Self-describing dense tensor blob. On disk: magic "KPRD", version u16=1,
// dtype u16, rank u16, reserved u16=0, dims as rank x u32, then the row-major
// payload; every integer and float little-endian.
struct RawTensor {
  Dtype dtype = Dtype::F32;
  std::vector<uint32_t> dims;
  std::vector<unsigned char> bytes;

  std::size_t numel() const;

  static RawTensor from_f32(std::vector<uint32_t> dims, const std::vector<float>& v);
  static RawTensor from_f64(std::vector<uint32_t> dims, const std::vector<double>& v);
  static RawTensor from_u32(std::vector<uint32_t> dims, const std::vector<uint32_t>& v);
  std::vector<float> to_f32() const;
  std::vector<double> to_f64() const;
  std::vector<uint32_t> to_u32() const;
};

void write_blob(const RawTensor& t, const std::string& path);
RawTensor read_blob(const std::string& path);

// In-memory encode/decode of the same byte layout.
std::vector<unsigned char> encode_blob(const RawTensor& t);
RawTensor decode_blob(const std::vector<unsigned char>& buf);

// Small file helpers shared by checkpoint/database/dataset writers.
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace kpred::store
