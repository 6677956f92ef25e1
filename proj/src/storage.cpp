#include "kpred/storage.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kpred::store {

namespace {

constexpr char kMagic[4] = {'K', 'P', 'R', 'D'};
constexpr uint16_t kVersion = 1;

void put_u16(std::vector<unsigned char>& out, uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::U32: return 4;
  }
  throw std::runtime_error("blob: bad dtype");
}

std::size_t RawTensor::numel() const {
  std::size_t n = 1;
  for (uint32_t d : dims) n *= d;
  return n;
}

RawTensor RawTensor::from_f32(std::vector<uint32_t> dims, const std::vector<float>& v) {
  RawTensor t;
  t.dtype = Dtype::F32;
  t.dims = std::move(dims);
  if (t.numel() != v.size()) throw std::runtime_error("blob: element count does not match dims");
  t.bytes.reserve(v.size() * 4);
  for (float f : v) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(t.bytes, bits);
  }
  return t;
}

RawTensor RawTensor::from_f64(std::vector<uint32_t> dims, const std::vector<double>& v) {
  RawTensor t;
  t.dtype = Dtype::F64;
  t.dims = std::move(dims);
  if (t.numel() != v.size()) throw std::runtime_error("blob: element count does not match dims");
  t.bytes.reserve(v.size() * 8);
  for (double f : v) {
    uint64_t bits;
    std::memcpy(&bits, &f, 8);
    put_u64(t.bytes, bits);
  }
  return t;
}

RawTensor RawTensor::from_u32(std::vector<uint32_t> dims, const std::vector<uint32_t>& v) {
  RawTensor t;
  t.dtype = Dtype::U32;
  t.dims = std::move(dims);
  if (t.numel() != v.size()) throw std::runtime_error("blob: element count does not match dims");
  t.bytes.reserve(v.size() * 4);
  for (uint32_t u : v) put_u32(t.bytes, u);
  return t;
}

std::vector<float> RawTensor::to_f32() const {
  if (dtype != Dtype::F32) throw std::runtime_error("blob: dtype is not f32");
  std::vector<float> v(numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const uint32_t bits = get_u32(bytes.data() + i * 4);
    std::memcpy(&v[i], &bits, 4);
  }
  return v;
}

std::vector<double> RawTensor::to_f64() const {
  if (dtype != Dtype::F64) throw std::runtime_error("blob: dtype is not f64");
  std::vector<double> v(numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const uint64_t bits = get_u64(bytes.data() + i * 8);
    std::memcpy(&v[i], &bits, 8);
  }
  return v;
}

std::vector<uint32_t> RawTensor::to_u32() const {
  if (dtype != Dtype::U32) throw std::runtime_error("blob: dtype is not u32");
  std::vector<uint32_t> v(numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = get_u32(bytes.data() + i * 4);
  return v;
}

std::vector<unsigned char> encode_blob(const RawTensor& t) {
  if (t.bytes.size() != t.numel() * dtype_size(t.dtype))
    throw std::runtime_error("blob: payload length does not match dims");
  std::vector<unsigned char> out;
  out.reserve(12 + 4 * t.dims.size() + t.bytes.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  put_u16(out, static_cast<uint16_t>(t.dtype));
  put_u16(out, static_cast<uint16_t>(t.dims.size()));
  put_u16(out, 0);  // reserved
  for (uint32_t d : t.dims) put_u32(out, d);
  out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

RawTensor decode_blob(const std::vector<unsigned char>& buf) {
  if (buf.size() < 12) throw std::runtime_error("blob: truncated header");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw std::runtime_error("blob: bad magic");
  if (get_u16(buf.data() + 4) != kVersion) throw std::runtime_error("blob: bad version");
  const uint16_t dtype_raw = get_u16(buf.data() + 6);
  if (dtype_raw > 2) throw std::runtime_error("blob: bad dtype");
  const uint16_t rank = get_u16(buf.data() + 8);
  if (get_u16(buf.data() + 10) != 0) throw std::runtime_error("blob: bad reserved field");
  if (buf.size() < 12 + 4 * static_cast<std::size_t>(rank))
    throw std::runtime_error("blob: truncated dims");

  RawTensor t;
  t.dtype = static_cast<Dtype>(dtype_raw);
  t.dims.resize(rank);
  for (uint16_t i = 0; i < rank; ++i) t.dims[i] = get_u32(buf.data() + 12 + 4 * i);
  const std::size_t header = 12 + 4 * static_cast<std::size_t>(rank);
  const std::size_t expect = t.numel() * dtype_size(t.dtype);
  if (buf.size() != header + expect) throw std::runtime_error("blob: truncated payload");
  t.bytes.assign(buf.begin() + header, buf.end());
  return t;
}

void write_blob(const RawTensor& t, const std::string& path) {
  const std::vector<unsigned char> buf = encode_blob(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("blob: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("blob: write failed for '" + path + "'");
}

RawTensor read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("blob: cannot open '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  return decode_blob(buf);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace kpred::store
