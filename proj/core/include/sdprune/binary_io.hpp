#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sdprune/tensor.hpp"

namespace sdprune::io {

// Little-endian byte sink. Call save() to flush to disk.
class BinaryWriter {
 public:
  void bytes(std::span<const std::uint8_t> data);
  void magic(std::string_view four_chars);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(std::string_view s);  // u32 length + UTF-8 bytes

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

// Little-endian byte source over an in-memory file image. Every read checks
// bounds and raises FormatError naming the offset on truncation.
class BinaryReader {
 public:
  BinaryReader(std::vector<std::uint8_t> data, std::string source);
  static BinaryReader open(const std::filesystem::path& path);

  // Throws FormatError if the next four bytes are not `expected`.
  void expect_magic(std::string_view expected);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::span<const std::uint8_t> bytes(std::size_t n);

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& source() const { return source_; }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n, const char* what);
  std::vector<std::uint8_t> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Tensor record shared by the checkpoint, score and mask files:
// name (u32 length + UTF-8), u32 rank, u32 extents, row-major f32 values.
void write_tensor_record(BinaryWriter& w, std::string_view name,
                         const Tensor& t);
struct NamedRecord {
  std::string name;
  Tensor tensor;
};
NamedRecord read_tensor_record(BinaryReader& r);

void write_shape(BinaryWriter& w, const Shape& shape);
Shape read_shape(BinaryReader& r);

}  // namespace sdprune::io
