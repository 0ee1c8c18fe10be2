#include "sdprune/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sdprune/error.hpp"

namespace sdprune::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void BinaryWriter::bytes(std::span<const std::uint8_t> data) {
  buf_.insert(buf_.end(), data.begin(), data.end());
}

void BinaryWriter::magic(std::string_view four_chars) {
  for (char c : four_chars) buf_.push_back(static_cast<std::uint8_t>(c));
}

void BinaryWriter::u8(std::uint8_t v) { buf_.push_back(v); }

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
}

void BinaryWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()),
            static_cast<std::streamsize>(buf_.size()));
  if (!out) throw Error("write to " + path.string() + " failed");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

BinaryReader::BinaryReader(std::vector<std::uint8_t> data, std::string source)
    : data_(std::move(data)), source_(std::move(source)) {}

BinaryReader BinaryReader::open(const std::filesystem::path& path) {
  return BinaryReader(read_file(path), path.string());
}

void BinaryReader::fail(const std::string& what) const {
  throw FormatError(source_ + ": " + what + " at byte offset " +
                    std::to_string(pos_));
}

void BinaryReader::need(std::size_t n, const char* what) {
  if (data_.size() - pos_ < n) {
    fail(std::string("truncated file while reading ") + what + " (need " +
         std::to_string(n) + " bytes, " + std::to_string(data_.size() - pos_) +
         " left)");
  }
}

void BinaryReader::expect_magic(std::string_view expected) {
  need(expected.size(), "magic bytes");
  if (std::memcmp(data_.data() + pos_, expected.data(), expected.size()) != 0) {
    fail("bad magic, expected \"" + std::string(expected) + "\"");
  }
  pos_ += expected.size();
}

std::uint8_t BinaryReader::u8() {
  need(1, "u8");
  return data_[pos_++];
}

std::uint32_t BinaryReader::u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{data_[pos_ + i]} << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
  pos_ += 8;
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }
double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::str() {
  const auto n = u32();
  auto b = bytes(n);
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::span<const std::uint8_t> BinaryReader::bytes(std::size_t n) {
  need(n, "byte block");
  std::span<const std::uint8_t> out(data_.data() + pos_, n);
  pos_ += n;
  return out;
}

void write_shape(BinaryWriter& w, const Shape& shape) {
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) w.u32(static_cast<std::uint32_t>(e));
}

Shape read_shape(BinaryReader& r) {
  const auto rank = r.u32();
  if (rank == 0 || rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) r.fail("zero tensor extent");
  }
  return shape;
}

void write_tensor_record(BinaryWriter& w, std::string_view name,
                         const Tensor& t) {
  w.str(name);
  write_shape(w, t.shape());
  for (double v : t.data()) w.f32(static_cast<float>(v));
}

NamedRecord read_tensor_record(BinaryReader& r) {
  NamedRecord rec;
  rec.name = r.str();
  const Shape shape = read_shape(r);
  const std::size_t n = shape_numel(shape);
  if (n > r.remaining() / 4) {
    r.fail("truncated tensor \"" + rec.name + "\" (need " +
           std::to_string(n * 4) + " bytes, " + std::to_string(r.remaining()) +
           " left)");
  }
  std::vector<double> values(n);
  for (auto& v : values) v = static_cast<double>(r.f32());
  rec.tensor = Tensor(shape, std::move(values), Precision::F32);
  return rec;
}

}  // namespace sdprune::io
