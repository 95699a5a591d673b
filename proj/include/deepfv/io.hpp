#ifndef DEEPFV_IO_HPP_
#define DEEPFV_IO_HPP_

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "deepfv/types.hpp"

namespace deepfv {

// Descriptor file: magic "DFV1", u32 row count, u32 column count, then
// rows*cols IEEE-754 float32 values row-major, all little-endian.
void write_descriptor_file(const std::string& path, const MatrixRef& data);
Matrix read_descriptor_file(const std::string& path);

// Checkpoint building blocks. A stream of named, length-prefixed sections:
//   u32 name length, name bytes, u64 payload length, payload.
// Payloads are written with BinaryWriter (u32/u64/f64 and row-major f64
// matrices, little-endian).
class BinaryWriter {
 public:
  void put_u32(std::uint32_t v);
  void put_u64(std::uint64_t v);
  void put_f64(double v);
  void put_string(const std::string& s);
  void put_matrix(const MatrixRef& m);
  void put_vector(const VectorRef& v);

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::vector<std::uint8_t> bytes)
      : buf_(std::move(bytes)) {}

  std::uint32_t get_u32();
  std::uint64_t get_u64();
  double get_f64();
  std::string get_string();
  Matrix get_matrix();
  Vector get_vector();
  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const;
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

struct Section {
  std::string name;
  std::vector<std::uint8_t> payload;
};

// Container file: magic "DLFC", u32 version, then sections until EOF.
void write_section_file(const std::string& path, std::uint32_t version,
                        const std::vector<Section>& sections);
std::vector<Section> read_section_file(const std::string& path,
                                       std::uint32_t expected_version);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& contents);

}  // namespace deepfv

#endif  // DEEPFV_IO_HPP_
