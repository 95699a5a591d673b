#include "deepfv/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian; big-endian hosts need byte swaps");

namespace deepfv {

namespace {

constexpr char kDescriptorMagic[4] = {'D', 'F', 'V', '1'};
constexpr char kCheckpointMagic[4] = {'D', 'L', 'F', 'C'};

template <typename T>
void append_raw(std::vector<std::uint8_t>& buf, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

}  // namespace

void write_descriptor_file(const std::string& path, const MatrixRef& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kDescriptorMagic, 4);
  std::uint32_t rows = static_cast<std::uint32_t>(data.rows());
  std::uint32_t cols = static_cast<std::uint32_t>(data.cols());
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  std::vector<float> row(data.cols());
  for (Index i = 0; i < data.rows(); ++i) {
    for (Index j = 0; j < data.cols(); ++j)
      row[static_cast<std::size_t>(j)] = static_cast<float>(data(i, j));
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f) throw IoError("short write: " + path);
}

Matrix read_descriptor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open descriptor file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kDescriptorMagic, 4) != 0)
    throw IoError("bad descriptor file magic: " + path);
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  f.read(reinterpret_cast<char*>(&rows), 4);
  f.read(reinterpret_cast<char*>(&cols), 4);
  if (!f) throw IoError("truncated descriptor header: " + path);
  Matrix out(rows, cols);
  std::vector<float> row(cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    f.read(reinterpret_cast<char*>(row.data()),
           static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!f) throw IoError("truncated descriptor payload: " + path);
    for (std::uint32_t j = 0; j < cols; ++j)
      out(i, j) = static_cast<Scalar>(row[j]);
  }
  return out;
}

void BinaryWriter::put_u32(std::uint32_t v) { append_raw(buf_, v); }
void BinaryWriter::put_u64(std::uint64_t v) { append_raw(buf_, v); }
void BinaryWriter::put_f64(double v) { append_raw(buf_, v); }

void BinaryWriter::put_string(const std::string& s) {
  put_u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void BinaryWriter::put_matrix(const MatrixRef& m) {
  put_u64(static_cast<std::uint64_t>(m.rows()));
  put_u64(static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) put_f64(m(i, j));
}

void BinaryWriter::put_vector(const VectorRef& v) {
  put_matrix(v.transpose());
}

void BinaryReader::need(std::size_t n) const {
  if (pos_ + n > buf_.size()) throw IoError("truncated section payload");
}

std::uint32_t BinaryReader::get_u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, buf_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::get_u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, buf_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

double BinaryReader::get_f64() {
  need(8);
  double v;
  std::memcpy(&v, buf_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

std::string BinaryReader::get_string() {
  std::uint32_t n = get_u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

Matrix BinaryReader::get_matrix() {
  std::uint64_t rows = get_u64();
  std::uint64_t cols = get_u64();
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = get_f64();
  return m;
}

Vector BinaryReader::get_vector() {
  Matrix m = get_matrix();
  if (m.rows() != 1) throw IoError("expected a vector section entry");
  return m.row(0).transpose();
}

void write_section_file(const std::string& path, std::uint32_t version,
                        const std::vector<Section>& sections) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kCheckpointMagic, 4);
  f.write(reinterpret_cast<const char*>(&version), 4);
  for (const auto& s : sections) {
    std::uint32_t name_len = static_cast<std::uint32_t>(s.name.size());
    std::uint64_t payload_len = s.payload.size();
    f.write(reinterpret_cast<const char*>(&name_len), 4);
    f.write(s.name.data(), name_len);
    f.write(reinterpret_cast<const char*>(&payload_len), 8);
    f.write(reinterpret_cast<const char*>(s.payload.data()),
            static_cast<std::streamsize>(payload_len));
  }
  if (!f) throw IoError("short write: " + path);
}

std::vector<Section> read_section_file(const std::string& path,
                                       std::uint32_t expected_version) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("bad checkpoint magic: " + path);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || version != expected_version)
    throw IoError("unsupported checkpoint version in " + path);
  std::vector<Section> sections;
  while (true) {
    std::uint32_t name_len = 0;
    f.read(reinterpret_cast<char*>(&name_len), 4);
    if (f.eof()) break;
    if (!f) throw IoError("truncated checkpoint: " + path);
    Section s;
    s.name.resize(name_len);
    f.read(s.name.data(), name_len);
    std::uint64_t payload_len = 0;
    f.read(reinterpret_cast<char*>(&payload_len), 8);
    if (!f) throw IoError("truncated checkpoint: " + path);
    s.payload.resize(payload_len);
    f.read(reinterpret_cast<char*>(s.payload.data()),
           static_cast<std::streamsize>(payload_len));
    if (!f) throw IoError("truncated checkpoint: " + path);
    sections.push_back(std::move(s));
  }
  return sections;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& contents) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!f) throw IoError("short write: " + path);
}

}  // namespace deepfv
