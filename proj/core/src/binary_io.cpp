#include "rdetect/binary_io.hpp"

#include <fstream>
#include <sstream>

#include "rdetect/error.hpp"

namespace rdetect::io {

void Reader::need(std::size_t n) const {
  if (pos_ + n > buf_.size())
    throw ParseError(ParseError::Kind::Truncated, "binary input truncated at byte " + std::to_string(pos_));
}

std::string Reader::take(std::size_t n) {
  need(n);
  std::string s = buf_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::string Reader::str() { return take(u32()); }

void Reader::doubles(double* p, std::size_t n) {
  need(n * sizeof(double));
  std::memcpy(p, buf_.data() + pos_, n * sizeof(double));
  pos_ += n * sizeof(double);
}

Eigen::MatrixXd Reader::matrix() {
  const auto rows = u32();
  const auto cols = u32();
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  doubles(rm.data(), static_cast<std::size_t>(rm.size()));
  return rm;
}

Eigen::VectorXd Reader::vector() {
  Eigen::VectorXd v(u32());
  doubles(v.data(), static_cast<std::size_t>(v.size()));
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ParseError(ParseError::Kind::Io, "write failed for " + path);
}

}  // namespace rdetect::io
