#pragma once

#include <cstdint>
#include <cstring>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace rdetect::io {

/// Little-endian binary encoder used by the checkpoint formats.
class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void doubles(const double* p, std::size_t n) { raw(p, n * sizeof(double)); }
  void matrix(const Eigen::MatrixXd& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    // Row-major on disk.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    doubles(rm.data(), static_cast<std::size_t>(rm.size()));
  }
  void vector(const Eigen::VectorXd& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    doubles(v.data(), static_cast<std::size_t>(v.size()));
  }

  const std::string& bytes() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

/// Decoder counterpart; throws ParseError(Truncated) on short input.
class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  double f64() { return pod<double>(); }
  std::string str();
  void doubles(double* p, std::size_t n);
  Eigen::MatrixXd matrix();
  Eigen::VectorXd vector();
  /// Reads exactly `n` bytes.
  std::string take(std::size_t n);
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  template <class T>
  T pod() {
    T v;
    need(sizeof v);
    std::memcpy(&v, buf_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  void need(std::size_t n) const;

  std::string buf_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace rdetect::io
