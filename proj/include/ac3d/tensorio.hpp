#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ac3d/error.hpp"

namespace ac3d {

/// Dense row-major float32 tensor. Rank >= 1, every extent >= 1.
class Tensor {
 public:
  Tensor() : dims_{1}, data_(1, 0.0f) {}
  explicit Tensor(std::vector<std::size_t> dims, float fill = 0.0f);
  Tensor(std::vector<std::size_t> dims, std::vector<float> data);

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  float& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  float at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<float> data_;
};

namespace tensorio {

enum class ErrorKind { kIo, kBadMagic, kUnsupportedVersion, kUnsupportedDtype, kTruncated, kBadHeader };

class TensorIoError : public DataError {
 public:
  TensorIoError(ErrorKind kind, const std::string& what) : DataError(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

/// Size in bytes of the serialized form of `t`.
std::size_t encoded_size(const Tensor& t);

// Stream forms are used by the checkpoint writer, which packs several records
// into one file.
void write_tensor(const Tensor& t, std::ostream& out);
Tensor read_tensor(std::istream& in, const std::string& origin = "<stream>");

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

/// One camera record of a trajectory text file. Fields are kept raw.
struct TrajectoryRecord {
  double timestamp = 0.0;
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  double k1 = 0.0, k2 = 0.0;
  /// Row-major 3x4 world-to-camera matrix [R|t].
  std::array<double, 12> extrinsic{};
};

struct TrajectoryFile {
  std::string source_id;
  std::vector<TrajectoryRecord> frames;
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what) : DataError(what), line_(line) {}
  /// 1-based line number, 0 when the error is not tied to a line.
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

TrajectoryFile parse_trajectory(std::istream& in, const std::string& origin = "<stream>");
TrajectoryFile parse_trajectory(const std::filesystem::path& path);

void write_trajectory(const TrajectoryFile& file, std::ostream& out);
void write_trajectory(const TrajectoryFile& file, const std::filesystem::path& path);

}  // namespace tensorio
}  // namespace ac3d
