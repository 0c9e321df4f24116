#include "ac3d/tensorio.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace ac3d {

namespace {

std::size_t product(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

void check_dims(const std::vector<std::size_t>& dims) {
  if (dims.empty()) throw std::invalid_argument("Tensor: rank must be >= 1");
  for (std::size_t d : dims)
    if (d == 0) throw std::invalid_argument("Tensor: extents must be >= 1");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims, float fill) : dims_(std::move(dims)) {
  check_dims(dims_);
  data_.assign(product(dims_), fill);
}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<float> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  check_dims(dims_);
  if (data_.size() != product(dims_))
    throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                " does not match product of dims " + std::to_string(product(dims_)));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != dims_.size()) throw std::out_of_range("Tensor::at: wrong index rank");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= dims_[axis]) throw std::out_of_range("Tensor::at: index out of range");
    off = off * dims_[axis] + i;
    ++axis;
  }
  return off;
}

namespace tensorio {

namespace {

template <typename U>
void put_le(std::ostream& out, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(U));
}

template <typename U>
bool get_le(std::istream& in, U& value) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return true;
}

}  // namespace

std::size_t encoded_size(const Tensor& t) {
  return 4 + 4 + 4 + 8 * t.rank() + 1 + 4 * t.size();
}

void write_tensor(const Tensor& t, std::ostream& out) {
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.dims()) put_le<std::uint64_t>(out, d);
  out.put(static_cast<char>(kDtypeF32));
  for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

Tensor read_tensor(std::istream& in, const std::string& origin) {
  char magic[4];
  if (!in.read(magic, 4)) throw TensorIoError(ErrorKind::kTruncated, origin + ": truncated header");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw TensorIoError(ErrorKind::kBadMagic, origin + ": bad magic (expected TNSR)");
  std::uint32_t version = 0, rank = 0;
  if (!get_le(in, version)) throw TensorIoError(ErrorKind::kTruncated, origin + ": truncated header");
  if (version != kVersion)
    throw TensorIoError(ErrorKind::kUnsupportedVersion,
                        origin + ": unsupported version " + std::to_string(version));
  if (!get_le(in, rank)) throw TensorIoError(ErrorKind::kTruncated, origin + ": truncated header");
  if (rank == 0 || rank > 16)
    throw TensorIoError(ErrorKind::kBadHeader, origin + ": invalid rank " + std::to_string(rank));
  std::vector<std::size_t> dims(rank);
  std::uint64_t count = 1;
  for (auto& d : dims) {
    std::uint64_t extent = 0;
    if (!get_le(in, extent)) throw TensorIoError(ErrorKind::kTruncated, origin + ": truncated header");
    if (extent == 0 || extent > (std::uint64_t{1} << 40) / count)
      throw TensorIoError(ErrorKind::kBadHeader, origin + ": invalid extent");
    d = static_cast<std::size_t>(extent);
    count *= extent;
  }
  char dtype = 0;
  if (!in.get(dtype)) throw TensorIoError(ErrorKind::kTruncated, origin + ": truncated header");
  if (static_cast<std::uint8_t>(dtype) != kDtypeF32)
    throw TensorIoError(ErrorKind::kUnsupportedDtype,
                        origin + ": unsupported dtype code " + std::to_string(static_cast<int>(dtype)));

  std::vector<float> data(count);
  for (auto& v : data) {
    std::uint32_t bits = 0;
    if (!get_le(in, bits))
      throw TensorIoError(ErrorKind::kTruncated,
                          origin + ": payload shorter than " + std::to_string(count * 4) + " bytes");
    v = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(dims), std::move(data));
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorIoError(ErrorKind::kIo, "cannot open for writing: " + path.string());
  write_tensor(t, out);
  out.flush();
  if (!out) throw TensorIoError(ErrorKind::kIo, "write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorIoError(ErrorKind::kIo, "cannot open: " + path.string());
  return read_tensor(in, path.string());
}

namespace {

bool parse_number(std::string_view token, double& out) {
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace

TrajectoryFile parse_trajectory(std::istream& in, const std::string& origin) {
  TrajectoryFile file;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(0, origin + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  file.source_id = line;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string tok; fields >> tok;) tokens.push_back(tok);
    if (tokens.empty()) continue;
    if (tokens.size() != 19)
      throw ParseError(line_no, origin + ":" + std::to_string(line_no) + ": expected 19 fields, got " +
                                    std::to_string(tokens.size()));
    double values[19];
    for (std::size_t i = 0; i < 19; ++i) {
      if (!parse_number(tokens[i], values[i]))
        throw ParseError(line_no, origin + ":" + std::to_string(line_no) + ": non-numeric token '" +
                                      tokens[i] + "'");
    }
    TrajectoryRecord rec;
    rec.timestamp = values[0];
    rec.fx = values[1];
    rec.fy = values[2];
    rec.cx = values[3];
    rec.cy = values[4];
    rec.k1 = values[5];
    rec.k2 = values[6];
    std::copy(values + 7, values + 19, rec.extrinsic.begin());
    if (!file.frames.empty() && !(rec.timestamp > file.frames.back().timestamp))
      throw ParseError(line_no, origin + ":" + std::to_string(line_no) +
                                    ": timestamps must be strictly increasing");
    file.frames.push_back(rec);
  }
  if (file.frames.empty()) throw ParseError(0, origin + ": no frames");
  return file;
}

TrajectoryFile parse_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(0, "cannot open: " + path.string());
  return parse_trajectory(in, path.string());
}

void write_trajectory(const TrajectoryFile& file, std::ostream& out) {
  out << file.source_id << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : file.frames) {
    out << r.timestamp << ' ' << r.fx << ' ' << r.fy << ' ' << r.cx << ' ' << r.cy << ' ' << r.k1 << ' '
        << r.k2;
    for (double e : r.extrinsic) out << ' ' << e;
    out << '\n';
  }
}

void write_trajectory(const TrajectoryFile& file, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  write_trajectory(file, out);
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace tensorio
}  // namespace ac3d
