#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "ac3d/tensorio.hpp"
#include "test_util.hpp"

using namespace ac3d;
using tensorio::ErrorKind;
using tensorio::TensorIoError;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ErrorKind read_error_kind(const std::string& bytes) {
  std::istringstream in(bytes);
  try {
    tensorio::read_tensor(in);
  } catch (const TensorIoError& e) {
    return e.kind();
  }
  FAIL("expected a TensorIoError");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("smallest tensor encodes to 25 bytes") {
  testing::TempDir dir("tensorio");
  tensorio::write_tensor(Tensor({1}, {0.0f}), dir / "t.tnsr");
  const std::string bytes = slurp(dir / "t.tnsr");
  CHECK(bytes.size() == 25);
  CHECK(bytes.substr(0, 4) == "TNSR");
  CHECK(bytes[4] == 1);  // version, little-endian
  CHECK(bytes[8] == 1);  // rank
  CHECK(bytes[12] == 1); // extent
  CHECK(bytes[20] == 1); // dtype
}

TEST_CASE("header echoes dims") {
  std::ostringstream out;
  tensorio::write_tensor(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), out);
  const std::string bytes = out.str();
  CHECK(bytes.size() == 4 + 4 + 4 + 16 + 1 + 24);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 2);
  CHECK(bytes[20] == 3);
}

TEST_CASE("round trip is bit exact on random tensors") {
  std::mt19937_64 rng(11);
  testing::TempDir dir("tensorio");
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> rank_d(1, 4), ext_d(1, 5);
    std::vector<std::size_t> dims(rank_d(rng));
    for (auto& d : dims) d = ext_d(rng);
    Tensor t(dims);
    for (auto& v : t.data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng()) & 0x7F7FFFFFu);
    tensorio::write_tensor(t, dir / "r.tnsr");
    const Tensor back = tensorio::read_tensor(dir / "r.tnsr");
    CHECK(back.dims() == t.dims());
    CHECK(std::memcmp(back.data().data(), t.data().data(), t.size() * 4) == 0);
    // read -> write is the identity on bytes as well
    const std::string first = slurp(dir / "r.tnsr");
    tensorio::write_tensor(back, dir / "r2.tnsr");
    CHECK(slurp(dir / "r2.tnsr") == first);
  }
}

TEST_CASE("read errors have distinct kinds") {
  std::ostringstream out;
  tensorio::write_tensor(Tensor({2, 2}, {1, 2, 3, 4}), out);
  const std::string good = out.str();

  std::string bad_magic = good;
  bad_magic.replace(0, 4, "XXXX");
  CHECK(read_error_kind(bad_magic) == ErrorKind::kBadMagic);

  std::string bad_version = good;
  bad_version[4] = 2;
  CHECK(read_error_kind(bad_version) == ErrorKind::kUnsupportedVersion);

  std::string bad_dtype = good;
  bad_dtype[4 + 4 + 4 + 16] = 7;
  CHECK(read_error_kind(bad_dtype) == ErrorKind::kUnsupportedDtype);

  CHECK(read_error_kind(good.substr(0, good.size() - 3)) == ErrorKind::kTruncated);
  CHECK(read_error_kind(good.substr(0, 10)) == ErrorKind::kTruncated);
}

TEST_CASE("missing file reports the path") {
  try {
    tensorio::read_tensor(std::filesystem::path("/nonexistent/x.tnsr"));
    FAIL("expected error");
  } catch (const TensorIoError& e) {
    CHECK(e.kind() == ErrorKind::kIo);
    CHECK(std::string(e.what()).find("/nonexistent/x.tnsr") != std::string::npos);
  }
}

TEST_CASE("tensor rejects invalid shapes") {
  CHECK_THROWS_AS(Tensor(std::vector<std::size_t>{}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
}

namespace {

const char* kLine = "0 0.5 0.9 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1 0";

tensorio::TrajectoryFile parse(const std::string& text) {
  std::istringstream in(text);
  return tensorio::parse_trajectory(in, "traj.txt");
}

}  // namespace

TEST_CASE("parse_trajectory keeps every frame in order") {
  const std::string text = std::string("https://example/video\n") + kLine +
                           "\n\n100 0.5 0.9 0.5 0.5 0 0 1 0 0 1 0 1 0 2 0 0 1 3\n";
  const auto file = parse(text);
  CHECK(file.source_id == "https://example/video");
  REQUIRE(file.frames.size() == 2);
  CHECK(file.frames[0].timestamp == 0);
  CHECK(file.frames[1].timestamp == 100);
  CHECK(file.frames[1].extrinsic[3] == 1);
  CHECK(file.frames[1].extrinsic[11] == 3);
  CHECK(file.frames[0].fy == doctest::Approx(0.9));
}

TEST_CASE("parse_trajectory errors name the line") {
  SUBCASE("wrong field count") {
    const std::string text = std::string("id\n") + kLine + "\n1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18\n";
    try {
      parse(text);
      FAIL("expected error");
    } catch (const tensorio::ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
  }
  SUBCASE("non numeric") {
    std::string line = kLine;
    line[0] = 'x';
    CHECK_THROWS_AS(parse("id\n" + line + "\n"), tensorio::ParseError);
  }
  SUBCASE("decreasing timestamps") {
    const std::string text = "id\n2 0.5 0.9 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1 0\n1 0.5 0.9 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1 0\n";
    try {
      parse(text);
      FAIL("expected error");
    } catch (const tensorio::ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
  SUBCASE("no frames") { CHECK_THROWS_AS(parse("id\n\n"), tensorio::ParseError); }
}

TEST_CASE("write_trajectory round trips") {
  const std::string text = std::string("id\n") + kLine + "\n5 0.25 0.5 0.4 0.6 0 0 1 0 0 0.125 0 1 0 -2 0 0 1 7.5\n";
  const auto file = parse(text);
  std::ostringstream out;
  tensorio::write_trajectory(file, out);
  const auto back = parse(out.str());
  REQUIRE(back.frames.size() == 2);
  CHECK(back.frames[1].extrinsic == file.frames[1].extrinsic);
  CHECK(back.frames[1].cx == file.frames[1].cx);
}
