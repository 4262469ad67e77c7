#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "asr/errors.hpp"
#include "asr/ndt.hpp"
#include "asr/rng.hpp"
#include "asr/tensor.hpp"

using namespace asr;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("NDT1 round-trips random tensors byte-identically") {
  Rng rng(41);
  std::vector<nd::Shape> shapes = {{}, {0}, {1}, {7}, {3, 4}, {2, 3, 4}, {2, 1, 5, 3}};
  for (const auto& shape : shapes) {
    nd::Tensor t(shape);
    for (double& v : t.values()) v = rng.normal();
    fs::path p = temp_file("ndt_roundtrip.ndt");
    write_tensor(p, t);
    nd::Tensor u = read_tensor(p);
    REQUIRE(u.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(u.data()[i] == t.data()[i]);

    // writing the read tensor again reproduces the file bit for bit
    fs::path q = temp_file("ndt_roundtrip2.ndt");
    write_tensor(q, u);
    CHECK(file_bytes(p) == file_bytes(q));
  }
}

TEST_CASE("NDT1 rejects bad magic") {
  fs::path p = temp_file("ndt_badmagic.ndt");
  std::ofstream(p, std::ios::binary) << "XXXX12345678";
  CHECK_THROWS_AS(read_tensor(p), IoError);
}

TEST_CASE("NDT1 rejects truncation") {
  nd::Tensor t({4}, {1.0, 2.0, 3.0, 4.0});
  fs::path p = temp_file("ndt_trunc.ndt");
  write_tensor(p, t);
  std::string bytes = file_bytes(p);
  std::ofstream(p, std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  CHECK_THROWS_AS(read_tensor(p), IoError);
}

TEST_CASE("NDT1 rejects trailing bytes") {
  nd::Tensor t({2}, {1.0, 2.0});
  fs::path p = temp_file("ndt_trail.ndt");
  write_tensor(p, t);
  std::ofstream(p, std::ios::binary | std::ios::app) << "junk";
  CHECK_THROWS_AS(read_tensor(p), IoError);
}

TEST_CASE("NDT1 rejects absurd extents instead of allocating") {
  fs::path p = temp_file("ndt_huge.ndt");
  std::ofstream f(p, std::ios::binary);
  f << "NDT1";
  const char dtype = 0, rank = 2;
  f.write(&dtype, 1);
  f.write(&rank, 1);
  std::uint64_t big = 1ull << 40;
  f.write(reinterpret_cast<const char*>(&big), 8);
  f.write(reinterpret_cast<const char*>(&big), 8);
  f.close();
  CHECK_THROWS_AS(read_tensor(p), IoError);
}
