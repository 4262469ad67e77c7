#include "asr/ndt.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "asr/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "NDT1 I/O assumes a little-endian host");

namespace asr {

namespace {

constexpr char kMagic[4] = {'N', 'D', 'T', '1'};
constexpr std::uint8_t kDtypeF64 = 0;
constexpr std::size_t kMaxRank = 8;
constexpr std::size_t kMaxElements = std::size_t{1} << 33;

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw IoError("NDT1: truncated extent field");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const nd::Tensor& t) {
  if (!t.defined()) throw IoError("NDT1: cannot write undefined tensor");
  out.write(kMagic, 4);
  const std::uint8_t dtype = kDtypeF64;
  const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (std::size_t d : t.shape()) write_u64(out, d);
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("NDT1: write failed");
}

nd::Tensor read_tensor(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("NDT1: bad magic");
  }
  std::uint8_t dtype = 0, rank = 0;
  in.read(reinterpret_cast<char*>(&dtype), 1);
  in.read(reinterpret_cast<char*>(&rank), 1);
  if (!in) throw IoError("NDT1: truncated header");
  if (dtype != kDtypeF64) {
    throw IoError("NDT1: unsupported dtype code " + std::to_string(dtype));
  }
  if (rank > kMaxRank) {
    throw IoError("NDT1: rank " + std::to_string(rank) + " exceeds limit");
  }
  nd::Shape shape(rank);
  std::size_t n = 1;
  for (std::uint8_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(read_u64(in));
    if (shape[i] != 0 && n > kMaxElements / std::max<std::size_t>(shape[i], 1)) {
      throw IoError("NDT1: element count exceeds limit");
    }
    n *= shape[i];
  }
  if (n > kMaxElements) throw IoError("NDT1: element count exceeds limit");
  std::vector<double> data(n);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double))) {
    throw IoError("NDT1: truncated payload");
  }
  return nd::Tensor(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const nd::Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  write_tensor(f, t);
}

nd::Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  nd::Tensor t = read_tensor(f);
  f.peek();
  if (!f.eof()) throw IoError("NDT1: trailing bytes in " + path.string());
  return t;
}

}  // namespace asr
