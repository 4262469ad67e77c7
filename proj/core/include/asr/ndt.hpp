#pragma once

#include <filesystem>
#include <iosfwd>

#include "asr/tensor.hpp"

namespace asr {

/// NDT1 binary tensor format: magic "NDT1", u8 dtype (0 = f64), u8 rank,
/// rank x u64 little-endian extents, then the row-major f64 payload.
/// Shared by datasets and checkpoints.

void write_tensor(std::ostream& out, const nd::Tensor& t);
nd::Tensor read_tensor(std::istream& in);

void write_tensor(const std::filesystem::path& path, const nd::Tensor& t);
nd::Tensor read_tensor(const std::filesystem::path& path);

}  // namespace asr
