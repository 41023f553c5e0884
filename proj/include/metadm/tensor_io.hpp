#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "metadm/tensor.hpp"

namespace metadm {

// Single-tensor archive. Layout: magic "MDTF", version u32, ndim u8, one u32
// per dim, then the row-major f32 payload. All fields little-endian.
// read(write(t)) is bit-exact.

inline constexpr std::uint32_t kTensorArchiveVersion = 1;

void write_tensor(std::ostream& out, const nn::Tensor& t);
nn::Tensor read_tensor(std::istream& in, const std::string& path);

void save_tensor(const std::string& path, const nn::Tensor& t);
nn::Tensor load_tensor(const std::string& path);

std::vector<std::uint8_t> tensor_to_bytes(const nn::Tensor& t);
nn::Tensor tensor_from_bytes(const std::vector<std::uint8_t>& bytes);

}  // namespace metadm
