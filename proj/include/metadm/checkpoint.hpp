#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "metadm/layers.hpp"

namespace metadm::nn {

// Binary parameter container. Layout: magic "MDMC", version u32, then
// version-specific payload ending in count u32 followed by count entries of
// {name length u16, UTF-8 name, ndim u8, dims u32 each, raw f32 payload}.
// All integers and floats are little-endian. Version 1 is the plain layout
// with nothing between version and count. Entries keep collection order, so
// save -> load -> save reproduces a file byte for byte.

inline constexpr std::uint32_t kCheckpointVersionParams = 1;

void write_checkpoint_header(std::ostream& out, std::uint32_t version);
std::uint32_t read_checkpoint_header(std::istream& in, const std::string& path);

// count u32 followed by the entries.
void write_param_entries(std::ostream& out, const Params& params);
Params read_param_entries(std::istream& in, const std::string& path);

void save_params(const std::string& path, const Params& params);
Params load_params(const std::string& path);
// Copies loaded data into dst, which must already hold every stored entry
// with an identical shape (and nothing the file lacks).
void load_params_into(const std::string& path, Params& dst);

}  // namespace metadm::nn
