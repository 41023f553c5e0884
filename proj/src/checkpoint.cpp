#include "metadm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "metadm/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint codec assumes a little-endian host");

namespace metadm::nn {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'M', 'C'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataIntegrityError("truncated checkpoint file '" + path + "'");
  return v;
}

}  // namespace

void write_checkpoint_header(std::ostream& out, std::uint32_t version) {
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, version);
}

std::uint32_t read_checkpoint_header(std::istream& in, const std::string& path) {
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataIntegrityError("'" + path + "' is not a checkpoint file (bad magic)");
  }
  return read_raw<std::uint32_t>(in, path);
}

void write_param_entries(std::ostream& out, const Params& params) {
  write_raw(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.entries()) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ConfigError("parameter name too long to serialize: '" + name + "'");
    }
    write_raw(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw(out, static_cast<std::uint8_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) write_raw(out, static_cast<std::uint32_t>(t.dim(i)));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.data().size() * sizeof(float)));
  }
}

Params read_param_entries(std::istream& in, const std::string& path) {
  const auto count = read_raw<std::uint32_t>(in, path);
  Params params;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = read_raw<std::uint16_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw DataIntegrityError("truncated checkpoint file '" + path + "'");
    const auto ndim = read_raw<std::uint8_t>(in, path);
    if (ndim == 0) throw DataIntegrityError("entry '" + name + "' in '" + path + "' has no dims");
    std::vector<int> shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const auto dim = read_raw<std::uint32_t>(in, path);
      if (dim == 0 || dim > (1u << 28)) {
        throw DataIntegrityError("entry '" + name + "' in '" + path + "' has an invalid dim");
      }
      d = static_cast<int>(dim);
      numel *= dim;
    }
    std::vector<float> data(numel);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) throw DataIntegrityError("truncated checkpoint file '" + path + "'");
    params.add(name, Tensor::from_data(std::move(shape), std::move(data)));
  }
  return params;
}

void save_params(const std::string& path, const Params& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot open '" + path + "' for writing");
  write_checkpoint_header(out, kCheckpointVersionParams);
  write_param_entries(out, params);
  out.flush();
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

Params load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataIntegrityError("cannot open '" + path + "'");
  const auto version = read_checkpoint_header(in, path);
  if (version != kCheckpointVersionParams) {
    throw DataIntegrityError("'" + path + "' has version " + std::to_string(version) +
                             ", expected " + std::to_string(kCheckpointVersionParams));
  }
  return read_param_entries(in, path);
}

void load_params_into(const std::string& path, Params& dst) {
  Params loaded = load_params(path);
  if (loaded.size() != dst.size()) {
    throw DataIntegrityError("'" + path + "' holds " + std::to_string(loaded.size()) +
                             " entries, expected " + std::to_string(dst.size()));
  }
  for (const auto& [name, src] : loaded.entries()) {
    if (!dst.contains(name)) {
      throw DataIntegrityError("'" + path + "' holds unexpected entry '" + name + "'");
    }
    Tensor& d = dst.at(name);
    if (d.shape() != src.shape()) {
      throw DataIntegrityError("entry '" + name + "' in '" + path + "' has a mismatched shape");
    }
    d.data() = src.data();
  }
}

}  // namespace metadm::nn
