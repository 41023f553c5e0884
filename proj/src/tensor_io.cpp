#include "metadm/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "metadm/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor archive codec assumes a little-endian host");

namespace metadm {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'T', 'F'};
constexpr std::uint32_t kMaxDim = 1u << 28;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataIntegrityError("truncated tensor file '" + path + "'");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const nn::Tensor& t) {
  if (!t.defined()) throw ShapeError("cannot serialize an undefined tensor");
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, kTensorArchiveVersion);
  write_raw(out, static_cast<std::uint8_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) write_raw(out, static_cast<std::uint32_t>(t.dim(i)));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(float)));
}

nn::Tensor read_tensor(std::istream& in, const std::string& path) {
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataIntegrityError("'" + path + "' is not a tensor file (bad magic)");
  }
  const auto version = read_raw<std::uint32_t>(in, path);
  if (version != kTensorArchiveVersion) {
    throw DataIntegrityError("'" + path + "' has tensor format version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kTensorArchiveVersion));
  }
  const auto ndim = read_raw<std::uint8_t>(in, path);
  if (ndim == 0) throw DataIntegrityError("'" + path + "' declares a tensor with no dims");
  std::vector<int> shape(ndim);
  std::size_t numel = 1;
  for (auto& d : shape) {
    const auto dim = read_raw<std::uint32_t>(in, path);
    if (dim == 0 || dim > kMaxDim) {
      throw DataIntegrityError("'" + path + "' declares an invalid dim " + std::to_string(dim));
    }
    d = static_cast<int>(dim);
    numel *= dim;
    if (numel > kMaxDim) {
      throw DataIntegrityError("'" + path + "' declares an implausibly large tensor");
    }
  }
  std::vector<float> data(numel);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * sizeof(float)));
  if (!in) throw DataIntegrityError("truncated tensor file '" + path + "'");
  if (in.peek() != std::istream::traits_type::eof()) {
    throw DataIntegrityError("'" + path + "' has trailing bytes after the tensor payload");
  }
  return nn::Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const nn::Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot open '" + path + "' for writing");
  write_tensor(out, t);
  out.flush();
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

nn::Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataIntegrityError("cannot open '" + path + "'");
  return read_tensor(in, path);
}

std::vector<std::uint8_t> tensor_to_bytes(const nn::Tensor& t) {
  std::ostringstream out(std::ios::binary);
  write_tensor(out, t);
  const std::string s = out.str();
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

nn::Tensor tensor_from_bytes(const std::vector<std::uint8_t>& bytes) {
  std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  return read_tensor(in, "<memory>");
}

}  // namespace metadm
