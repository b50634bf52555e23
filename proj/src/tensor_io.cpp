#include "qpi/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "qpi/error.hpp"
#include "qpi/nn.hpp"

namespace qpi {
namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw DataError(std::string("truncated tensor data while reading ") + what);
  }
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> b{};
  read_exact(in, reinterpret_cast<char*>(b.data()), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in, const char* what) {
  std::array<unsigned char, 8> b{};
  read_exact(in, reinterpret_cast<char*>(b.data()), 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void expect_magic(std::istream& in, const char* magic) {
  std::array<char, 4> m{};
  read_exact(in, m.data(), 4, "magic");
  if (std::memcmp(m.data(), magic, 4) != 0) {
    throw DataError(std::string("bad magic: expected '") + magic + "'");
  }
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor, TensorDtype dtype) {
  if (tensor.rank() > 255) throw DimensionError("tensor rank exceeds 255");
  out.write("QPIT", 4);
  put_u32(out, kTensorFormatVersion);
  out.put(static_cast<char>(dtype));
  out.put(static_cast<char>(tensor.rank()));
  for (std::size_t e : tensor.shape()) {
    if (e > 0xffffffffULL) throw DimensionError("tensor extent exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (double v : tensor.data()) {
    if (dtype == TensorDtype::f64) {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  if (!out) throw DataError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  expect_magic(in, "QPIT");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kTensorFormatVersion) {
    throw DataError("unsupported tensor format version " + std::to_string(version));
  }
  const int dtype = in.get();
  const int ndim = in.get();
  if (dtype == EOF || ndim == EOF) throw DataError("truncated tensor header");
  if (dtype != 0 && dtype != 1) throw DataError("unknown tensor dtype " + std::to_string(dtype));
  Shape shape(static_cast<std::size_t>(ndim));
  for (auto& e : shape) e = get_u32(in, "extents");
  std::vector<double> data(shape_volume(shape));
  for (double& v : data) {
    v = dtype == 0 ? std::bit_cast<double>(get_u64(in, "payload"))
                   : static_cast<double>(std::bit_cast<float>(get_u32(in, "payload")));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor, TensorDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_tensor(out, tensor, dtype);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor file '" + path.string() + "'");
  return read_tensor(in);
}

void write_checkpoint(std::ostream& out, const NamedTensors& records) {
  out.write("QPIC", 4);
  put_u32(out, kCheckpointFormatVersion);
  for (const auto& [name, tensor] : records) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, tensor);
  }
  if (!out) throw DataError("failed writing checkpoint");
}

NamedTensors read_checkpoint(std::istream& in) {
  expect_magic(in, "QPIC");
  const std::uint32_t version = get_u32(in, "checkpoint version");
  if (version != kCheckpointFormatVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  NamedTensors records;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = get_u32(in, "record name length");
    std::string name(len, '\0');
    read_exact(in, name.data(), len, "record name");
    records.emplace_back(std::move(name), read_tensor(in));
  }
  return records;
}

void save_checkpoint(const std::filesystem::path& path, const nn::Model& model) {
  NamedTensors records;
  const auto names = model.parameter_names();
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    records.emplace_back(names[i], Tensor(params[i]->shape(), params[i]->values()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_checkpoint(out, records);
}

void load_checkpoint(const std::filesystem::path& path, nn::Model& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  const NamedTensors records = read_checkpoint(in);
  const auto names = model.parameter_names();
  auto params = model.parameters();
  if (records.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(records.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, tensor] = records[i];
    if (name != names[i] || tensor.shape() != params[i]->shape()) {
      throw DataError("checkpoint record '" + name + "' " + shape_string(tensor.shape()) +
                      " does not match parameter '" + names[i] + "' " + shape_string(params[i]->shape()));
    }
    std::copy(tensor.data().begin(), tensor.data().end(), params[i]->data().begin());
  }
}

}  // namespace qpi
