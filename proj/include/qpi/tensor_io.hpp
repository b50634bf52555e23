#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "qpi/tensor.hpp"

namespace qpi {

namespace nn {
class Model;
}

// Tensor file: "QPIT", u32 version (1), u8 dtype (0 = f64, 1 = f32), u8 ndim,
// ndim x u32 extents, row-major payload. Little-endian throughout.
enum class TensorDtype : unsigned char { f64 = 0, f32 = 1 };

inline constexpr unsigned kTensorFormatVersion = 1;
inline constexpr unsigned kCheckpointFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& tensor, TensorDtype dtype = TensorDtype::f64);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor,
                 TensorDtype dtype = TensorDtype::f64);
Tensor load_tensor(const std::filesystem::path& path);

// Checkpoint file: "QPIC", u32 version, then records of
// (u32 name length, UTF-8 name, tensor blob) until end of file.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(std::ostream& out, const NamedTensors& records);
NamedTensors read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const nn::Model& model);
// Loads parameters by name into an already-built model of the same architecture.
void load_checkpoint(const std::filesystem::path& path, nn::Model& model);

}  // namespace qpi
