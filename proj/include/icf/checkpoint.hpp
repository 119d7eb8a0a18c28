#pragma once

// "ICF1" checkpoint files.
//
//   magic      "ICF1"
//   u32        tensor count
//   per tensor (sorted by name):
//     u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values
//   u32        config line count
//   per line:  u32 length, "key=value" bytes
//
// All integers and floats are little-endian.

#include <map>
#include <string>

#include "icf/tensor.hpp"

namespace icf {

using TensorMap = std::map<std::string, Tensor<float>>;
using ConfigMap = std::map<std::string, std::string>;

struct Checkpoint {
  TensorMap tensors;
  ConfigMap config;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// SHA-256 (hex) over the tensor section: names, shapes and values.
std::string fingerprint(const TensorMap& tensors);

}  // namespace icf
