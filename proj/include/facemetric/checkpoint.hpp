#pragma once

#include <string>
#include <vector>

#include "facemetric/tensor.hpp"

namespace facemetric {

// Versioned binary container of named tensors: 8-byte magic, u32 version,
// u32 count, then per tensor a length-prefixed name, u32 rank, u32 extents
// and the raw values as little-endian doubles.
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

const Tensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace facemetric
