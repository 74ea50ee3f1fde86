#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mvdiff/tensor.hpp"

namespace mvdiff {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Flat binary archive of named double tensors (native little-endian).
void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

}  // namespace mvdiff
