#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "mtl/tensor.hpp"

namespace mtl::io {

using json = nlohmann::json;

// Raw little-endian double payload with a small header; round-trips bitwise.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Named tensor records concatenated in one file.
void write_tensor_map(const std::filesystem::path& path,
                      const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_tensor_map(const std::filesystem::path& path);

void write_text_atomic(const std::filesystem::path& path, const std::string& text);
void write_json_atomic(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

}  // namespace mtl::io
