#include "mtl/io.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace mtl::io {

namespace {

constexpr uint32_t kTensorMagic = 0x4d544c54;  // "MTLT"

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void write_tensor_body(std::ostream& os, const Tensor& t) {
  write_u32(os, kTensorMagic);
  write_u32(os, static_cast<uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) write_i64(os, t.size(i));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
}

Tensor read_tensor_body(std::istream& is) {
  if (read_u32(is) != kTensorMagic) throw std::runtime_error("tensor record: bad magic");
  uint32_t nd = read_u32(is);
  if (nd > 8) throw std::runtime_error("tensor record: implausible rank");
  Shape s(nd);
  for (uint32_t i = 0; i < nd; ++i) s[i] = read_i64(is);
  Tensor t(s);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  if (!is) throw std::runtime_error("tensor record: truncated payload");
  return t;
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  write_tensor_body(os, t);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  return read_tensor_body(is);
}

void write_tensor_map(const std::filesystem::path& path,
                      const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  write_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_body(os, t);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::map<std::string, Tensor> read_tensor_map(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  uint32_t count = read_u32(is);
  std::map<std::string, Tensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = read_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    out.emplace(std::move(name), read_tensor_body(is));
  }
  if (!is) throw std::runtime_error("tensor map: truncated file");
  return out;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + tmp.string());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_json_atomic(const std::filesystem::path& path, const json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  json j;
  is >> j;
  return j;
}

}  // namespace mtl::io
