#include "mvdiff/archive.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "mvdiff/errors.hpp"

namespace mvdiff {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'D', 'A'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  MVD_REQUIRE(in.good(), "tensor archive truncated");
  return v;
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  MVD_REQUIRE(out.good(), "cannot write " + path.string());
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<uint32_t>(t.ndim()));
    for (int64_t d : t.shape()) put(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  MVD_REQUIRE(out.good(), "failed writing " + path.string());
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MVD_REQUIRE(in.good(), "cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  MVD_REQUIRE(in.good() && std::memcmp(magic, kMagic, 4) == 0, path.string() + " is not a tensor archive");
  MVD_REQUIRE(get<uint32_t>(in) == kVersion, "unsupported tensor archive version");
  const auto count = get<uint64_t>(in);
  NamedTensors out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    const auto len = get<uint32_t>(in);
    MVD_REQUIRE(len < (1u << 16), "tensor archive: implausible name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto ndim = get<uint32_t>(in);
    MVD_REQUIRE(ndim <= 8, "tensor archive: implausible rank");
    Shape shape(ndim);
    for (auto& d : shape) {
      d = get<int64_t>(in);
      MVD_REQUIRE(d >= 0, "tensor archive: negative dimension");
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    MVD_REQUIRE(in.good(), "tensor archive truncated");
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace mvdiff
