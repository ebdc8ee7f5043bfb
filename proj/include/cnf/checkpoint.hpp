#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include "cnf/errors.hpp"
#include "cnf/fabric.hpp"

namespace cnf {

// Checkpoint layout (host byte order, little-endian on every supported target):
//
//   "CNFCKPT\0"                      8-byte magic
//   u32 version (1), u32 scalar size (4 = float, 8 = double)
//   i32 layers, scales, channels, resolution, classes
//   u64 link count
//   block(stem)
//   per link, in id order: u8 alive, block(link)
//   tensor(head weight), tensor(head bias)
//
//   block  = tensor(weight) tensor(bias) tensor(gamma) tensor(beta)
//            tensor(running mean) tensor(running var) u8 has_mask [tensor(mask)]
//   tensor = u32 rank, u64 extents[rank], raw scalars
inline constexpr char kCheckpointMagic[8] = {'C', 'N', 'F', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class CkptWriter {
 public:
  explicit CkptWriter(const std::filesystem::path& path) : os_(path, std::ios::binary) {
    if (!os_) throw FormatError("cannot write checkpoint " + path.string());
  }
  template <typename V>
  void pod(const V& v) {
    static_assert(std::is_trivially_copyable_v<V>);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  template <typename T>
  void tensor(const Tensor<T>& t) {
    pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) pod(static_cast<std::uint64_t>(d));
    os_.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  void bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    os_.flush();
    if (!os_) throw FormatError("checkpoint write failed");
  }

 private:
  std::ofstream os_;
};

class CkptReader {
 public:
  explicit CkptReader(const std::filesystem::path& path) : is_(path, std::ios::binary), path_(path.string()) {
    if (!is_) throw FormatError("cannot read checkpoint " + path_);
  }
  template <typename V>
  V pod() {
    V v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is_) throw FormatError(path_ + ": truncated checkpoint");
    return v;
  }
  template <typename T>
  Tensor<T> tensor(const Shape& expected) {
    const auto rank = pod<std::uint32_t>();
    Shape s;
    for (std::uint32_t i = 0; i < rank; ++i) s.push_back(static_cast<std::size_t>(pod<std::uint64_t>()));
    if (s != expected)
      throw FormatError(path_ + ": tensor shape " + shape_string(s) + ", expected " + shape_string(expected));
    Tensor<T> t(s);
    is_.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!is_) throw FormatError(path_ + ": truncated checkpoint");
    return t;
  }
  void bytes(char* p, std::size_t n) {
    is_.read(p, static_cast<std::streamsize>(n));
    if (!is_) throw FormatError(path_ + ": truncated checkpoint");
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream is_;
  std::string path_;
};

template <typename T>
void write_block(CkptWriter& w, const ConvBn<T>& b) {
  w.tensor(b.weight.value);
  w.tensor(b.bias.value);
  w.tensor(b.gamma.value);
  w.tensor(b.beta.value);
  w.tensor(b.stats.mean);
  w.tensor(b.stats.var);
  w.pod(static_cast<std::uint8_t>(b.weight.mask.has_value()));
  if (b.weight.mask) w.tensor(*b.weight.mask);
}

template <typename T>
void read_block(CkptReader& r, ConvBn<T>& b) {
  b.weight.value = r.tensor<T>(b.weight.value.shape());
  b.bias.value = r.tensor<T>(b.bias.value.shape());
  b.gamma.value = r.tensor<T>(b.gamma.value.shape());
  b.beta.value = r.tensor<T>(b.beta.value.shape());
  b.stats.mean = r.tensor<T>(b.stats.mean.shape());
  b.stats.var = r.tensor<T>(b.stats.var.shape());
  if (r.pod<std::uint8_t>())
    b.weight.mask = r.tensor<T>(b.weight.value.shape());
  else
    b.weight.mask.reset();
  for (auto* p : b.parameters()) p->zero_grad();
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Fabric<T>& f, const std::filesystem::path& path) {
  detail::CkptWriter w(path);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint32_t>(sizeof(T)));
  const auto& d = f.dims();
  for (int v : {d.layers, d.scales, d.channels, d.resolution, d.classes}) w.pod(static_cast<std::int32_t>(v));
  w.pod(static_cast<std::uint64_t>(f.links().size()));
  detail::write_block(w, f.stem());
  for (const auto& l : f.links()) {
    w.pod(static_cast<std::uint8_t>(l.alive));
    detail::write_block(w, l.block);
  }
  w.tensor(f.head_weight().value);
  w.tensor(f.head_bias().value);
  w.finish();
}

template <typename T>
Fabric<T> load_checkpoint(const std::filesystem::path& path) {
  detail::CkptReader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw FormatError(path.string() + ": not a fabric checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto scalar = r.pod<std::uint32_t>();
  if (scalar != sizeof(T))
    throw FormatError(path.string() + ": stored scalars are " + std::to_string(scalar) + " bytes, loader expects " +
                      std::to_string(sizeof(T)));
  FabricDims d;
  d.layers = r.pod<std::int32_t>();
  d.scales = r.pod<std::int32_t>();
  d.channels = r.pod<std::int32_t>();
  d.resolution = r.pod<std::int32_t>();
  d.classes = r.pod<std::int32_t>();
  Fabric<T> f = Fabric<T>::build(d, 0);
  const auto n = r.pod<std::uint64_t>();
  if (n != f.links().size())
    throw FormatError(path.string() + ": " + std::to_string(n) + " links stored, dims imply " +
                      std::to_string(f.links().size()));
  detail::read_block(r, f.stem());
  for (auto& l : f.links()) {
    l.alive = r.pod<std::uint8_t>() != 0;
    detail::read_block(r, l.block);
  }
  f.head_weight().value = r.tensor<T>(f.head_weight().value.shape());
  f.head_bias().value = r.tensor<T>(f.head_bias().value.shape());
  f.head_weight().zero_grad();
  f.head_bias().zero_grad();
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return f;
}

}  // namespace cnf
