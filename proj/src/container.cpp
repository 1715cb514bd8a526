// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/container.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ttaforge/error.hpp"

namespace ttaforge {

namespace {

constexpr char kMagic[8] = {'T', 'T', 'A', 'F', 'O', 'R', 'G', 'E'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  void need(std::size_t n) {
    if (static_cast<std::size_t>(end_ - p_) < n) throw FormatError("container truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[i]) << (8 * i);
    p_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[i]) << (8 * i);
    p_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  bool done() const { return p_ == end_; }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

std::uint32_t crc(const std::uint8_t* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

const Tensor& Container::array(std::string_view name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return t;
  }
  throw FormatError("container has no array '" + std::string(name) + "'");
}

bool Container::has_array(std::string_view name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return true;
  }
  return false;
}

std::int64_t Container::integer(std::string_view key) const {
  auto it = ints.find(std::string(key));
  if (it == ints.end()) throw FormatError("container has no field '" + std::string(key) + "'");
  return it->second;
}

const std::string& Container::string(std::string_view key) const {
  auto it = strings.find(std::string(key));
  if (it == strings.end()) throw FormatError("container has no field '" + std::string(key) + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kContainerVersion);
  w.str(c.kind);
  w.u32(static_cast<std::uint32_t>(c.ints.size()));
  for (const auto& [k, v] : c.ints) {
    w.str(k);
    w.i64(v);
  }
  w.u32(static_cast<std::uint32_t>(c.strings.size()));
  for (const auto& [k, v] : c.strings) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& [name, t] : c.arrays) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  const std::uint32_t sum = crc(w.buffer().data(), w.buffer().size());
  w.u32(sum);
  return std::move(w.buffer());
}

Container decode_container(const std::vector<std::uint8_t>& bytes, std::string_view expected_kind) {
  if (bytes.size() < sizeof kMagic + 8) throw FormatError("container truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw FormatError("not a ttaforge container (bad magic)");

  Reader r(bytes.data() + sizeof kMagic, bytes.size() - sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version) + " (expected " +
                      std::to_string(kContainerVersion) + ")");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (crc(bytes.data(), body) != stored) throw FormatError("container checksum mismatch");

  Reader body_reader(bytes.data() + sizeof kMagic + 4, body - sizeof kMagic - 4);
  Container c;
  c.kind = body_reader.str();
  if (!expected_kind.empty() && c.kind != expected_kind) {
    throw FormatError("expected a '" + std::string(expected_kind) + "' container, found '" + c.kind + "'");
  }
  const std::uint32_t n_ints = body_reader.u32();
  for (std::uint32_t i = 0; i < n_ints; ++i) {
    std::string k = body_reader.str();
    c.ints[k] = body_reader.i64();
  }
  const std::uint32_t n_strings = body_reader.u32();
  for (std::uint32_t i = 0; i < n_strings; ++i) {
    std::string k = body_reader.str();
    c.strings[k] = body_reader.str();
  }
  const std::uint32_t n_arrays = body_reader.u32();
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    std::string name = body_reader.str();
    const std::uint32_t ndim = body_reader.u32();
    if (ndim > 8) throw FormatError("array '" + name + "' has implausible rank");
    Shape shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = body_reader.u64();
      if (d == 0) throw FormatError("array '" + name + "' has a zero dimension");
      numel *= d;
    }
    body_reader.need(numel * 8);
    std::vector<double> data(numel);
    for (auto& v : data) v = body_reader.f64();
    c.arrays.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!body_reader.done()) throw FormatError("trailing bytes in container");
  return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path, std::string_view expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes, expected_kind);
}

}  // namespace ttaforge
