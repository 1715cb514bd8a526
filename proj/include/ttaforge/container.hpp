// SPDX-License-Identifier: Apache-2.0
#pragma once

// Versioned binary container shared by model checkpoints, source statistics
// and exported datasets.
//
// Layout (all integers and floats little-endian):
//   magic   "TTAFORGE" (8 bytes)
//   u32     format version
//   str     kind                          (str = u32 length + bytes)
//   u32     n_ints,    n_ints    x (str key, i64 value)
//   u32     n_strings, n_strings x (str key, str value)
//   u32     n_arrays,  n_arrays  x (str name, u32 ndim, ndim x u64 dim, f64 data...)
//   u32     CRC-32 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ttaforge/tensor.hpp"

namespace ttaforge {

inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  std::string kind;
  std::map<std::string, std::int64_t> ints;
  std::map<std::string, std::string> strings;
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(std::string name, Tensor t) { arrays.emplace_back(std::move(name), std::move(t)); }
  const Tensor& array(std::string_view name) const;
  bool has_array(std::string_view name) const;
  std::int64_t integer(std::string_view key) const;
  const std::string& string(std::string_view key) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
/// Throws FormatError on bad magic, version mismatch, truncation or checksum failure.
/// An empty `expected_kind` accepts any kind.
Container decode_container(const std::vector<std::uint8_t>& bytes, std::string_view expected_kind = {});

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path, std::string_view expected_kind = {});

}  // namespace ttaforge
