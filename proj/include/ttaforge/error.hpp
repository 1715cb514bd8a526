// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ttaforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised on malformed, truncated or corrupted container files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became non-finite while adapting. `batch_index` is the
/// zero-based index of the batch in the stream.
class CatastrophicFailure : public Error {
 public:
  CatastrophicFailure(std::size_t batch_index, const std::string& what)
      : Error("catastrophic failure at batch " + std::to_string(batch_index) + ": " + what),
        batch_index_(batch_index) {}

  std::size_t batch_index() const noexcept { return batch_index_; }

 private:
  std::size_t batch_index_;
};

}  // namespace ttaforge
