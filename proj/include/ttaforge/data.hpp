// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic synthetic image classification data and corruption transforms.
//
// Images are oriented sinusoidal gratings: class c has orientation c*pi/C.
// Each sample draws its own phase, amplitude, orientation jitter, offset and
// pixel noise. Pixels live in [-1, 1]. All randomness comes from Rng, so a
// (spec, seed) pair fixes the dataset on every platform.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ttaforge/tensor.hpp"

namespace ttaforge {

struct SyntheticSpec {
  std::size_t num_classes = 3;
  std::size_t per_class = 100;
  std::size_t image_size = 8;
  std::size_t channels = 1;
  double cycles_per_pixel = 0.25;
  double amplitude_min = 0.5;
  double amplitude_max = 0.9;
  /// Orientation jitter as a fraction of the class spacing (pi / C), uniform +-.
  double orientation_jitter = 0.2;
  double offset_max = 0.1;
  double pixel_noise = 0.05;

  void validate() const;
};

/// PixelAffine is the invertible constructed shift x -> (1 - t) x + t with
/// t = severity / 16; it keeps pixels inside [-1, 1] without clipping.
enum class CorruptionKind { Identity, GaussianNoise, Contrast, Brightness, PixelAffine };

CorruptionKind parse_corruption(std::string_view name);
std::string_view to_string(CorruptionKind kind);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::Identity;
  int severity = 0;  // 0..8, 0 is the identity
};

inline constexpr int kMaxSeverity = 8;

/// Noise standard deviation for severities 1..8 (0 for severity 0).
double gaussian_noise_std(int severity);
/// Contrast factor toward the per-image mean (1 for severity 0).
double contrast_factor(int severity);
/// Additive brightness offset (0 for severity 0).
double brightness_offset(int severity);

struct Dataset {
  Tensor images;  // [N, H, W, C]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  // metadata
  std::string generator;
  std::uint64_t seed = 0;
  std::string corruption = "identity";
  int severity = 0;

  std::size_t size() const { return labels.size(); }
};

/// Class-balanced dataset ordered by class; fully determined by (spec, seed).
Dataset gen_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Returns corrupted copies; the input is not modified. Gaussian noise adds
/// N(0, std(s)^2) per pixel then clips to [-1, 1]; contrast scales each image
/// toward its mean; brightness adds a constant then clips.
Tensor corrupt(const Tensor& images, const CorruptionSpec& spec, std::uint64_t seed);
Dataset corrupt(const Dataset& data, const CorruptionSpec& spec, std::uint64_t seed);

/// Pixel-wise affine map a*x + b without clipping.
Tensor affine_pixels(const Tensor& images, double scale, double shift);
/// (scale, shift) of the PixelAffine corruption at a severity.
std::pair<double, double> pixel_affine_params(int severity);
/// Exact inverse of the PixelAffine corruption.
Tensor invert_pixel_affine(const Tensor& images, int severity);

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset
};

/// One shuffled pass; the final partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed);
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace ttaforge
