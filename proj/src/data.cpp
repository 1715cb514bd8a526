// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>

#include "ttaforge/backbone.hpp"
#include "ttaforge/container.hpp"
#include "ttaforge/error.hpp"
#include "ttaforge/rng.hpp"

namespace ttaforge {

namespace {

constexpr std::array<double, kMaxSeverity + 1> kNoiseStd = {0.0, 0.08, 0.12, 0.18, 0.26, 0.38, 0.50, 0.60, 0.70};
constexpr std::array<double, kMaxSeverity + 1> kContrast = {1.0, 0.8, 0.65, 0.5, 0.4, 0.3, 0.22, 0.15, 0.1};
constexpr std::array<double, kMaxSeverity + 1> kBrightness = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};

void check_severity(int s) {
  if (s < 0 || s > kMaxSeverity) throw ConfigError("severity must lie in 0.." + std::to_string(kMaxSeverity));
}

double clip(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

void SyntheticSpec::validate() const {
  if (num_classes < 1) throw ConfigError("synthetic data needs at least one class");
  if (per_class < 1) throw ConfigError("synthetic data needs at least one sample per class");
  if (image_size < 1 || channels < 1) throw ConfigError("image size and channel count must be positive");
  if (amplitude_min < 0.0 || amplitude_max < amplitude_min) throw ConfigError("invalid amplitude range");
  if (orientation_jitter < 0.0 || offset_max < 0.0 || pixel_noise < 0.0) throw ConfigError("negative jitter");
}

CorruptionKind parse_corruption(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "identity" || s == "none") return CorruptionKind::Identity;
  if (s == "gaussian_noise" || s == "gaussian-noise" || s == "noise") return CorruptionKind::GaussianNoise;
  if (s == "contrast") return CorruptionKind::Contrast;
  if (s == "brightness") return CorruptionKind::Brightness;
  if (s == "pixel_affine" || s == "pixel-affine" || s == "affine") return CorruptionKind::PixelAffine;
  throw ConfigError("unknown corruption '" + std::string(name) + "'");
}

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::Identity: return "identity";
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::Brightness: return "brightness";
    case CorruptionKind::PixelAffine: return "pixel_affine";
  }
  return "?";
}

double gaussian_noise_std(int severity) {
  check_severity(severity);
  return kNoiseStd[static_cast<std::size_t>(severity)];
}

double contrast_factor(int severity) {
  check_severity(severity);
  return kContrast[static_cast<std::size_t>(severity)];
}

double brightness_offset(int severity) {
  check_severity(severity);
  return kBrightness[static_cast<std::size_t>(severity)];
}

Dataset gen_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t C = spec.num_classes, S = spec.image_size, ch = spec.channels;
  const std::size_t n = C * spec.per_class;
  Dataset data;
  data.images = Tensor({n, S, S, ch});
  data.labels.reserve(n);
  data.num_classes = C;
  data.generator = "gratings";
  data.seed = seed;

  Rng rng(seed);
  const double spacing = std::numbers::pi / static_cast<double>(C);
  const double omega = 2.0 * std::numbers::pi * spec.cycles_per_pixel;
  std::size_t i = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k, ++i) {
      const double theta = static_cast<double>(c) * spacing +
                           rng.uniform(-spec.orientation_jitter, spec.orientation_jitter) * spacing;
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = rng.uniform(spec.amplitude_min, spec.amplitude_max);
      const double offset = rng.uniform(-spec.offset_max, spec.offset_max);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double u = ct * static_cast<double>(x) + st * static_cast<double>(y);
          const double base = amp * std::sin(omega * u + phase) + offset;
          for (std::size_t q = 0; q < ch; ++q) {
            const double gain = 1.0 - 0.2 * static_cast<double>(q);
            data.images[((i * S + y) * S + x) * ch + q] = clip(gain * base + spec.pixel_noise * rng.normal());
          }
        }
      data.labels.push_back(static_cast<int>(c));
    }
  }
  return data;
}

Tensor corrupt(const Tensor& images, const CorruptionSpec& spec, std::uint64_t seed) {
  check_severity(spec.severity);
  Tensor out = images;
  if (spec.severity == 0 || spec.kind == CorruptionKind::Identity) return out;
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise: {
      Rng rng(seed);
      const double sd = gaussian_noise_std(spec.severity);
      for (double& v : out.values()) v = clip(v + sd * rng.normal());
      break;
    }
    case CorruptionKind::Contrast: {
      const double f = contrast_factor(spec.severity);
      const std::size_t per = images.size() / images.shape()[0];
      for (std::size_t i = 0; i < images.shape()[0]; ++i) {
        auto px = out.values().subspan(i * per, per);
        double m = 0.0;
        for (double v : px) m += v;
        m /= static_cast<double>(per);
        for (double& v : px) v = clip(m + f * (v - m));
      }
      break;
    }
    case CorruptionKind::Brightness: {
      const double b = brightness_offset(spec.severity);
      for (double& v : out.values()) v = clip(v + b);
      break;
    }
    case CorruptionKind::PixelAffine: {
      const auto [a, b] = pixel_affine_params(spec.severity);
      for (double& v : out.values()) v = a * v + b;
      break;
    }
    case CorruptionKind::Identity: break;
  }
  return out;
}

Dataset corrupt(const Dataset& data, const CorruptionSpec& spec, std::uint64_t seed) {
  Dataset out = data;
  out.images = corrupt(data.images, spec, seed);
  out.corruption = std::string(to_string(spec.kind));
  out.severity = spec.severity;
  return out;
}

Tensor affine_pixels(const Tensor& images, double scale, double shift) {
  Tensor out = images;
  for (double& v : out.values()) v = scale * v + shift;
  return out;
}

std::pair<double, double> pixel_affine_params(int severity) {
  check_severity(severity);
  const double t = static_cast<double>(severity) / 16.0;
  return {1.0 - t, t};
}

Tensor invert_pixel_affine(const Tensor& images, int severity) {
  const auto [a, b] = pixel_affine_params(severity);
  Tensor out = images;
  for (double& v : out.values()) v = (v - b) / a;
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (n == 0) throw Error("cannot batch an empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  Rng rng(seed);
  std::vector<std::size_t> order = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t first = 0; first < n; first += batch_size) {
    const std::size_t last = std::min(n, first + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(first), order.begin() + static_cast<std::ptrdiff_t>(last));
  }
  return out;
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed) {
  std::vector<Batch> out;
  for (auto& idx : batch_indices(data.size(), batch_size, seed)) {
    Batch b;
    b.images = gather_images(data.images, idx);
    for (std::size_t i : idx) b.labels.push_back(data.labels[i]);
    b.indices = std::move(idx);
    out.push_back(std::move(b));
  }
  return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  Container c;
  c.kind = "dataset";
  c.ints = {{"num_classes", static_cast<std::int64_t>(data.num_classes)},
            {"seed", static_cast<std::int64_t>(data.seed)},
            {"severity", data.severity}};
  c.strings = {{"generator", data.generator}, {"corruption", data.corruption}};
  c.add("images", data.images);
  Tensor labels({data.labels.size()});
  for (std::size_t i = 0; i < data.labels.size(); ++i) labels[i] = data.labels[i];
  c.add("labels", std::move(labels));
  write_container(c, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Container c = read_container(path, "dataset");
  Dataset d;
  d.num_classes = static_cast<std::size_t>(c.integer("num_classes"));
  d.seed = static_cast<std::uint64_t>(c.integer("seed"));
  d.severity = static_cast<int>(c.integer("severity"));
  d.generator = c.string("generator");
  d.corruption = c.string("corruption");
  d.images = c.array("images");
  if (d.images.ndim() != 4) throw FormatError("dataset images must be [N, H, W, C]");
  const Tensor& labels = c.array("labels");
  labels.expect_shape({d.images.shape()[0]}, "dataset labels");
  for (double v : labels.values()) {
    const int y = static_cast<int>(v);
    if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes) throw FormatError("dataset label out of range");
    d.labels.push_back(y);
  }
  return d;
}

}  // namespace ttaforge
