// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/data.hpp"
#include "homnet/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace homnet {

using Image = std::vector<float>;

// Decoder output for the central capsule in slot `class_index`, zeros
// elsewhere.
Image generate_prototype(HitNet<float>& model, int class_index);
std::vector<Image> generate_prototypes(HitNet<float>& model);

// Decodes a single capsule placed in slot `class_index`.
Image decode_capsule(HitNet<float>& model, int class_index, std::span<const float> capsule);

struct SweepGrid {
  int class_index = 0;
  int feature = 0;
  std::vector<double> values;
  std::vector<Image> images;
};

inline constexpr double default_sweep_lo = 0.45;
inline constexpr double default_sweep_hi = 0.55;
inline constexpr int default_sweep_steps = 11;

// Central capsule with component `feature` set to each of `steps` evenly
// spaced values in [lo, hi] (both inclusive), decoded.
SweepGrid feature_sweep(HitNet<float>& model, int class_index, int feature, double lo = default_sweep_lo,
                        double hi = default_sweep_hi, int steps = default_sweep_steps);

struct FeatureStats {
  int classes = 0;
  int capsule_size = 0;
  std::vector<std::size_t> counts;  // images per class
  std::vector<double> mean;         // [class * capsule_size + feature]
  std::vector<double> stddev;

  double mean_at(int k, int j) const { return mean[static_cast<std::size_t>(k * capsule_size + j)]; }
  double std_at(int k, int j) const { return stddev[static_cast<std::size_t>(k * capsule_size + j)]; }
};

// Per-class, per-feature statistics of the true-class capsule, computed in
// inference mode. Throws if some class has no image.
FeatureStats feature_histogram(HitNet<float>& model, const Dataset& data, std::size_t batch_size = 256);

struct GridLayout {
  int rows = 1;
  int cols = 1;
};

// Tiles equally sized images row-major with 1-pixel separators and writes an
// 8-bit binary PGM. Empty cells stay black; separators are white.
void export_grid(std::span<const Image> images, int image_rows, int image_cols, GridLayout layout, const std::filesystem::path& path);
void write_pgm(const Image& image, int rows, int cols, const std::filesystem::path& path);

// 8-bit pixel for an intensity in [0, 1].
std::uint8_t to_byte(float v);

}  // namespace homnet
