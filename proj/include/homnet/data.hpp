// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/model.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace homnet {

// Grayscale images scaled to [0, 1] with integer labels.
struct Dataset {
  int rows = 28;
  int cols = 28;
  int class_count = 10;
  std::vector<float> images;  // count * rows * cols, row-major per image
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  std::span<const float> image(std::size_t i) const { return {images.data() + i * pixels(), pixels()}; }
  std::span<float> image(std::size_t i) { return {images.data() + i * pixels(), pixels()}; }

  // First `count` examples (all of them when count is 0 or too large).
  Dataset head(std::size_t count) const;
};

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch, bad_label };

  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

// Reads a whole file, gunzipping when the path ends in ".gz".
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path, int class_count = 10);
// Pixels are written as round(255 * p); loading the output reproduces the
// dataset exactly when it came from load_idx.
void save_idx(const Dataset& data, const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Translate by (dx, dy) pixels (positive = right / down), zero fill.
std::vector<float> shift_image(std::span<const float> image, int rows, int cols, int dx, int dy);
std::vector<float> shift_augment(std::span<const float> image, int rows, int cols, int max_shift, std::mt19937_64& rng);

// Independent RNG stream for (seed, epoch, index); lets augmentation be
// reproduced without carrying generator state around.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

// Shuffled index batches covering [0, count) once; the last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch = 0);

// [B, 1, rows, cols] tensor of the given images.
Tensor<float> image_batch(const Dataset& data, std::span<const std::size_t> indices);
Tensor<float> image_batch(std::span<const std::vector<float>> images, int rows, int cols);

struct AugmentationConfig {
  int max_shift = 2;
  double tweak_bound = 0.025;
  std::uint64_t seed = 0;
};

// Uniform per component in [-bound, bound].
std::vector<float> random_tweak(int capsule_size, double bound, std::mt19937_64& rng);

struct HybridSample {
  std::vector<float> image;           // clip(X_mod + X - X_rec)
  std::vector<float> reconstruction;  // X_rec
  std::vector<float> modified;        // X_mod
};

// Runs the model in inference mode on `image`, adds `tweak` to the capsule of
// `label`, decodes both capsules and transfers the residual X - X_rec onto
// the modified decoding. The model's mode is restored afterwards.
HybridSample hybrid_augment_detailed(HitNet<float>& model, std::span<const float> image, int label,
                                     std::span<const float> tweak, float clip_lo = 0.0f, float clip_hi = 1.0f);
// Same for several images in one batched pass.
std::vector<HybridSample> hybrid_augment_batch(HitNet<float>& model, std::span<const std::vector<float>> images,
                                               std::span<const int> labels, std::span<const std::vector<float>> tweaks,
                                               float clip_lo = 0.0f, float clip_hi = 1.0f);
std::vector<float> hybrid_augment(HitNet<float>& model, std::span<const float> image, int label,
                                  std::span<const float> tweak, float clip_lo = 0.0f, float clip_hi = 1.0f);

}  // namespace homnet
