// SPDX-License-Identifier: Apache-2.0
#include "homnet/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace homnet {

namespace {

bool has_gz_suffix(const std::filesystem::path& path) { return path.extension() == ".gz"; }

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset)
{
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::string hex32(std::uint32_t v)
{
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw IdxError(IdxError::Kind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw IdxError(IdxError::Kind::io, "gzip read error in " + path.string());
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw IdxError(IdxError::Kind::io, "cannot write " + path.string());
    const int n = bytes.empty() ? 0 : gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw IdxError(IdxError::Kind::io, "gzip write error in " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IdxError(IdxError::Kind::io, "write error in " + path.string());
}

Dataset Dataset::head(std::size_t count) const
{
  if (count == 0 || count >= size()) return *this;
  Dataset out;
  out.rows = rows;
  out.cols = cols;
  out.class_count = class_count;
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
  out.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(count * pixels()));
  return out;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path, int class_count)
{
  const std::vector<std::uint8_t> img = read_file_bytes(images_path);
  const std::vector<std::uint8_t> lab = read_file_bytes(labels_path);

  if (img.size() < 4 || read_be32(img, 0) != idx_images_magic)
    throw IdxError(IdxError::Kind::bad_magic, images_path.string() + ": bad magic (expected " + hex32(idx_images_magic) + ")");
  if (lab.size() < 4 || read_be32(lab, 0) != idx_labels_magic)
    throw IdxError(IdxError::Kind::bad_magic, labels_path.string() + ": bad magic (expected " + hex32(idx_labels_magic) + ")");
  if (img.size() < 16) throw IdxError(IdxError::Kind::truncated, images_path.string() + ": truncated header");
  if (lab.size() < 8) throw IdxError(IdxError::Kind::truncated, labels_path.string() + ": truncated header");

  const std::size_t count = read_be32(img, 4);
  const std::size_t rows = read_be32(img, 8);
  const std::size_t cols = read_be32(img, 12);
  const std::size_t label_count = read_be32(lab, 4);
  if (img.size() < 16 + count * rows * cols)
    throw IdxError(IdxError::Kind::truncated, images_path.string() + ": truncated, header announces " + std::to_string(count) + " images");
  if (lab.size() < 8 + label_count)
    throw IdxError(IdxError::Kind::truncated, labels_path.string() + ": truncated, header announces " + std::to_string(label_count) + " labels");
  if (count != label_count)
    throw IdxError(IdxError::Kind::count_mismatch,
                   "count mismatch: " + std::to_string(count) + " images vs " + std::to_string(label_count) + " labels");

  Dataset data;
  data.rows = static_cast<int>(rows);
  data.cols = static_cast<int>(cols);
  data.class_count = class_count;
  data.images.resize(count * rows * cols);
  std::transform(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(data.images.size()), data.images.begin(),
                 [](std::uint8_t b) { return static_cast<float>(b) / 255.0f; });
  data.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = lab[8 + i];
    if (label >= class_count)
      throw IdxError(IdxError::Kind::bad_label, labels_path.string() + ": label " + std::to_string(label) + " at index " +
                                                    std::to_string(i) + " is not below class count " + std::to_string(class_count));
    data.labels[i] = label;
  }
  return data;
}

void save_idx(const Dataset& data, const std::filesystem::path& images_path, const std::filesystem::path& labels_path)
{
  std::vector<std::uint8_t> img;
  img.reserve(16 + data.images.size());
  append_be32(img, idx_images_magic);
  append_be32(img, static_cast<std::uint32_t>(data.size()));
  append_be32(img, static_cast<std::uint32_t>(data.rows));
  append_be32(img, static_cast<std::uint32_t>(data.cols));
  for (float p : data.images) img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));

  std::vector<std::uint8_t> lab;
  lab.reserve(8 + data.size());
  append_be32(lab, idx_labels_magic);
  append_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.push_back(static_cast<std::uint8_t>(l));

  write_file_bytes(images_path, img);
  write_file_bytes(labels_path, lab);
}

std::vector<float> shift_image(std::span<const float> image, int rows, int cols, int dx, int dy)
{
  std::vector<float> out(image.size(), 0.0f);
  for (int r = 0; r < rows; ++r) {
    const int sr = r - dy;
    if (sr < 0 || sr >= rows) continue;
    for (int c = 0; c < cols; ++c) {
      const int sc = c - dx;
      if (sc < 0 || sc >= cols) continue;
      out[static_cast<std::size_t>(r * cols + c)] = image[static_cast<std::size_t>(sr * cols + sc)];
    }
  }
  return out;
}

std::vector<float> shift_augment(std::span<const float> image, int rows, int cols, int max_shift, std::mt19937_64& rng)
{
  if (max_shift <= 0) return {image.begin(), image.end()};
  std::uniform_int_distribution<int> dist(-max_shift, max_shift);
  const int dx = dist(rng);
  const int dy = dist(rng);
  return shift_image(image, rows, cols, dx, dy);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index)
{
  // splitmix64 finaliser applied to each component in turn
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ epoch) ^ index);
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch)
{
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be at least 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(stream_seed(seed, epoch, ~std::uint64_t{0}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, start + batch_size)));
  return batches;
}

Tensor<float> image_batch(const Dataset& data, std::span<const std::size_t> indices)
{
  Tensor<float> out({static_cast<Index>(indices.size()), 1, data.rows, data.cols});
  const auto px = static_cast<Index>(data.pixels());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto img = data.image(indices[b]);
    out.data().segment(static_cast<Index>(b) * px, px) = Eigen::Map<const Eigen::VectorXf>(img.data(), px);
  }
  return out;
}

Tensor<float> image_batch(std::span<const std::vector<float>> images, int rows, int cols)
{
  const Index px = static_cast<Index>(rows) * cols;
  Tensor<float> out({static_cast<Index>(images.size()), 1, rows, cols});
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (static_cast<Index>(images[b].size()) != px) throw ShapeError("image_batch: image " + std::to_string(b) + " has wrong size");
    out.data().segment(static_cast<Index>(b) * px, px) = Eigen::Map<const Eigen::VectorXf>(images[b].data(), px);
  }
  return out;
}

std::vector<float> random_tweak(int capsule_size, double bound, std::mt19937_64& rng)
{
  if (bound < 0) throw std::invalid_argument("random_tweak: bound must be >= 0");
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<float> out(static_cast<std::size_t>(capsule_size));
  for (float& v : out) v = static_cast<float>(dist(rng));
  return out;
}

std::vector<HybridSample> hybrid_augment_batch(HitNet<float>& model, std::span<const std::vector<float>> images,
                                               std::span<const int> labels, std::span<const std::vector<float>> tweaks,
                                               float clip_lo, float clip_hi)
{
  const ModelConfig& c = model.config();
  if (labels.size() != images.size() || tweaks.size() != images.size())
    throw std::invalid_argument("hybrid_augment: images, labels and tweaks must have the same length");
  if (images.empty()) return {};
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (labels[b] < 0 || labels[b] >= c.classes)
      throw std::out_of_range("hybrid_augment: label " + std::to_string(labels[b]) + " out of range [0," + std::to_string(c.classes) + ")");
    if (static_cast<int>(tweaks[b].size()) != c.capsule_size)
      throw ShapeError("hybrid_augment: tweak has " + std::to_string(tweaks[b].size()) + " entries, capsule size is " +
                       std::to_string(c.capsule_size));
  }

  const Mode saved = model.mode();
  model.set_mode(Mode::inference);
  Graph<float> g;
  g.set_grad_enabled(false);
  Var<float> caps = model.capsules(g, g.constant(image_batch(images, c.height, c.width)));
  Tensor<float> original = mask_capsules(caps, labels).value();
  Tensor<float> modified = original;
  for (std::size_t b = 0; b < images.size(); ++b)
    for (int j = 0; j < c.capsule_size; ++j)
      modified[static_cast<Index>(b) * c.capsule_features() + labels[b] * c.capsule_size + j] += tweaks[b][static_cast<std::size_t>(j)];
  const Tensor<float> rec = model.decode(g, g.constant(std::move(original))).value();
  const Tensor<float> mod = model.decode(g, g.constant(std::move(modified))).value();
  model.set_mode(saved);

  const auto px = static_cast<std::size_t>(c.pixels());
  std::vector<HybridSample> out(images.size());
  for (std::size_t b = 0; b < images.size(); ++b) {
    HybridSample& s = out[b];
    const float* r = rec.data().data() + b * px;
    const float* m = mod.data().data() + b * px;
    s.reconstruction.assign(r, r + px);
    s.modified.assign(m, m + px);
    s.image.resize(px);
    for (std::size_t i = 0; i < px; ++i) s.image[i] = std::clamp(images[b][i] + (m[i] - r[i]), clip_lo, clip_hi);
  }
  return out;
}

HybridSample hybrid_augment_detailed(HitNet<float>& model, std::span<const float> image, int label,
                                     std::span<const float> tweak, float clip_lo, float clip_hi)
{
  if (static_cast<Index>(image.size()) != model.config().pixels()) throw ShapeError("hybrid_augment: image size does not match the model");
  const std::vector<std::vector<float>> images{std::vector<float>(image.begin(), image.end())};
  const std::vector<std::vector<float>> tweaks{std::vector<float>(tweak.begin(), tweak.end())};
  const int labels[] = {label};
  return std::move(hybrid_augment_batch(model, images, labels, tweaks, clip_lo, clip_hi).front());
}

std::vector<float> hybrid_augment(HitNet<float>& model, std::span<const float> image, int label, std::span<const float> tweak,
                                  float clip_lo, float clip_hi)
{
  return hybrid_augment_detailed(model, image, label, tweak, clip_lo, clip_hi).image;
}

}  // namespace homnet
