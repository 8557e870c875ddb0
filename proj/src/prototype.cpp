// SPDX-License-Identifier: Apache-2.0
#include "homnet/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace homnet {

namespace {

void check_class(const ModelConfig& c, int class_index)
{
  if (class_index < 0 || class_index >= c.classes)
    throw std::out_of_range("class " + std::to_string(class_index) + " out of range [0," + std::to_string(c.classes) + ")");
}

}  // namespace

Image decode_capsule(HitNet<float>& model, int class_index, std::span<const float> capsule)
{
  const ModelConfig& c = model.config();
  check_class(c, class_index);
  if (static_cast<int>(capsule.size()) != c.capsule_size) throw ShapeError("decode_capsule: capsule has wrong size");
  Tensor<float> masked({1, c.capsule_features()});
  for (int j = 0; j < c.capsule_size; ++j) masked[class_index * c.capsule_size + j] = capsule[static_cast<std::size_t>(j)];
  Graph<float> g;
  g.set_grad_enabled(false);
  const Tensor<float>& out = model.decode(g, g.constant(std::move(masked))).value();
  return {out.data().data(), out.data().data() + out.size()};
}

Image generate_prototype(HitNet<float>& model, int class_index)
{
  const std::vector<float> center(static_cast<std::size_t>(model.config().capsule_size), 0.5f);
  return decode_capsule(model, class_index, center);
}

std::vector<Image> generate_prototypes(HitNet<float>& model)
{
  std::vector<Image> out;
  for (int k = 0; k < model.config().classes; ++k) out.push_back(generate_prototype(model, k));
  return out;
}

SweepGrid feature_sweep(HitNet<float>& model, int class_index, int feature, double lo, double hi, int steps)
{
  const ModelConfig& c = model.config();
  check_class(c, class_index);
  if (feature < 0 || feature >= c.capsule_size)
    throw std::out_of_range("feature " + std::to_string(feature) + " out of range [0," + std::to_string(c.capsule_size) + ")");
  if (!(lo < hi)) throw std::invalid_argument("feature_sweep: need lo < hi");
  if (steps < 2) throw std::invalid_argument("feature_sweep: need at least 2 steps");

  SweepGrid grid;
  grid.class_index = class_index;
  grid.feature = feature;
  std::vector<float> capsule(static_cast<std::size_t>(c.capsule_size), 0.5f);
  for (int i = 0; i < steps; ++i) {
    const double v = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps - 1);
    grid.values.push_back(v);
    capsule[static_cast<std::size_t>(feature)] = static_cast<float>(v);
    grid.images.push_back(decode_capsule(model, class_index, capsule));
  }
  return grid;
}

FeatureStats feature_histogram(HitNet<float>& model, const Dataset& data, std::size_t batch_size)
{
  const ModelConfig& c = model.config();
  const auto n = static_cast<std::size_t>(c.capsule_size);
  const auto cells = static_cast<std::size_t>(c.classes) * n;
  FeatureStats stats;
  stats.classes = c.classes;
  stats.capsule_size = c.capsule_size;
  stats.counts.assign(static_cast<std::size_t>(c.classes), 0);
  std::vector<double> sum(cells, 0.0), sum2(cells, 0.0);

  const Mode saved = model.mode();
  model.set_mode(Mode::inference);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Graph<float> g;
    g.set_grad_enabled(false);
    const Tensor<float>& caps = model.capsules(g, g.constant(image_batch(data, idx))).value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const int label = data.labels[idx[b]];
      check_class(c, label);
      ++stats.counts[static_cast<std::size_t>(label)];
      for (std::size_t j = 0; j < n; ++j) {
        const double v = caps[static_cast<Index>((b * static_cast<std::size_t>(c.classes) + static_cast<std::size_t>(label)) * n + j)];
        sum[static_cast<std::size_t>(label) * n + j] += v;
        sum2[static_cast<std::size_t>(label) * n + j] += v * v;
      }
    }
  }
  model.set_mode(saved);

  stats.mean.resize(cells);
  stats.stddev.resize(cells);
  for (int k = 0; k < c.classes; ++k) {
    const std::size_t count = stats.counts[static_cast<std::size_t>(k)];
    if (count == 0) throw std::invalid_argument("feature_histogram: class " + std::to_string(k) + " has no images");
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t cell = static_cast<std::size_t>(k) * n + j;
      const double mu = sum[cell] / static_cast<double>(count);
      stats.mean[cell] = mu;
      stats.stddev[cell] = std::sqrt(std::max(0.0, sum2[cell] / static_cast<double>(count) - mu * mu));
    }
  }
  return stats;
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

namespace {

void write_pgm_bytes(const std::vector<std::uint8_t>& pixels, int rows, int cols, const std::filesystem::path& path)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw std::runtime_error("write error in " + path.string());
}

}  // namespace

void write_pgm(const Image& image, int rows, int cols, const std::filesystem::path& path)
{
  if (image.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
    throw std::invalid_argument("write_pgm: image size does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  std::vector<std::uint8_t> bytes(image.size());
  std::transform(image.begin(), image.end(), bytes.begin(), to_byte);
  write_pgm_bytes(bytes, rows, cols, path);
}

void export_grid(std::span<const Image> images, int image_rows, int image_cols, GridLayout layout, const std::filesystem::path& path)
{
  if (images.empty()) throw std::invalid_argument("export_grid: no images");
  if (layout.rows <= 0 || layout.cols <= 0) throw std::invalid_argument("export_grid: layout must be positive");
  if (static_cast<std::size_t>(layout.rows) * static_cast<std::size_t>(layout.cols) < images.size())
    throw std::invalid_argument("export_grid: layout too small for " + std::to_string(images.size()) + " images");
  const int height = layout.rows * image_rows + (layout.rows - 1);
  const int width = layout.cols * image_cols + (layout.cols - 1);
  std::vector<std::uint8_t> canvas(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 255);
  for (int r = 0; r < layout.rows; ++r)
    for (int c = 0; c < layout.cols; ++c) {
      const std::size_t k = static_cast<std::size_t>(r * layout.cols + c);
      for (int y = 0; y < image_rows; ++y)
        for (int x = 0; x < image_cols; ++x) {
          std::uint8_t v = 0;
          if (k < images.size()) {
            if (images[k].size() != static_cast<std::size_t>(image_rows) * static_cast<std::size_t>(image_cols))
              throw std::invalid_argument("export_grid: image " + std::to_string(k) + " has wrong size");
            v = to_byte(images[k][static_cast<std::size_t>(y * image_cols + x)]);
          }
          canvas[static_cast<std::size_t>((r * (image_rows + 1) + y) * width + c * (image_cols + 1) + x)] = v;
        }
    }
  write_pgm_bytes(canvas, height, width, path);
}

}  // namespace homnet
