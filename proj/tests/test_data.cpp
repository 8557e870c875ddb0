// SPDX-License-Identifier: Apache-2.0
#include "homnet/data.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace homnet;
using namespace homnet::test;

namespace fs = std::filesystem;

namespace {

Dataset tiny_dataset()
{
  Dataset d;
  d.rows = 2;
  d.cols = 3;
  d.class_count = 10;
  for (int i = 0; i < 4; ++i) {
    for (int p = 0; p < 6; ++p) d.images.push_back(static_cast<float>((i * 37 + p * 50) % 256) / 255.0f);
    d.labels.push_back(i * 3 % 10);
  }
  d.images[0] = 1.0f;
  return d;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig small_model()
{
  ModelConfig c;
  c.channels = 2;
  c.decoder_hidden1 = 16;
  c.decoder_hidden2 = 16;
  return c;
}

}  // namespace

TEST_CASE("IDX round trip is byte exact")
{
  const auto dir = temp_dir("idx");
  const Dataset d = tiny_dataset();
  save_idx(d, dir / "img", dir / "lab");
  const Dataset back = load_idx(dir / "img", dir / "lab");
  CHECK(back.rows == 2);
  CHECK(back.cols == 3);
  CHECK(back.labels == d.labels);
  CHECK(back.images == d.images);
  CHECK(back.images[0] == 1.0f);
  save_idx(back, dir / "img2", dir / "lab2");
  CHECK(bytes_of(dir / "img") == bytes_of(dir / "img2"));
  CHECK(bytes_of(dir / "lab") == bytes_of(dir / "lab2"));
  CHECK(bytes_of(dir / "img").size() == 16 + 24);
}

TEST_CASE("gzip IDX files are read by suffix")
{
  const auto dir = temp_dir("idx_gz");
  const Dataset d = tiny_dataset();
  save_idx(d, dir / "img.gz", dir / "lab.gz");
  CHECK(bytes_of(dir / "img.gz")[0] == 0x1f);
  const Dataset back = load_idx(dir / "img.gz", dir / "lab.gz");
  CHECK(back.images == d.images);
  CHECK(back.labels == d.labels);
}

TEST_CASE("IDX errors are distinct")
{
  const auto dir = temp_dir("idx_err");
  save_idx(tiny_dataset(), dir / "img", dir / "lab");
  auto kind_of = [](auto&& fn) {
    try {
      fn();
    } catch (const IdxError& e) {
      return e.kind();
    }
    FAIL("no IdxError");
    return IdxError::Kind::io;
  };
  CHECK(kind_of([&] { load_idx(dir / "lab", dir / "img"); }) == IdxError::Kind::bad_magic);
  CHECK(kind_of([&] { load_idx(dir / "missing", dir / "lab"); }) == IdxError::Kind::io);

  auto img = bytes_of(dir / "img");
  img.resize(img.size() - 5);
  write_file_bytes(dir / "short", img);
  CHECK(kind_of([&] { load_idx(dir / "short", dir / "lab"); }) == IdxError::Kind::truncated);

  Dataset three = tiny_dataset();
  three.labels.pop_back();
  three.images.resize(three.images.size() - 6);
  save_idx(three, dir / "img3", dir / "lab3");
  CHECK(kind_of([&] { load_idx(dir / "img", dir / "lab3"); }) == IdxError::Kind::count_mismatch);
  CHECK(kind_of([&] { load_idx(dir / "img", dir / "lab", 5); }) == IdxError::Kind::bad_label);
}

TEST_CASE("head keeps the first images")
{
  const Dataset d = tiny_dataset();
  const Dataset h = d.head(2);
  CHECK(h.size() == 2);
  CHECK(h.images.size() == 12);
  CHECK(h.labels[1] == d.labels[1]);
  CHECK(d.head(0).size() == 4);
  CHECK(d.head(99).size() == 4);
}

TEST_CASE("shifts")
{
  std::vector<float> img(28 * 28, 0.0f);
  img[10 * 28 + 10] = 1.0f;
  auto s = shift_image(img, 28, 28, 2, 0);
  CHECK(s[10 * 28 + 12] == 1.0f);
  CHECK(std::accumulate(s.begin(), s.end(), 0.0f) == 1.0f);
  auto up = shift_image(img, 28, 28, 0, -3);
  CHECK(up[7 * 28 + 10] == 1.0f);

  std::mt19937_64 rng(1);
  CHECK(shift_augment(img, 28, 28, 0, rng) == img);

  std::vector<float> full(28 * 28, 1.0f);
  std::mt19937_64 a(7), b(7);
  for (int i = 0; i < 50; ++i) {
    auto x = shift_augment(full, 28, 28, 2, a);
    auto y = shift_augment(full, 28, 28, 2, b);
    CHECK(x == y);
    CHECK(std::accumulate(x.begin(), x.end(), 0.0f) <= 784.0f);
  }
  // every offset in [-2, 2]^2 shows up
  std::set<std::pair<int, int>> seen;
  std::mt19937_64 r(3);
  for (int i = 0; i < 2000; ++i) {
    auto x = shift_augment(img, 28, 28, 2, r);
    for (int p = 0; p < 784; ++p)
      if (x[static_cast<std::size_t>(p)] == 1.0f) seen.insert({p % 28 - 10, p / 28 - 10});
  }
  CHECK(seen.size() == 25);
}

TEST_CASE("batches")
{
  auto b = make_batches(10, 4, 1);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[2].size() == 2);
  std::set<std::size_t> all;
  for (auto& batch : b) all.insert(batch.begin(), batch.end());
  CHECK(all.size() == 10);
  CHECK(make_batches(10, 4, 1) == b);
  CHECK(make_batches(10, 4, 1, 1) != b);
  CHECK(make_batches(100, 7, 2) != make_batches(100, 7, 3));
  CHECK_THROWS(make_batches(10, 0, 1));
  CHECK(stream_seed(1, 2, 3) != stream_seed(1, 3, 2));
}

TEST_CASE("image batches")
{
  const Dataset d = tiny_dataset();
  const std::vector<std::size_t> idx = {2, 0};
  Tensor<float> t = image_batch(d, idx);
  CHECK(t.shape() == Shape{2, 1, 2, 3});
  CHECK(t[0] == d.image(2)[0]);
  CHECK(t[6] == d.image(0)[0]);
}

TEST_CASE("random tweaks stay in bounds")
{
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i)
    for (float v : random_tweak(16, 0.025, rng)) CHECK(std::abs(v) <= 0.025f);
  CHECK_THROWS(random_tweak(16, -1, rng));
}

TEST_CASE("hybrid augmentation")
{
  HitNet<float> model(small_model());
  model.init(2);
  const Dataset data = synthetic_digits(4, 1);
  const std::vector<float> zero(16, 0.0f);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto x = data.image(i);
    const auto out = hybrid_augment(model, x, data.labels[i], zero);
    for (std::size_t p = 0; p < out.size(); ++p) CHECK(std::abs(out[p] - x[p]) <= 1e-6f);
  }
  CHECK(model.mode() == Mode::training);

  std::vector<float> tweak(16, 0.0f);
  tweak[3] = 0.025f;
  const auto x = data.image(0);
  const HybridSample s = hybrid_augment_detailed(model, x, data.labels[0], tweak);
  bool differs = false;
  for (std::size_t p = 0; p < s.image.size(); ++p) {
    const float expect = std::clamp(x[p] + s.modified[p] - s.reconstruction[p], 0.0f, 1.0f);
    CHECK(std::abs(s.image[p] - expect) <= 1e-6f);
    CHECK(s.image[p] >= 0.0f);
    CHECK(s.image[p] <= 1.0f);
    differs = differs || s.modified[p] != s.reconstruction[p];
  }
  CHECK(differs);

  CHECK_THROWS_AS(hybrid_augment(model, x, 10, zero), std::out_of_range);
  CHECK_THROWS_AS(hybrid_augment(model, x, 0, std::vector<float>(3, 0.0f)), ShapeError);

  // batched and per-image paths agree
  std::vector<std::vector<float>> imgs, tweaks;
  std::vector<int> labels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    imgs.emplace_back(data.image(i).begin(), data.image(i).end());
    labels.push_back(data.labels[i]);
    tweaks.push_back(tweak);
  }
  const auto batch = hybrid_augment_batch(model, imgs, labels, tweaks);
  for (std::size_t p = 0; p < s.image.size(); ++p) CHECK(std::abs(batch[0].image[p] - s.image[p]) <= 1e-5f);
}
