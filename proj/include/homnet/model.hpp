// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/hom.hpp"
#include "homnet/layers.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace homnet {

// Architecture hyperparameters. Defaults are the full-size MNIST network;
// desk-scale runs shrink `channels`.
struct ModelConfig {
  int channels = 256;
  int classes = 10;
  int capsule_size = 16;
  int height = 28;
  int width = 28;
  int kernel = 9;
  int decoder_hidden1 = 512;
  int decoder_hidden2 = 1024;

  Index encoder_features() const
  {
    const Index h1 = conv_output_size(height, kernel, 1), w1 = conv_output_size(width, kernel, 1);
    const Index h2 = conv_output_size(h1, kernel, 2), w2 = conv_output_size(w1, kernel, 2);
    return static_cast<Index>(channels) * h2 * w2;
  }
  Index pixels() const { return static_cast<Index>(height) * width; }
  Index capsule_features() const { return static_cast<Index>(classes) * capsule_size; }
};

inline bool operator==(const ModelConfig& a, const ModelConfig& b)
{
  return a.channels == b.channels && a.classes == b.classes && a.capsule_size == b.capsule_size && a.height == b.height &&
         a.width == b.width && a.kernel == b.kernel && a.decoder_hidden1 == b.decoder_hidden1 &&
         a.decoder_hidden2 == b.decoder_hidden2;
}

// Two 9x9 ReLU convolutions (strides 1 then 2), flattened.
template <typename Scalar>
struct Encoder {
  Conv2D<Scalar> conv1;
  Conv2D<Scalar> conv2;

  Encoder() = default;
  explicit Encoder(const ModelConfig& c)
      : conv1(1, c.channels, c.kernel, c.kernel, 1, 1), conv2(c.channels, c.channels, c.kernel, c.kernel, 2, 2)
  {
  }

  Var<Scalar> forward(Graph<Scalar>& g, Var<Scalar> images)
  {
    Var<Scalar> x = relu(conv1.forward(g, images));
    x = relu(conv2.forward(g, x));
    return reshape(x, {x.shape()[0], x.size() / x.shape()[0]});
  }
};

template <typename Scalar>
struct HitNetOutput {
  Var<Scalar> predictions;      // [B, K] distances to the central capsule
  Var<Scalar> reconstructions;  // [B, H*W]
  Var<Scalar> capsules;         // [B, K, n]
};

// Encoder -> dense -> BN -> sigmoid (HoM) -> distances, with a masked
// three-layer decoder reconstructing the input.
template <typename Scalar>
class HitNet {
 public:
  explicit HitNet(ModelConfig config = {})
      : config_(config),
        encoder_(config),
        fc_hom_(config.encoder_features(), config.capsule_features()),
        hom_bn_(config.capsule_features()),
        dec1_(config.capsule_features(), config.decoder_hidden1),
        dec2_(config.decoder_hidden1, config.decoder_hidden2),
        dec_out_(config.decoder_hidden2, config.pixels())
  {
  }

  const ModelConfig& config() const { return config_; }

  void init(std::uint64_t seed)
  {
    encoder_.conv1.init(seed + 1);
    encoder_.conv2.init(seed + 2);
    fc_hom_.init(seed + 3);
    dec1_.init(seed + 4);
    dec2_.init(seed + 5);
    dec_out_.init(seed + 6);
  }

  void set_mode(Mode mode) { hom_bn_.mode = mode; }
  Mode mode() const { return hom_bn_.mode; }

  // images: [B, 1, H, W] -> HoM capsules [B, K, n] in (0, 1).
  Var<Scalar> capsules(Graph<Scalar>& g, Var<Scalar> images)
  {
    check_images(images);
    Var<Scalar> features = encoder_.forward(g, images);
    Var<Scalar> hom = sigmoid(hom_bn_.forward(g, fc_hom_.forward(g, features)));
    return reshape(hom, {hom.shape()[0], config_.classes, config_.capsule_size});
  }

  // masked: [B, K*n] -> reconstructions [B, H*W] in (0, 1).
  Var<Scalar> decode(Graph<Scalar>& g, Var<Scalar> masked)
  {
    Var<Scalar> x = relu(dec1_.forward(g, masked));
    x = relu(dec2_.forward(g, x));
    return sigmoid(dec_out_.forward(g, x));
  }

  // Masks with `mask_class` (the true labels while training).
  HitNetOutput<Scalar> forward(Graph<Scalar>& g, Var<Scalar> images, std::span<const int> mask_class)
  {
    Var<Scalar> caps = capsules(g, images);
    Var<Scalar> distances = predict_distances(caps);
    return {distances, decode(g, mask_capsules(caps, mask_class)), caps};
  }

  // Masks with the predicted class, reusing the same encoder pass.
  HitNetOutput<Scalar> forward_predicted(Graph<Scalar>& g, Var<Scalar> images)
  {
    Var<Scalar> caps = capsules(g, images);
    Var<Scalar> distances = predict_distances(caps);
    const std::vector<int> predicted = classify(distances.value());
    return {distances, decode(g, mask_capsules(caps, std::span<const int>(predicted))), caps};
  }

  std::vector<NamedTensor<Scalar>> parameters()
  {
    std::vector<NamedTensor<Scalar>> out;
    encoder_.conv1.collect("conv1", out);
    encoder_.conv2.collect("conv2", out);
    fc_hom_.collect("fc_hom", out);
    hom_bn_.collect_parameters("hom_bn", out);
    dec1_.collect("dec1", out);
    dec2_.collect("dec2", out);
    dec_out_.collect("dec_out", out);
    return out;
  }

  std::vector<NamedTensor<Scalar>> buffers()
  {
    std::vector<NamedTensor<Scalar>> out;
    hom_bn_.collect_buffers("hom_bn", out);
    return out;
  }

  BatchNorm<Scalar>& hom_bn() { return hom_bn_; }

 private:
  void check_images(Var<Scalar> images) const
  {
    const Shape expected{images.shape().empty() ? 0 : images.shape()[0], 1, config_.height, config_.width};
    if (images.shape() != expected) throw ShapeError("hitnet", images.shape(), expected);
  }

  ModelConfig config_;
  Encoder<Scalar> encoder_;
  Dense<Scalar> fc_hom_;
  BatchNorm<Scalar> hom_bn_;
  Dense<Scalar> dec1_;
  Dense<Scalar> dec2_;
  Dense<Scalar> dec_out_;
};

// Conventional CNN baseline: same encoder, dense to K, BN, softmax.
template <typename Scalar>
class Baseline {
 public:
  explicit Baseline(ModelConfig config = {})
      : config_(config), encoder_(config), fc_(config.encoder_features(), config.classes), bn_(config.classes)
  {
  }

  const ModelConfig& config() const { return config_; }

  void init(std::uint64_t seed)
  {
    encoder_.conv1.init(seed + 1);
    encoder_.conv2.init(seed + 2);
    fc_.init(seed + 3);
  }

  void set_mode(Mode mode) { bn_.mode = mode; }
  Mode mode() const { return bn_.mode; }

  // Pre-softmax scores [B, K].
  Var<Scalar> logits(Graph<Scalar>& g, Var<Scalar> images) { return bn_.forward(g, fc_.forward(g, encoder_.forward(g, images))); }

  Var<Scalar> probabilities(Graph<Scalar>& g, Var<Scalar> images) { return softmax(logits(g, images)); }

  std::vector<NamedTensor<Scalar>> parameters()
  {
    std::vector<NamedTensor<Scalar>> out;
    encoder_.conv1.collect("conv1", out);
    encoder_.conv2.collect("conv2", out);
    fc_.collect("fc", out);
    bn_.collect_parameters("bn", out);
    return out;
  }

  std::vector<NamedTensor<Scalar>> buffers()
  {
    std::vector<NamedTensor<Scalar>> out;
    bn_.collect_buffers("bn", out);
    return out;
  }

 private:
  ModelConfig config_;
  Encoder<Scalar> encoder_;
  Dense<Scalar> fc_;
  BatchNorm<Scalar> bn_;
};

struct CompositeLossParams {
  double alpha = 0.392;
};

inline double composite_loss(double centripetal, double reconstruction, const CompositeLossParams& p)
{
  return centripetal + p.alpha * reconstruction;
}

template <typename Scalar>
Var<Scalar> composite_loss(Var<Scalar> centripetal, Var<Scalar> reconstruction, const CompositeLossParams& p)
{
  return add(centripetal, scale(reconstruction, static_cast<Scalar>(p.alpha)));
}

// Mean over batch and pixels of the squared difference. Shapes must agree
// after flattening each image.
template <typename Scalar>
Var<Scalar> reconstruction_loss(Var<Scalar> images, Var<Scalar> reconstructions)
{
  if (images.size() != reconstructions.size()) throw ShapeError("reconstruction_loss", images.shape(), reconstructions.shape());
  return mean(square(sub(reshape(images, reconstructions.shape()), reconstructions)));
}

}  // namespace homnet
