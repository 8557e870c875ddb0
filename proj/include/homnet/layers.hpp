// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace homnet {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], deterministic for a seed.
template <typename Scalar>
void init_uniform_fan_in(Tensor<Scalar>& t, Index fan_in, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
}

inline Index conv_output_size(Index input, Index kernel, Index stride)
{
  if (input < kernel) throw ShapeError("conv2d: input extent " + std::to_string(input) + " smaller than kernel " + std::to_string(kernel));
  return (input - kernel) / stride + 1;
}

// Valid-padding cross-correlation (no kernel flip) via im2col + GEMM.
// x: [B, C, H, W], kernel: [O, C, KH, KW], bias: [O] -> [B, O, OH, OW].
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> kernel, Var<Scalar> bias, Index stride_y, Index stride_x)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4) throw ShapeError("conv2d", xs, ks);
  if (xs[1] != ks[1]) throw ShapeError("conv2d: channel mismatch", xs, ks);
  if (bias.size() != ks[0]) throw ShapeError("conv2d bias", ks, bias.shape());
  const Index batch = xs[0], channels = xs[1], height = xs[2], width = xs[3];
  const Index outs = ks[0], kh = ks[2], kw = ks[3];
  const Index oh = conv_output_size(height, kh, stride_y);
  const Index ow = conv_output_size(width, kw, stride_x);
  const Index patch = channels * kh * kw;
  const Index pixels = oh * ow;

  // cols(row = (c, i, j), col = (b, y, x))
  RowMatrix cols(patch, batch * pixels);
  const Scalar* src = x.value().data().data();
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        Scalar* row = cols.row((c * kh + i) * kw + j).data();
        for (Index b = 0; b < batch; ++b) {
          const Scalar* plane = src + (b * channels + c) * height * width;
          for (Index y = 0; y < oh; ++y) {
            const Scalar* line = plane + (y * stride_y + i) * width + j;
            Scalar* dst = row + b * pixels + y * ow;
            for (Index q = 0; q < ow; ++q) dst[q] = line[q * stride_x];
          }
        }
      }

  Eigen::Map<const RowMatrix> w(kernel.value().data().data(), outs, patch);
  RowMatrix y = w * cols;
  y.colwise() += bias.value().data();

  Tensor<Scalar> out({batch, outs, oh, ow});
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < outs; ++o)
      out.data().segment((b * outs + o) * pixels, pixels) = y.row(o).segment(b * pixels, pixels).transpose();

  return x.graph->record(
      std::move(out), {x.id, kernel.id, bias.id},
      [xi = x.id, wi = kernel.id, bi = bias.id, cols = std::move(cols), batch, channels, height, width, outs, kh, kw, oh,
       ow, stride_y, stride_x, patch, pixels](auto& g, const auto& dout, Index) {
        RowMatrix dy(outs, batch * pixels);
        for (Index b = 0; b < batch; ++b)
          for (Index o = 0; o < outs; ++o)
            dy.row(o).segment(b * pixels, pixels) = dout.segment((b * outs + o) * pixels, pixels).transpose();
        if (g.requires_grad(wi)) {
          Eigen::Map<RowMatrix> dw(g.grad(wi).data(), outs, patch);
          dw.noalias() += dy * cols.transpose();
        }
        if (g.requires_grad(bi)) g.grad(bi) += dy.rowwise().sum();
        if (g.requires_grad(xi)) {
          Eigen::Map<const RowMatrix> w(g.value(wi).data().data(), outs, patch);
          RowMatrix dcols = w.transpose() * dy;
          Scalar* dx = g.grad(xi).data();
          for (Index c = 0; c < channels; ++c)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Scalar* row = dcols.row((c * kh + i) * kw + j).data();
                for (Index b = 0; b < batch; ++b) {
                  Scalar* plane = dx + (b * channels + c) * height * width;
                  for (Index y = 0; y < oh; ++y) {
                    Scalar* line = plane + (y * stride_y + i) * width + j;
                    const Scalar* s = row + b * pixels + y * ow;
                    for (Index q = 0; q < ow; ++q) line[q * stride_x] += s[q];
                  }
                }
              }
        }
      });
}

template <typename Scalar>
struct Conv2D {
  Tensor<Scalar> kernel;  // [out, in, kh, kw]
  Tensor<Scalar> bias;    // [out]
  Index stride_y = 1;
  Index stride_x = 1;

  Conv2D() = default;
  Conv2D(Index in_channels, Index out_channels, Index kernel_h, Index kernel_w, Index sy, Index sx)
      : kernel({out_channels, in_channels, kernel_h, kernel_w}), bias({out_channels}), stride_y(sy), stride_x(sx)
  {
    kernel.set_requires_grad();
    bias.set_requires_grad();
  }

  Index fan_in() const { return kernel.dim(1) * kernel.dim(2) * kernel.dim(3); }

  void init(std::uint64_t seed)
  {
    init_uniform_fan_in(kernel, fan_in(), seed);
    bias.data().setZero();
  }

  Var<Scalar> forward(Graph<Scalar>& g, Var<Scalar> x) { return conv2d(x, g.leaf(kernel), g.leaf(bias), stride_y, stride_x); }

  void collect(const std::string& prefix, std::vector<NamedTensor<Scalar>>& out)
  {
    out.push_back({prefix + ".kernel", &kernel});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <typename Scalar>
struct Dense {
  Tensor<Scalar> weight;  // [out, in]
  Tensor<Scalar> bias;    // [out]

  Dense() = default;
  Dense(Index in, Index out) : weight({out, in}), bias({out})
  {
    weight.set_requires_grad();
    bias.set_requires_grad();
  }

  Index in_features() const { return weight.dim(1); }
  Index out_features() const { return weight.dim(0); }

  void init(std::uint64_t seed)
  {
    init_uniform_fan_in(weight, in_features(), seed);
    bias.data().setZero();
  }

  Var<Scalar> forward(Graph<Scalar>& g, Var<Scalar> x) { return linear(x, g.leaf(weight), g.leaf(bias)); }

  void collect(const std::string& prefix, std::vector<NamedTensor<Scalar>>& out)
  {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

enum class Mode { training, inference };

// Per-feature batch normalization over [B, F]. Training mode uses biased
// batch statistics and folds them into the running estimates with an
// exponential moving average; inference reads only the running estimates.
template <typename Scalar>
struct BatchNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar epsilon = Scalar(1e-3);
  Scalar momentum = Scalar(0.99);
  Mode mode = Mode::training;

  BatchNorm() = default;
  explicit BatchNorm(Index features)
      : gamma(Tensor<Scalar>::constant({features}, Scalar{1})),
        beta({features}),
        running_mean({features}),
        running_var(Tensor<Scalar>::constant({features}, Scalar{1}))
  {
    gamma.set_requires_grad();
    beta.set_requires_grad();
  }

  Index features() const { return gamma.size(); }

  Var<Scalar> forward(Graph<Scalar>& g, Var<Scalar> x);

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<Scalar>>& out)
  {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<Scalar>>& out)
  {
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
  }
};

template <typename Scalar>
Var<Scalar> BatchNorm<Scalar>::forward(Graph<Scalar>& g, Var<Scalar> x)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  using Vec = typename Tensor<Scalar>::Vector;
  if (x.value().rank() != 2 || x.shape()[1] != features()) throw ShapeError("batchnorm", x.shape(), gamma.shape());
  const Index batch = x.shape()[0], feats = features();
  Eigen::Map<const RowMatrix> in(x.value().data().data(), batch, feats);

  Vec mean(feats), inv_std(feats);
  if (mode == Mode::training) {
    if (batch < 2) throw std::invalid_argument("batchnorm: training mode needs a batch of at least 2, got 1");
    for (Index f = 0; f < feats; ++f) {
      double s = 0, s2 = 0;
      for (Index b = 0; b < batch; ++b) s += in(b, f);
      const double mu = s / static_cast<double>(batch);
      for (Index b = 0; b < batch; ++b) s2 += (in(b, f) - mu) * (in(b, f) - mu);
      const double var = s2 / static_cast<double>(batch);
      mean[f] = static_cast<Scalar>(mu);
      inv_std[f] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(epsilon)));
      running_mean[f] = momentum * running_mean[f] + (Scalar{1} - momentum) * static_cast<Scalar>(mu);
      running_var[f] = momentum * running_var[f] + (Scalar{1} - momentum) * static_cast<Scalar>(var);
    }
  } else {
    mean = running_mean.data();
    inv_std = (running_var.data().array() + epsilon).rsqrt().matrix();
  }

  Tensor<Scalar> xhat({batch, feats});
  Eigen::Map<RowMatrix> xh(xhat.data().data(), batch, feats);
  xh = (in.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
  Tensor<Scalar> out({batch, feats});
  Eigen::Map<RowMatrix> y(out.data().data(), batch, feats);
  y = (xh.array().rowwise() * gamma.data().transpose().array()).rowwise() + beta.data().transpose().array();

  const bool batch_stats = mode == Mode::training;
  Var<Scalar> gv = g.leaf(gamma), bv = g.leaf(beta);
  return g.record(std::move(out), {x.id, gv.id, bv.id},
                  [xi = x.id, gi = gv.id, bi = bv.id, xhat = std::move(xhat), inv_std, batch, feats, batch_stats](
                      auto& g, const auto& dout, Index) {
                    Eigen::Map<const RowMatrix> dy(dout.data(), batch, feats);
                    Eigen::Map<const RowMatrix> xh(xhat.data().data(), batch, feats);
                    if (g.requires_grad(gi)) g.grad(gi) += dy.cwiseProduct(xh).colwise().sum().transpose();
                    if (g.requires_grad(bi)) g.grad(bi) += dy.colwise().sum().transpose();
                    if (!g.requires_grad(xi)) return;
                    const auto& gam = g.value(gi).data();
                    Eigen::Map<RowMatrix> dx(g.grad(xi).data(), batch, feats);
                    RowMatrix dxhat = dy.array().rowwise() * gam.transpose().array();
                    if (!batch_stats) {
                      dx.array() += dxhat.array().rowwise() * inv_std.transpose().array();
                      return;
                    }
                    const Scalar n = static_cast<Scalar>(batch);
                    for (Index f = 0; f < feats; ++f) {
                      const Scalar sum_d = dxhat.col(f).sum();
                      const Scalar sum_dx = dxhat.col(f).dot(xh.col(f));
                      for (Index b = 0; b < batch; ++b)
                        dx(b, f) += inv_std[f] / n * (n * dxhat(b, f) - sum_d - xh(b, f) * sum_dx);
                    }
                  });
}

// Numerically stable softmax over the last axis.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  const Index classes = x.shape().back();
  const Index rows = x.size() / classes;
  Tensor<Scalar> out(x.shape());
  Eigen::Map<const RowMatrix> in(x.value().data().data(), rows, classes);
  Eigen::Map<RowMatrix> p(out.data().data(), rows, classes);
  p = (in.colwise() - in.rowwise().maxCoeff()).array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, rows, classes](auto& g, const auto& dout, Index self) {
    Eigen::Map<const RowMatrix> d(dout.data(), rows, classes);
    Eigen::Map<const RowMatrix> p(g.value(self).data().data(), rows, classes);
    Eigen::Map<RowMatrix> dx(g.grad(xi).data(), rows, classes);
    const auto dots = d.cwiseProduct(p).rowwise().sum();
    dx.array() += p.array() * (d.colwise() - dots).array();
  });
}

// Mean categorical cross-entropy of softmax(logits) against integer labels.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(Var<Scalar> logits, std::span<const int> labels)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  if (logits.value().rank() != 2 || logits.shape()[0] != static_cast<Index>(labels.size()))
    throw ShapeError("softmax_cross_entropy", logits.shape(), Shape{static_cast<Index>(labels.size())});
  const Index rows = logits.shape()[0], classes = logits.shape()[1];
  Eigen::Map<const RowMatrix> in(logits.value().data().data(), rows, classes);
  RowMatrix p = (in.colwise() - in.rowwise().maxCoeff()).array().exp();
  const auto norm = p.rowwise().sum().eval();
  double total = 0;
  for (Index r = 0; r < rows; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= classes) throw std::out_of_range("softmax_cross_entropy: label out of range");
    total -= std::log(static_cast<double>(p(r, label))) - std::log(static_cast<double>(norm[r]));
  }
  p.array().colwise() /= norm.array();
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor<Scalar> out({}, {static_cast<Scalar>(total / static_cast<double>(rows))});
  return logits.graph->record(std::move(out), {logits.id},
                              [xi = logits.id, p = std::move(p), lab = std::move(lab), rows, classes](auto& g, const auto& dout, Index) {
                                Eigen::Map<RowMatrix> dx(g.grad(xi).data(), rows, classes);
                                RowMatrix d = p;
                                for (Index r = 0; r < rows; ++r) d(r, lab[static_cast<std::size_t>(r)]) -= Scalar{1};
                                dx += d * (dout[0] / static_cast<Scalar>(rows));
                              });
}

}  // namespace homnet
