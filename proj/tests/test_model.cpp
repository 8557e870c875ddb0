// SPDX-License-Identifier: Apache-2.0
#include "homnet/model.hpp"

#include "oracles.hpp"

#include <doctest.h>

using namespace homnet;
using namespace homnet::test;

namespace {

ModelConfig tiny()
{
  ModelConfig c;
  c.channels = 2;
  c.classes = 3;
  c.capsule_size = 4;
  c.height = 12;
  c.width = 12;
  c.kernel = 3;
  c.decoder_hidden1 = 6;
  c.decoder_hidden2 = 8;
  return c;
}

CentripetalParams tiny_loss()
{
  CentripetalParams p;
  p.capsule_size = 4;
  return p;
}

double composite(HitNet<double>& model, Graph<double>& g, const TensorD& images, const std::vector<int>& labels, bool backward)
{
  auto out = model.forward(g, g.constant(images), std::span<const int>(labels));
  auto l1 = centripetal_loss(out.predictions, std::span<const int>(labels), tiny_loss());
  auto l2 = reconstruction_loss(g.constant(images), out.reconstructions);
  auto total = composite_loss(l1, l2, CompositeLossParams{});
  if (backward) g.backward(total);
  return total.value()[0];
}

}  // namespace

TEST_CASE("full-size shape chain")
{
  ModelConfig c;
  CHECK(c.encoder_features() == 9216);
  CHECK(c.capsule_features() == 160);
  CHECK(c.pixels() == 784);

  c.channels = 4;
  HitNet<float> model(c);
  model.init(1);
  Graph<float> g;
  g.set_grad_enabled(false);
  const std::vector<int> labels = {3, 7};
  auto out = model.forward(g, g.constant(Tensor<float>::constant({2, 1, 28, 28}, 0.3f)), std::span<const int>(labels));
  CHECK(out.capsules.shape() == Shape{2, 10, 16});
  CHECK(out.predictions.shape() == Shape{2, 10});
  CHECK(out.reconstructions.shape() == Shape{2, 784});
  CHECK(out.reconstructions.value().data().minCoeff() > 0.0f);
  CHECK(out.reconstructions.value().data().maxCoeff() < 1.0f);
  CHECK(out.capsules.value().data().minCoeff() > 0.0f);
  CHECK_THROWS_AS(model.capsules(g, g.constant(Tensor<float>({2, 1, 20, 28}))), ShapeError);
}

TEST_CASE("end-to-end gradient of the composite loss")
{
  std::mt19937_64 rng(21);
  HitNet<double> model(tiny());
  model.init(5);
  TensorD images = random_tensor({4, 1, 12, 12}, rng, 0.0, 1.0);
  const std::vector<int> labels = {0, 1, 2, 1};

  for (auto& p : model.parameters()) p.tensor->clear_grad();
  {
    Graph<double> g;
    composite(model, g, images, labels, true);
  }

  // Nothing near a staircase breakpoint, so differences are smooth.
  {
    Graph<double> g;
    g.set_grad_enabled(false);
    auto d = model.forward(g, g.constant(images), std::span<const int>(labels)).predictions;
    for (Index b = 0; b < 4; ++b)
      for (Index k = 0; k < 3; ++k) REQUIRE(breakpoint_gap(d.value()[b * 3 + k], k == labels[b], tiny_loss()) > 1e-4);
  }

  auto params = model.parameters();
  std::vector<Eigen::VectorXd> grads;
  for (auto& p : params) grads.push_back(p.tensor->grad());
  std::vector<double> analytic, numeric;
  int layers_checked = 0;
  for (auto& p : params) {
    const Eigen::VectorXd& grad = grads[static_cast<std::size_t>(layers_checked)];
    std::uniform_int_distribution<Index> pick(0, p.tensor->size() - 1);
    std::vector<double> a, n;
    for (int s = 0; s < 3; ++s) {
      const Index i = pick(rng);
      const double keep = (*p.tensor)[i], eps = 1e-6;
      (*p.tensor)[i] = keep + eps;
      Graph<double> g1;
      const double up = composite(model, g1, images, labels, false);
      (*p.tensor)[i] = keep - eps;
      Graph<double> g2;
      const double down = composite(model, g2, images, labels, false);
      (*p.tensor)[i] = keep;
      a.push_back(grad[i]);
      n.push_back((up - down) / (2 * eps));
    }
    analytic.insert(analytic.end(), a.begin(), a.end());
    numeric.insert(numeric.end(), n.begin(), n.end());
    CAPTURE(p.name);
    const Eigen::Map<Eigen::VectorXd> av(a.data(), 3), nv(n.data(), 3);
    if (std::max(av.norm(), nv.norm()) > 1e-8) CHECK(relative_error(av, nv) < 1e-2);
    ++layers_checked;
  }
  CHECK(analytic.size() >= 20);
  CHECK(layers_checked == 14);
  const Eigen::Map<Eigen::VectorXd> av(analytic.data(), static_cast<Index>(analytic.size())),
      nv(numeric.data(), static_cast<Index>(numeric.size()));
  CHECK(relative_error(av, nv) < 1e-2);
}

TEST_CASE("masking isolates the kept capsule")
{
  std::mt19937_64 rng(2);
  HitNet<double> model(tiny());
  model.init(9);
  Graph<double> g;
  TensorD caps = random_tensor({1, 3, 4}, rng, 0.0, 1.0);
  const std::vector<int> keep = {1};
  auto r1 = model.decode(g, mask_capsules(g.constant(caps), std::span<const int>(keep)));
  caps[0] += 0.3;   // class 0
  caps[11] -= 0.4;  // class 2
  auto r2 = model.decode(g, mask_capsules(g.constant(caps), std::span<const int>(keep)));
  CHECK(r1.value().data() == r2.value().data());
  caps[5] += 0.2;  // kept class
  auto r3 = model.decode(g, mask_capsules(g.constant(caps), std::span<const int>(keep)));
  CHECK(r1.value().data() != r3.value().data());
}

TEST_CASE("inference forward is deterministic and batch independent")
{
  std::mt19937_64 rng(6);
  HitNet<double> model(tiny());
  model.init(3);
  model.set_mode(Mode::inference);
  TensorD one = random_tensor({1, 1, 12, 12}, rng, 0.0, 1.0);
  TensorD two({2, 1, 12, 12});
  two.data() << one.data(), one.data();
  Graph<double> g;
  auto a = model.forward_predicted(g, g.constant(one));
  auto b = model.forward_predicted(g, g.constant(two));
  for (Index k = 0; k < 3; ++k) {
    CHECK(b.predictions.value()[k] == doctest::Approx(a.predictions.value()[k]).epsilon(1e-12));
    CHECK(b.predictions.value()[3 + k] == doctest::Approx(a.predictions.value()[k]).epsilon(1e-12));
  }
  // predicted-class masking: decoder input only in the winning slot
  const int winner = classify(a.predictions.value())[0];
  auto masked = mask_capsules(a.capsules, std::span<const int>(std::vector<int>{winner}));
  for (Index i = 0; i < masked.size(); ++i)
    if (i / 4 != winner) CHECK(masked.value()[i] == 0.0);
}

TEST_CASE("composite and reconstruction losses")
{
  CHECK(composite_loss(0.04, 0.1, CompositeLossParams{}) == doctest::Approx(0.0792));
  CHECK(composite_loss(0.04, 0.1, CompositeLossParams{0.0}) == 0.04);
  Graph<double> g;
  auto zeros = g.constant(TensorD({2, 4}));
  auto ones = g.constant(TensorD::constant({2, 4}, 1.0));
  CHECK(reconstruction_loss(zeros, zeros).value()[0] == 0.0);
  CHECK(reconstruction_loss(zeros, ones).value()[0] == doctest::Approx(1.0));
  auto half = g.constant(TensorD({2, 4}, {1, 0, 1, 0, 1, 0, 1, 0}));
  CHECK(reconstruction_loss(half, zeros).value()[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(reconstruction_loss(zeros, g.constant(TensorD({2, 3}))), ShapeError);
}

TEST_CASE("baseline outputs probabilities")
{
  ModelConfig c = tiny();
  Baseline<double> model(c);
  model.init(1);
  std::mt19937_64 rng(1);
  Graph<double> g;
  auto p = model.probabilities(g, g.constant(random_tensor({4, 1, 12, 12}, rng, 0.0, 1.0)));
  CHECK(p.shape() == Shape{4, 3});
  for (Index b = 0; b < 4; ++b) CHECK(p.value().data().segment(b * 3, 3).sum() == doctest::Approx(1.0).epsilon(1e-5));

  auto uniform = softmax(g.constant(TensorD({1, 4})));
  CHECK(uniform.value()[2] == doctest::Approx(0.25));
  const std::vector<int> label = {0};
  CHECK(softmax_cross_entropy(g.constant(TensorD({1, 3}, {60, 0, 0})), std::span<const int>(label)).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-12));

  auto names = model.parameters();
  CHECK(names.size() == 8);
  CHECK(names[4].name == "fc.weight");
}
