// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/autodiff.hpp"
#include "homnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace homnet::test {

using TensorD = Tensor<double>;
using VarD = Var<double>;

inline TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0)
{
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
  const double scale = std::max(a.norm(), b.norm());
  if (scale < 1e-12) return (a - b).norm();
  return (a - b).norm() / scale;
}

using LossFn = std::function<VarD(Graph<double>&, std::vector<VarD>&)>;

struct GradCheck {
  double worst = 0;  // largest relative error over inputs
  std::vector<double> errors;
};

// Compares backward() against central differences for every input tensor.
inline GradCheck check_gradients(std::vector<TensorD*> inputs, const LossFn& fn, double step = 1e-4)
{
  for (auto* t : inputs) {
    t->set_requires_grad();
    t->clear_grad();
  }
  {
    Graph<double> g;
    std::vector<VarD> vars;
    for (auto* t : inputs) vars.push_back(g.leaf(*t));
    g.backward(fn(g, vars));
  }
  auto eval = [&]() {
    Graph<double> g;
    g.set_grad_enabled(false);
    std::vector<VarD> vars;
    for (auto* t : inputs) vars.push_back(g.leaf(*t));
    return fn(g, vars).value()[0];
  };
  GradCheck out;
  for (auto* t : inputs) {
    Eigen::VectorXd numeric(t->size());
    for (Index i = 0; i < t->size(); ++i) {
      const double keep = (*t)[i];
      (*t)[i] = keep + step;
      const double up = eval();
      (*t)[i] = keep - step;
      const double down = eval();
      (*t)[i] = keep;
      numeric[i] = (up - down) / (2 * step);
    }
    const double err = relative_error(t->grad(), numeric);
    out.errors.push_back(err);
    out.worst = std::max(out.worst, err);
  }
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name)
{
  const auto dir = std::filesystem::temp_directory_path() / ("homnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Blobs whose position depends on the label, so a small model can separate them.
inline Dataset synthetic_digits(std::size_t count, std::uint64_t seed, int classes = 10)
{
  Dataset d;
  d.class_count = classes;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.15);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    const int cy = 6 + 4 * (label / 4), cx = 6 + 5 * (label % 4);
    for (int y = 0; y < d.rows; ++y)
      for (int x = 0; x < d.cols; ++x) {
        const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double v = std::exp(-r2 / 8.0) + noise(rng);
        d.images.push_back(static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0));
      }
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace homnet::test
