// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/checkpoint.hpp"
#include "homnet/data.hpp"
#include "homnet/model.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace homnet {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias-corrected moments. Moments are keyed by parameter name and
// created on first use.
template <typename Scalar>
class Adam {
 public:
  using Vector = typename Tensor<Scalar>::Vector;

  struct Slot {
    std::string name;
    Vector m;
    Vector v;
  };

  explicit Adam(double learning_rate = 1e-3, AdamConfig config = {}) : learning_rate_(learning_rate), config_(config) {}

  void step(std::span<const NamedTensor<Scalar>> params)
  {
    for (const auto& p : params) {
      if (!p.tensor->has_grad()) continue;
      const Vector& g = *p.tensor->grad_opt();
      if (!g.allFinite()) {
        Index bad = 0;
        while (bad < g.size() && std::isfinite(static_cast<double>(g[bad]))) ++bad;
        throw NonFiniteError("adam: non-finite gradient in parameter '" + p.name + "' at element " + std::to_string(bad) +
                             " (step " + std::to_string(step_ + 1) + ")");
      }
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    const auto b1 = static_cast<Scalar>(config_.beta1), b2 = static_cast<Scalar>(config_.beta2);
    const auto step_size = static_cast<Scalar>(learning_rate_ / c1);
    const auto inv_sqrt_c2 = static_cast<Scalar>(1.0 / std::sqrt(c2));
    const auto eps = static_cast<Scalar>(config_.epsilon);
    for (const auto& p : params) {
      Slot& s = slot(p.name, p.tensor->size());
      if (p.tensor->has_grad()) {
        const Vector& g = *p.tensor->grad_opt();
        s.m = b1 * s.m + (Scalar{1} - b1) * g;
        s.v = b2 * s.v + (Scalar{1} - b2) * g.cwiseProduct(g);
      } else {
        s.m *= b1;
        s.v *= b2;
      }
      p.tensor->data().array() -= step_size * s.m.array() / (s.v.array().sqrt() * inv_sqrt_c2 + eps);
    }
  }

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr) { learning_rate_ = lr; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t step) { step_ = step; }
  const AdamConfig& config() const { return config_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

  Slot& slot(const std::string& name, Index size)
  {
    for (auto& s : slots_)
      if (s.name == name) {
        if (s.m.size() != size) throw ShapeError("adam: moment size mismatch for '" + name + "'");
        return s;
      }
    slots_.push_back(Slot{name, Vector::Zero(size), Vector::Zero(size)});
    return slots_.back();
  }

 private:
  double learning_rate_;
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<Slot> slots_;
};

struct Schedule {
  enum class Kind { constant, exponential_decay };
  Kind kind = Kind::constant;
  double decay_factor = 0.95;

  // Learning rate in effect during (0-based) epoch `epoch`.
  double learning_rate(double initial, int epoch) const
  {
    if (kind == Kind::constant) return initial;
    return initial * std::pow(decay_factor, static_cast<double>(epoch));
  }
};

enum class ModelKind { hitnet, baseline };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 250;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  Schedule schedule;
  std::uint64_t seed = 1;
  int max_shift = 2;
  CentripetalParams loss;
  CompositeLossParams composite;
  // Fraction of training images replaced by a hybrid-augmented version.
  double hybrid_prob = 0.0;
  // Apply hybrid augmentation to the shifted image (true) or to the
  // original one, skipping the shift (false).
  bool hybrid_from_shifted = true;
  double tweak_bound = 0.025;
  std::size_t eval_batch = 500;
  bool evaluate_each_epoch = true;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double learning_rate = 0;
  double l1 = 0;
  double l2 = 0;
  double total = 0;
  double test_error = 0;
  double seconds = 0;
};

// Equal in every field except wall time.
bool same_metrics(const EpochMetrics& a, const EpochMetrics& b);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);
std::string format_error_rate(double e);
void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> history);

std::vector<int> predict(HitNet<float>& model, const Tensor<float>& images);
std::vector<int> predict(Baseline<float>& model, const Tensor<float>& images);

// Fraction of misclassified images, in inference mode.
template <typename Model>
double evaluate(Model& model, const Dataset& data, std::size_t batch_size = 500);

struct LossParts {
  Var<float> l1;
  Var<float> l2;  // invalid (graph == nullptr) for the baseline
  Var<float> total;
};

LossParts batch_loss(HitNet<float>& model, Graph<float>& g, Var<float> images, std::span<const int> labels, const TrainConfig& cfg);
LossParts batch_loss(Baseline<float>& model, Graph<float>& g, Var<float> images, std::span<const int> labels, const TrainConfig& cfg);

template <typename Model>
constexpr ModelKind kind_of();
template <>
constexpr ModelKind kind_of<HitNet<float>>()
{
  return ModelKind::hitnet;
}
template <>
constexpr ModelKind kind_of<Baseline<float>>()
{
  return ModelKind::baseline;
}

// Owns the optimizer and history for one model. Everything random is drawn
// from streams keyed by (seed, epoch, image index), so an epoch's outcome
// depends only on the state at its start.
template <typename Model>
class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochMetrics&)>;

  Trainer(Model& model, TrainConfig config);

  // One epoch over `train`; evaluates on `test` when configured.
  EpochMetrics run_epoch(const Dataset& train, const Dataset& test);

  // Runs epochs until config().epochs have been completed in total.
  const std::vector<EpochMetrics>& train(const Dataset& train, const Dataset& test, const EpochCallback& on_epoch = {});

  // Single optimisation step on a fixed batch (no augmentation).
  double step(const Tensor<float>& images, std::span<const int> labels);

  Model& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  TrainConfig& config() { return config_; }
  int epoch() const { return epoch_; }
  Adam<float>& optimizer() { return adam_; }
  const std::vector<EpochMetrics>& history() const { return history_; }

  Checkpoint checkpoint();
  void restore(const Checkpoint& ckpt);

 private:
  Tensor<float> augmented_batch(const Dataset& train, std::span<const std::size_t> indices, std::span<const int> labels);

  Model& model_;
  TrainConfig config_;
  Adam<float> adam_;
  int epoch_ = 0;
  std::vector<EpochMetrics> history_;
};

extern template class Trainer<HitNet<float>>;
extern template class Trainer<Baseline<float>>;
extern template double evaluate<HitNet<float>>(HitNet<float>&, const Dataset&, std::size_t);
extern template double evaluate<Baseline<float>>(Baseline<float>&, const Dataset&, std::size_t);

// Writes model, optimizer, config and history into a checkpoint.
template <typename Model>
Checkpoint make_checkpoint(Model& model, const TrainConfig& config, const Adam<float>& adam, int epoch,
                           std::span<const EpochMetrics> history);

ModelConfig checkpoint_model_config(const Checkpoint& ckpt);
ModelKind checkpoint_model_kind(const Checkpoint& ckpt);
TrainConfig checkpoint_train_config(const Checkpoint& ckpt);
std::vector<EpochMetrics> checkpoint_history(const Checkpoint& ckpt);

// Copies parameters and running statistics into `model`; throws when the
// checkpoint's kind or architecture differs.
template <typename Model>
void load_model_state(const Checkpoint& ckpt, Model& model);

}  // namespace homnet
