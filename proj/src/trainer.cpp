// SPDX-License-Identifier: Apache-2.0
#include "homnet/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace homnet {

std::string to_string(ModelKind kind) { return kind == ModelKind::hitnet ? "hitnet" : "baseline"; }

ModelKind model_kind_from_string(const std::string& s)
{
  if (s == "hitnet") return ModelKind::hitnet;
  if (s == "baseline") return ModelKind::baseline;
  throw std::invalid_argument("unknown model kind '" + s + "' (expected hitnet or baseline)");
}

bool same_metrics(const EpochMetrics& a, const EpochMetrics& b)
{
  return a.epoch == b.epoch && a.learning_rate == b.learning_rate && a.l1 == b.l1 && a.l2 == b.l2 && a.total == b.total &&
         a.test_error == b.test_error;
}

std::string metrics_csv_header() { return "epoch,lr,L1,L2,L,test_error,seconds"; }

std::string format_error_rate(double e)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", e);
  return buf;
}

std::string metrics_csv_row(const EpochMetrics& m)
{
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.9g,%.9g,%.9g,%s,%.3f", m.epoch, m.learning_rate, m.l1, m.l2, m.total,
                format_error_rate(m.test_error).c_str(), m.seconds);
  return buf;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> history)
{
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_csv_header() << '\n';
  for (const auto& m : history) out << metrics_csv_row(m) << '\n';
}

std::vector<int> predict(HitNet<float>& model, const Tensor<float>& images)
{
  Graph<float> g;
  g.set_grad_enabled(false);
  Var<float> distances = predict_distances(model.capsules(g, g.constant(images)));
  return classify(distances.value());
}

std::vector<int> predict(Baseline<float>& model, const Tensor<float>& images)
{
  Graph<float> g;
  g.set_grad_enabled(false);
  const Tensor<float>& logits = model.logits(g, g.constant(images)).value();
  // argmax of the logits equals argmax of the softmax
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  const auto m = logits.matrix();
  for (Index b = 0; b < m.rows(); ++b) {
    Index best = 0;
    for (Index k = 1; k < m.cols(); ++k)
      if (m(b, k) > m(b, best)) best = k;
    out[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

template <typename Model>
double evaluate(Model& model, const Dataset& data, std::size_t batch_size)
{
  if (data.size() == 0) return 0.0;
  if (batch_size == 0) batch_size = 1;
  const Mode saved = model.mode();
  model.set_mode(Mode::inference);
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> pred = predict(model, image_batch(data, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) wrong += pred[b] != data.labels[idx[b]];
  }
  model.set_mode(saved);
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

template double evaluate<HitNet<float>>(HitNet<float>&, const Dataset&, std::size_t);
template double evaluate<Baseline<float>>(Baseline<float>&, const Dataset&, std::size_t);

LossParts batch_loss(HitNet<float>& model, Graph<float>& g, Var<float> images, std::span<const int> labels, const TrainConfig& cfg)
{
  HitNetOutput<float> out = model.forward(g, images, labels);
  Var<float> l1 = centripetal_loss(out.predictions, labels, cfg.loss);
  Var<float> l2 = reconstruction_loss(images, out.reconstructions);
  return {l1, l2, composite_loss(l1, l2, cfg.composite)};
}

LossParts batch_loss(Baseline<float>& model, Graph<float>& g, Var<float> images, std::span<const int> labels, const TrainConfig&)
{
  Var<float> ce = softmax_cross_entropy(model.logits(g, images), labels);
  return {ce, Var<float>{}, ce};
}

namespace {

void zero_grads(std::span<const NamedTensor<float>> params)
{
  for (const auto& p : params) p.tensor->zero_grad();
}

}  // namespace

template <typename Model>
Trainer<Model>::Trainer(Model& model, TrainConfig config)
    : model_(model), config_(std::move(config)), adam_(config_.learning_rate)
{
  config_.loss.capsule_size = model.config().capsule_size;
}

template <typename Model>
Tensor<float> Trainer<Model>::augmented_batch(const Dataset& train, std::span<const std::size_t> indices, std::span<const int> labels)
{
  std::vector<std::vector<float>> images(indices.size());
  std::vector<std::size_t> hybrid;  // positions in the batch
  std::vector<std::vector<float>> tweaks;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::mt19937_64 rng(stream_seed(config_.seed, static_cast<std::uint64_t>(epoch_), indices[b]));
    bool use_hybrid = false;
    if constexpr (kind_of<Model>() == ModelKind::hitnet) {
      if (config_.hybrid_prob > 0) {
        use_hybrid = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config_.hybrid_prob;
        if (use_hybrid) {
          hybrid.push_back(b);
          tweaks.push_back(random_tweak(model_.config().capsule_size, config_.tweak_bound, rng));
        }
      }
    }
    const auto src = train.image(indices[b]);
    if (use_hybrid && !config_.hybrid_from_shifted)
      images[b].assign(src.begin(), src.end());
    else
      images[b] = shift_augment(src, train.rows, train.cols, config_.max_shift, rng);
  }
  if constexpr (kind_of<Model>() == ModelKind::hitnet) {
    if (!hybrid.empty()) {
      std::vector<std::vector<float>> sources;
      std::vector<int> hybrid_labels;
      for (std::size_t b : hybrid) {
        sources.push_back(images[b]);
        hybrid_labels.push_back(labels[b]);
      }
      auto generated = hybrid_augment_batch(model_, sources, hybrid_labels, tweaks);
      for (std::size_t i = 0; i < hybrid.size(); ++i) images[hybrid[i]] = std::move(generated[i].image);
    }
  }
  return image_batch(images, train.rows, train.cols);
}

template <typename Model>
double Trainer<Model>::step(const Tensor<float>& images, std::span<const int> labels)
{
  auto params = model_.parameters();
  zero_grads(params);
  model_.set_mode(Mode::training);
  Graph<float> g;
  LossParts loss = batch_loss(model_, g, g.constant(images), labels, config_);
  g.backward(loss.total);
  adam_.step(params);
  return static_cast<double>(loss.total.value()[0]);
}

template <typename Model>
EpochMetrics Trainer<Model>::run_epoch(const Dataset& train, const Dataset& test)
{
  const auto start = std::chrono::steady_clock::now();
  const double lr = config_.schedule.learning_rate(config_.learning_rate, epoch_);
  adam_.set_learning_rate(lr);

  auto params = model_.parameters();
  double sum_l1 = 0, sum_l2 = 0, sum_total = 0;
  auto batches = make_batches(train.size(), config_.batch_size, config_.seed, static_cast<std::uint64_t>(epoch_));
  // Batch statistics need two samples; fold a lone trailing image into the previous batch.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  for (const auto& idx : batches) {
    std::vector<int> labels(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = train.labels[idx[b]];
    Tensor<float> images = augmented_batch(train, idx, labels);

    zero_grads(params);
    model_.set_mode(Mode::training);
    Graph<float> g;
    LossParts loss = batch_loss(model_, g, g.constant(std::move(images)), labels, config_);
    g.backward(loss.total);
    adam_.step(params);

    const auto w = static_cast<double>(idx.size());
    sum_l1 += w * loss.l1.value()[0];
    if (loss.l2.graph) sum_l2 += w * loss.l2.value()[0];
    sum_total += w * loss.total.value()[0];
  }

  ++epoch_;
  EpochMetrics m;
  m.epoch = epoch_;
  m.learning_rate = lr;
  const double n = static_cast<double>(std::max<std::size_t>(train.size(), 1));
  m.l1 = sum_l1 / n;
  m.l2 = sum_l2 / n;
  m.total = sum_total / n;
  m.test_error = config_.evaluate_each_epoch ? evaluate(model_, test, config_.eval_batch) : 0.0;
  model_.set_mode(Mode::training);
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  history_.push_back(m);
  return m;
}

template <typename Model>
const std::vector<EpochMetrics>& Trainer<Model>::train(const Dataset& train, const Dataset& test, const EpochCallback& on_epoch)
{
  while (epoch_ < config_.epochs) {
    const EpochMetrics m = run_epoch(train, test);
    if (on_epoch) on_epoch(m);
  }
  return history_;
}

template <typename Model>
Checkpoint Trainer<Model>::checkpoint()
{
  return make_checkpoint(model_, config_, adam_, epoch_, history_);
}

template <typename Model>
void Trainer<Model>::restore(const Checkpoint& ckpt)
{
  load_model_state(ckpt, model_);
  const int epochs = config_.epochs;
  config_ = checkpoint_train_config(ckpt);
  config_.epochs = epochs;
  config_.loss.capsule_size = model_.config().capsule_size;
  epoch_ = static_cast<int>(ckpt.integer("train.epoch"));
  history_ = checkpoint_history(ckpt);

  adam_ = Adam<float>(ckpt.real("adam.learning_rate"),
                      AdamConfig{ckpt.real("adam.beta1"), ckpt.real("adam.beta2"), ckpt.real("adam.epsilon")});
  adam_.set_step_count(ckpt.integer("adam.step"));
  for (const auto& p : model_.parameters()) {
    const std::string m_name = "adam.m." + p.name;
    if (!ckpt.contains(m_name)) continue;
    auto& slot = adam_.slot(p.name, p.tensor->size());
    slot.m = ckpt.tensor(m_name).data();
    slot.v = ckpt.tensor("adam.v." + p.name).data();
  }
}

template class Trainer<HitNet<float>>;
template class Trainer<Baseline<float>>;

// ---- checkpoint mapping ---------------------------------------------------

template <typename Model>
Checkpoint make_checkpoint(Model& model, const TrainConfig& config, const Adam<float>& adam, int epoch,
                           std::span<const EpochMetrics> history)
{
  Checkpoint ckpt;
  ckpt.put_string("model.kind", to_string(kind_of<Model>()));
  const ModelConfig& mc = model.config();
  ckpt.put_int("model.channels", mc.channels);
  ckpt.put_int("model.classes", mc.classes);
  ckpt.put_int("model.capsule_size", mc.capsule_size);
  ckpt.put_int("model.height", mc.height);
  ckpt.put_int("model.width", mc.width);
  ckpt.put_int("model.kernel", mc.kernel);
  ckpt.put_int("model.decoder_hidden1", mc.decoder_hidden1);
  ckpt.put_int("model.decoder_hidden2", mc.decoder_hidden2);

  ckpt.put_int("train.epochs", config.epochs);
  ckpt.put_int("train.batch_size", static_cast<std::int64_t>(config.batch_size));
  ckpt.put_real("train.learning_rate", config.learning_rate);
  ckpt.put_string("train.schedule", config.schedule.kind == Schedule::Kind::constant ? "const" : "decay");
  ckpt.put_real("train.decay_factor", config.schedule.decay_factor);
  ckpt.put_int("train.seed", static_cast<std::int64_t>(config.seed));
  ckpt.put_int("train.max_shift", config.max_shift);
  ckpt.put_real("loss.l", config.loss.l);
  ckpt.put_real("loss.h", config.loss.h);
  ckpt.put_real("loss.m", config.loss.m);
  ckpt.put_real("loss.l_miss", config.loss.l_miss);
  ckpt.put_real("loss.h_miss", config.loss.h_miss);
  ckpt.put_real("loss.m_miss", config.loss.m_miss);
  ckpt.put_real("loss.lambda", config.loss.lambda);
  ckpt.put_real("loss.alpha", config.composite.alpha);
  ckpt.put_real("train.hybrid_prob", config.hybrid_prob);
  ckpt.put_int("train.hybrid_from_shifted", config.hybrid_from_shifted ? 1 : 0);
  ckpt.put_real("train.tweak_bound", config.tweak_bound);
  ckpt.put_int("train.eval_batch", static_cast<std::int64_t>(config.eval_batch));
  ckpt.put_int("train.epoch", epoch);
  // Every random draw is keyed by (seed, epoch, index); this is the full RNG state.
  ckpt.put_int("rng.seed", static_cast<std::int64_t>(config.seed));
  ckpt.put_int("rng.epoch", epoch);

  for (const auto& p : model.parameters()) ckpt.put("param." + p.name, *p.tensor);
  for (const auto& b : model.buffers()) ckpt.put("buffer." + b.name, *b.tensor);

  ckpt.put_int("adam.step", adam.step_count());
  ckpt.put_real("adam.learning_rate", adam.learning_rate());
  ckpt.put_real("adam.beta1", adam.config().beta1);
  ckpt.put_real("adam.beta2", adam.config().beta2);
  ckpt.put_real("adam.epsilon", adam.config().epsilon);
  for (const auto& s : adam.slots()) {
    ckpt.put("adam.m." + s.name, {s.m.size()}, std::vector<float>(s.m.data(), s.m.data() + s.m.size()));
    ckpt.put("adam.v." + s.name, {s.v.size()}, std::vector<float>(s.v.data(), s.v.data() + s.v.size()));
  }

  std::vector<double> rows;
  for (const auto& m : history)
    rows.insert(rows.end(), {static_cast<double>(m.epoch), m.learning_rate, m.l1, m.l2, m.total, m.test_error, m.seconds});
  if (history.empty())
    ckpt.put_int("metrics.count", 0);
  else {
    ckpt.put_int("metrics.count", static_cast<std::int64_t>(history.size()));
    ckpt.put("metrics", {static_cast<Index>(history.size()), 7}, std::move(rows));
  }
  return ckpt;
}

template Checkpoint make_checkpoint<HitNet<float>>(HitNet<float>&, const TrainConfig&, const Adam<float>&, int,
                                                    std::span<const EpochMetrics>);
template Checkpoint make_checkpoint<Baseline<float>>(Baseline<float>&, const TrainConfig&, const Adam<float>&, int,
                                                      std::span<const EpochMetrics>);

ModelKind checkpoint_model_kind(const Checkpoint& ckpt) { return model_kind_from_string(ckpt.string("model.kind")); }

ModelConfig checkpoint_model_config(const Checkpoint& ckpt)
{
  ModelConfig c;
  c.channels = static_cast<int>(ckpt.integer("model.channels"));
  c.classes = static_cast<int>(ckpt.integer("model.classes"));
  c.capsule_size = static_cast<int>(ckpt.integer("model.capsule_size"));
  c.height = static_cast<int>(ckpt.integer("model.height"));
  c.width = static_cast<int>(ckpt.integer("model.width"));
  c.kernel = static_cast<int>(ckpt.integer("model.kernel"));
  c.decoder_hidden1 = static_cast<int>(ckpt.integer("model.decoder_hidden1"));
  c.decoder_hidden2 = static_cast<int>(ckpt.integer("model.decoder_hidden2"));
  return c;
}

TrainConfig checkpoint_train_config(const Checkpoint& ckpt)
{
  TrainConfig t;
  t.epochs = static_cast<int>(ckpt.integer("train.epochs"));
  t.batch_size = static_cast<std::size_t>(ckpt.integer("train.batch_size"));
  t.learning_rate = ckpt.real("train.learning_rate");
  t.schedule.kind = ckpt.string("train.schedule") == "decay" ? Schedule::Kind::exponential_decay : Schedule::Kind::constant;
  t.schedule.decay_factor = ckpt.real("train.decay_factor");
  t.seed = static_cast<std::uint64_t>(ckpt.integer("train.seed"));
  t.max_shift = static_cast<int>(ckpt.integer("train.max_shift"));
  t.loss.l = ckpt.real("loss.l");
  t.loss.h = ckpt.real("loss.h");
  t.loss.m = ckpt.real("loss.m");
  t.loss.l_miss = ckpt.real("loss.l_miss");
  t.loss.h_miss = ckpt.real("loss.h_miss");
  t.loss.m_miss = ckpt.real("loss.m_miss");
  t.loss.lambda = ckpt.real("loss.lambda");
  t.loss.capsule_size = static_cast<int>(ckpt.integer("model.capsule_size"));
  t.composite.alpha = ckpt.real("loss.alpha");
  t.hybrid_prob = ckpt.real("train.hybrid_prob");
  t.hybrid_from_shifted = ckpt.integer("train.hybrid_from_shifted") != 0;
  t.tweak_bound = ckpt.real("train.tweak_bound");
  t.eval_batch = static_cast<std::size_t>(ckpt.integer("train.eval_batch"));
  return t;
}

std::vector<EpochMetrics> checkpoint_history(const Checkpoint& ckpt)
{
  std::vector<EpochMetrics> out;
  if (ckpt.integer("metrics.count") == 0) return out;
  const auto rows = ckpt.reals("metrics");
  for (std::size_t r = 0; r + 7 <= rows.size(); r += 7) {
    EpochMetrics m;
    m.epoch = static_cast<int>(rows[r]);
    m.learning_rate = rows[r + 1];
    m.l1 = rows[r + 2];
    m.l2 = rows[r + 3];
    m.total = rows[r + 4];
    m.test_error = rows[r + 5];
    m.seconds = rows[r + 6];
    out.push_back(m);
  }
  return out;
}

template <typename Model>
void load_model_state(const Checkpoint& ckpt, Model& model)
{
  if (checkpoint_model_kind(ckpt) != kind_of<Model>())
    throw CheckpointError(CheckpointError::Kind::type, "checkpoint holds a " + ckpt.string("model.kind") + " model, expected " +
                                                           to_string(kind_of<Model>()));
  if (!(checkpoint_model_config(ckpt) == model.config()))
    throw CheckpointError(CheckpointError::Kind::type, "checkpoint architecture does not match the model");
  auto copy_into = [&](const std::string& name, Tensor<float>& dst) {
    Tensor<float> src = ckpt.tensor(name);
    if (src.shape() != dst.shape()) throw ShapeError("checkpoint '" + name + "'", src.shape(), dst.shape());
    dst.data() = src.data();
  };
  for (const auto& p : model.parameters()) copy_into("param." + p.name, *p.tensor);
  for (const auto& b : model.buffers()) copy_into("buffer." + b.name, *b.tensor);
}

template void load_model_state<HitNet<float>>(const Checkpoint&, HitNet<float>&);
template void load_model_state<Baseline<float>>(const Checkpoint&, Baseline<float>&);

}  // namespace homnet
