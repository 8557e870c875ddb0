// SPDX-License-Identifier: Apache-2.0
#include "homnet/config.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace homnet {

namespace {

constexpr unsigned scope_data = scope_train | scope_eval | scope_augment | scope_stats;
constexpr unsigned scope_out = scope_train | scope_proto | scope_sweep | scope_augment | scope_stats;
constexpr unsigned scope_ckpt = scope_eval | scope_proto | scope_sweep | scope_augment | scope_inspect | scope_stats;
constexpr unsigned scope_model = scope_train;

const std::array fields = {
    FieldSpec{"data_dir", "--data-dir", "directory holding the IDX files (falls back to $HOMNET_DATA_DIR)", scope_data, &RunConfig::data_dir},
    FieldSpec{"out", "--out", "output directory", scope_out, &RunConfig::out},
    FieldSpec{"checkpoint", "--checkpoint", "checkpoint file to read", scope_ckpt, &RunConfig::checkpoint},
    FieldSpec{"resume", "--resume", "checkpoint to resume training from", scope_train, &RunConfig::resume},
    FieldSpec{"model", "--model", "network: hitnet or baseline (conv + dense + BN + softmax)", scope_model, &RunConfig::model},
    FieldSpec{"channels", "--channels", "channels of both 9x9 convolutions", scope_model, &RunConfig::channels},
    FieldSpec{"classes", "--classes", "number of classes K", scope_model | scope_data, &RunConfig::classes},
    FieldSpec{"capsule_size", "--capsule-size", "capsule size n", scope_model, &RunConfig::capsule_size},
    FieldSpec{"l", "--hit-length", "hit branch step length l", scope_train, &RunConfig::l},
    FieldSpec{"h", "--hit-height", "hit branch step height h", scope_train, &RunConfig::h},
    FieldSpec{"m", "--hit-margin", "hit zone radius m", scope_train, &RunConfig::m},
    FieldSpec{"l_miss", "--miss-length", "miss branch step length l'", scope_train, &RunConfig::l_miss},
    FieldSpec{"h_miss", "--miss-height", "miss branch step height h'", scope_train, &RunConfig::h_miss},
    FieldSpec{"m_miss", "--miss-margin", "miss zone radius m'", scope_train, &RunConfig::m_miss},
    FieldSpec{"lambda", "--lambda", "down-weighting of the miss terms", scope_train, &RunConfig::lambda},
    FieldSpec{"alpha", "--alpha", "weight of the reconstruction loss", scope_train, &RunConfig::alpha},
    FieldSpec{"epochs", "--epochs", "total number of epochs", scope_train, &RunConfig::epochs},
    FieldSpec{"batch", "--batch", "batch size", scope_train, &RunConfig::batch},
    FieldSpec{"lr", "--lr", "initial Adam learning rate", scope_train, &RunConfig::lr},
    FieldSpec{"schedule", "--schedule", "learning-rate schedule: const or decay", scope_train, &RunConfig::schedule},
    FieldSpec{"decay", "--decay", "per-epoch learning-rate factor for --schedule decay", scope_train, &RunConfig::decay},
    FieldSpec{"seed", "--seed", "random seed (initialisation, shuffling, augmentation)", scope_train | scope_augment, &RunConfig::seed},
    FieldSpec{"eval_batch", "--eval-batch", "batch size used for test evaluation", scope_train, &RunConfig::eval_batch},
    FieldSpec{"max_shift", "--max-shift", "random shift of up to this many pixels per axis", scope_train, &RunConfig::max_shift},
    FieldSpec{"tweak_bound", "--tweak-bound", "largest capsule tweak for hybrid augmentation", scope_train | scope_augment,
              &RunConfig::tweak_bound},
    FieldSpec{"hybrid_prob", "--hybrid-prob", "fraction of training images replaced by hybrid augmentation", scope_train,
              &RunConfig::hybrid_prob},
    FieldSpec{"hybrid_source", "--hybrid-source", "hybrid augmentation input: shifted or unshifted image", scope_train,
              &RunConfig::hybrid_source},
    FieldSpec{"train_limit", "--train-limit", "use only the first N training images (0 = all)", scope_train | scope_augment | scope_stats,
              &RunConfig::train_limit},
    FieldSpec{"test_limit", "--test-limit", "use only the first N test images (0 = all)", scope_train | scope_eval, &RunConfig::test_limit},
    FieldSpec{"class", "--class", "class index", scope_sweep, &RunConfig::class_index},
    FieldSpec{"feature", "--feature", "capsule component to sweep (-1 = all)", scope_sweep, &RunConfig::feature},
    FieldSpec{"sweep_lo", "--sweep-lo", "first sweep value", scope_sweep, &RunConfig::sweep_lo},
    FieldSpec{"sweep_hi", "--sweep-hi", "last sweep value", scope_sweep, &RunConfig::sweep_hi},
    FieldSpec{"sweep_steps", "--sweep-steps", "number of sweep values", scope_sweep, &RunConfig::sweep_steps},
    FieldSpec{"count", "--count", "number of augmented images to write", scope_augment, &RunConfig::count},
};

std::string trim(const std::string& s)
{
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value)
{
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw std::invalid_argument("config: bad value '" + value + "' for " + key);
  return out;
}

}  // namespace

std::span<const FieldSpec> run_config_fields() { return fields; }

std::string field_to_string(const RunConfig& c, const FieldSpec& f)
{
  return std::visit(
      [&](auto member) -> std::string {
        const auto& v = c.*member;
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::string>) {
          return v;
        } else {
          char buf[64];
          const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
          return std::string(buf, ptr);
        }
      },
      f.member);
}

void field_from_string(RunConfig& c, const FieldSpec& f, const std::string& value)
{
  std::visit(
      [&](auto member) {
        auto& v = c.*member;
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::string>)
          v = value;
        else
          v = parse_number<V>(f.key, value);
      },
      f.member);
}

ModelConfig RunConfig::model_config() const
{
  ModelConfig c;
  c.channels = channels;
  c.classes = classes;
  c.capsule_size = capsule_size;
  return c;
}

TrainConfig RunConfig::train_config() const
{
  if (schedule != "const" && schedule != "decay") throw std::invalid_argument("config: schedule must be const or decay, got '" + schedule + "'");
  if (hybrid_source != "shifted" && hybrid_source != "unshifted")
    throw std::invalid_argument("config: hybrid_source must be shifted or unshifted, got '" + hybrid_source + "'");
  if (batch < 1) throw std::invalid_argument("config: batch must be at least 1");
  if (max_shift < 0 || tweak_bound < 0) throw std::invalid_argument("config: max_shift and tweak_bound must be >= 0");
  model_kind_from_string(model);

  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = static_cast<std::size_t>(batch);
  t.learning_rate = lr;
  t.schedule.kind = schedule == "decay" ? Schedule::Kind::exponential_decay : Schedule::Kind::constant;
  t.schedule.decay_factor = decay;
  t.seed = seed;
  t.max_shift = max_shift;
  t.loss = CentripetalParams{l, h, m, l_miss, h_miss, m_miss, lambda, capsule_size};
  t.loss.validate();
  t.composite.alpha = alpha;
  if (alpha < 0) throw std::invalid_argument("config: alpha must be >= 0");
  t.hybrid_prob = hybrid_prob;
  t.hybrid_from_shifted = hybrid_source == "shifted";
  t.tweak_bound = tweak_bound;
  t.eval_batch = static_cast<std::size_t>(std::max(eval_batch, 1));
  return t;
}

std::string RunConfig::to_text() const
{
  std::ostringstream out;
  for (const auto& f : fields) out << f.key << '=' << field_to_string(*this, f) << '\n';
  return out.str();
}

RunConfig RunConfig::from_text(const std::string& text, RunConfig base)
{
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : fields)
      if (key == f.key) {
        field_from_string(base, f, value);
        found = true;
        break;
      }
    if (!found) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return base;
}

RunConfig RunConfig::load(const std::filesystem::path& path, RunConfig base)
{
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return from_text(text.str(), std::move(base));
}

RunConfig RunConfig::from_text(const std::string& text) { return from_text(text, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path) { return load(path, RunConfig{}); }

void RunConfig::save(const std::filesystem::path& path) const
{
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_text();
}

}  // namespace homnet
