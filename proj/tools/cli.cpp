// SPDX-License-Identifier: Apache-2.0
#include "homnet/cli.hpp"

#include "homnet/checkpoint.hpp"
#include "homnet/config.hpp"
#include "homnet/data.hpp"
#include "homnet/prototype.hpp"
#include "homnet/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace fs = std::filesystem;

namespace homnet::cli {

namespace {

// Input that does not exist; reported with exit code 2.
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Command {
  std::string name;
  unsigned scope = 0;
  CLI::App* app = nullptr;
  std::string config_path;
  std::vector<std::string> values;
  std::vector<std::pair<const FieldSpec*, CLI::Option*>> options;
};

void add_fields(Command& cmd, const RunConfig& defaults)
{
  cmd.app->add_option("--config", cmd.config_path, "key=value file applied on top of the defaults (flags override it)")->type_name("PATH");
  const auto fields = run_config_fields();
  cmd.values.resize(fields.size());
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const FieldSpec& f = fields[i];
    if (!(f.scopes & cmd.scope)) continue;
    CLI::Option* opt = cmd.app->add_option(f.flag, cmd.values[i], f.help)->default_str(field_to_string(defaults, f));
    const std::string key = f.key;
    opt->type_name(std::visit(
        [&](auto m) -> std::string {
          using T = std::remove_reference_t<decltype(RunConfig{}.*m)>;
          if constexpr (std::is_same_v<T, std::string>) return key == "schedule" || key == "model" || key == "hybrid_source" ? "TEXT" : "PATH";
          else if constexpr (std::is_same_v<T, double>) return "FLOAT";
          else if constexpr (std::is_same_v<T, std::uint64_t>) return "UINT";
          else return "INT";
        },
        f.member));
    if (key == "schedule") opt->check(CLI::IsMember({"const", "decay"}));
    if (key == "model") opt->check(CLI::IsMember({"hitnet", "baseline"}));
    if (key == "hybrid_source") opt->check(CLI::IsMember({"shifted", "unshifted"}));
    cmd.options.emplace_back(&f, opt);
  }
}

RunConfig resolve(const Command& cmd)
{
  RunConfig r;
  if (!cmd.config_path.empty()) {
    if (!fs::exists(cmd.config_path)) throw MissingInput("config file not found: " + cmd.config_path);
    r = RunConfig::load(cmd.config_path, r);
  }
  for (const auto& [f, opt] : cmd.options)
    if (opt->count() > 0) field_from_string(r, *f, opt->as<std::string>());
  return r;
}

fs::path data_dir(const RunConfig& r)
{
  std::string dir = r.data_dir;
  if (dir.empty())
    if (const char* env = std::getenv("HOMNET_DATA_DIR")) dir = env;
  if (dir.empty()) throw MissingInput("no dataset directory: pass --data-dir or set HOMNET_DATA_DIR");
  if (!fs::is_directory(dir)) throw MissingInput("dataset directory not found: " + dir);
  return dir;
}

fs::path data_file(const fs::path& dir, const std::string& name)
{
  const fs::path plain = dir / name;
  if (fs::exists(plain)) return plain;
  const fs::path gz = dir / (name + ".gz");
  if (fs::exists(gz)) return gz;
  throw MissingInput("dataset file not found: " + plain.string() + " (or .gz)");
}

Dataset load_split(const RunConfig& r, bool train, int limit)
{
  const fs::path dir = data_dir(r);
  const std::string prefix = train ? "train" : "t10k";
  Dataset d = load_idx(data_file(dir, prefix + "-images-idx3-ubyte"), data_file(dir, prefix + "-labels-idx1-ubyte"), r.classes);
  if (limit > 0) d = d.head(static_cast<std::size_t>(limit));
  return d;
}

Checkpoint open_checkpoint(const std::string& path)
{
  if (path.empty()) throw MissingInput("no checkpoint given: pass --checkpoint");
  if (!fs::exists(path)) throw MissingInput("checkpoint not found: " + path);
  return load_checkpoint(path);
}

fs::path prepare_out(const RunConfig& r)
{
  const fs::path out = r.out;
  fs::create_directories(out);
  r.save(out / "config.txt");
  return out;
}

// Reflects what a resumed run actually uses.
void adopt_checkpoint(RunConfig& r, const Checkpoint& ckpt)
{
  const ModelConfig mc = checkpoint_model_config(ckpt);
  const TrainConfig tc = checkpoint_train_config(ckpt);
  r.model = to_string(checkpoint_model_kind(ckpt));
  r.channels = mc.channels;
  r.classes = mc.classes;
  r.capsule_size = mc.capsule_size;
  r.l = tc.loss.l;
  r.h = tc.loss.h;
  r.m = tc.loss.m;
  r.l_miss = tc.loss.l_miss;
  r.h_miss = tc.loss.h_miss;
  r.m_miss = tc.loss.m_miss;
  r.lambda = tc.loss.lambda;
  r.alpha = tc.composite.alpha;
  r.batch = static_cast<int>(tc.batch_size);
  r.lr = tc.learning_rate;
  r.schedule = tc.schedule.kind == Schedule::Kind::exponential_decay ? "decay" : "const";
  r.decay = tc.schedule.decay_factor;
  r.seed = tc.seed;
  r.eval_batch = static_cast<int>(tc.eval_batch);
  r.max_shift = tc.max_shift;
  r.tweak_bound = tc.tweak_bound;
  r.hybrid_prob = tc.hybrid_prob;
  r.hybrid_source = tc.hybrid_from_shifted ? "shifted" : "unshifted";
}

HitNet<float> load_hitnet(const Checkpoint& ckpt)
{
  if (checkpoint_model_kind(ckpt) != ModelKind::hitnet) throw std::runtime_error("checkpoint holds a baseline model, which has no capsules or decoder");
  HitNet<float> model(checkpoint_model_config(ckpt));
  load_model_state(ckpt, model);
  model.set_mode(Mode::inference);
  return model;
}

void print_epoch(const EpochMetrics& m)
{
  std::printf("epoch %d  lr %.6g  L1 %.5f  L2 %.5f  L %.5f  test_error %.4f  (%.1fs)\n", m.epoch, m.learning_rate, m.l1, m.l2,
              m.total, m.test_error, m.seconds);
  std::fflush(stdout);
}

template <typename Model>
int train_model(Model& model, RunConfig r, const Checkpoint* resume)
{
  TrainConfig tc = r.train_config();
  Trainer<Model> trainer(model, tc);
  if (resume) {
    trainer.restore(*resume);
    std::printf("resuming from epoch %d\n", trainer.epoch());
  }
  const fs::path out = prepare_out(r);
  const Dataset train = load_split(r, true, r.train_limit);
  const Dataset test = load_split(r, false, r.test_limit);
  std::printf("%s: %zu training / %zu test images, %d params tensors, target %d epochs\n", r.model.c_str(), train.size(),
              test.size(), static_cast<int>(model.parameters().size()), tc.epochs);

  const fs::path csv = out / "metrics.csv";
  const fs::path ckpt_path = out / "checkpoint.bin";
  write_metrics_csv(csv, trainer.history());
  trainer.train(train, test, [&](const EpochMetrics& m) {
    print_epoch(m);
    std::ofstream(csv, std::ios::app) << metrics_csv_row(m) << '\n';
    save_checkpoint(ckpt_path, trainer.checkpoint());
  });
  if (trainer.history().empty()) save_checkpoint(ckpt_path, trainer.checkpoint());
  if (!trainer.history().empty()) std::printf("test_error=%s\n", format_error_rate(trainer.history().back().test_error).c_str());
  std::printf("wrote %s and %s\n", csv.string().c_str(), ckpt_path.string().c_str());
  return 0;
}

int cmd_train(RunConfig r)
{
  std::optional<Checkpoint> resume;
  if (!r.resume.empty()) {
    resume = open_checkpoint(r.resume);
    adopt_checkpoint(r, *resume);
  }
  if (model_kind_from_string(r.model) == ModelKind::hitnet) {
    HitNet<float> model(r.model_config());
    model.init(r.seed);
    return train_model(model, r, resume ? &*resume : nullptr);
  }
  Baseline<float> model(r.model_config());
  model.init(r.seed);
  return train_model(model, r, resume ? &*resume : nullptr);
}

int cmd_eval(RunConfig r)
{
  const Checkpoint ckpt = open_checkpoint(r.checkpoint);
  r.classes = checkpoint_model_config(ckpt).classes;
  const Dataset test = load_split(r, false, r.test_limit);
  const std::size_t batch = checkpoint_train_config(ckpt).eval_batch;
  double err = 0;
  if (checkpoint_model_kind(ckpt) == ModelKind::hitnet) {
    HitNet<float> model(checkpoint_model_config(ckpt));
    load_model_state(ckpt, model);
    err = evaluate(model, test, batch);
  } else {
    Baseline<float> model(checkpoint_model_config(ckpt));
    load_model_state(ckpt, model);
    err = evaluate(model, test, batch);
  }
  std::printf("test error rate over %zu images: %.4f\n", test.size(), err);
  std::printf("test_error=%s\n", format_error_rate(err).c_str());
  return 0;
}

int cmd_proto(RunConfig r)
{
  const Checkpoint ckpt = open_checkpoint(r.checkpoint);
  HitNet<float> model = load_hitnet(ckpt);
  const fs::path out = prepare_out(r);
  const ModelConfig& mc = model.config();
  const auto protos = generate_prototypes(model);
  for (int k = 0; k < mc.classes; ++k)
    write_pgm(protos[static_cast<std::size_t>(k)], mc.height, mc.width, out / ("prototype_" + std::to_string(k) + ".pgm"));
  const int rows = mc.classes > 1 ? 2 : 1;
  const int cols = (mc.classes + rows - 1) / rows;
  export_grid(protos, mc.height, mc.width, GridLayout{rows, cols}, out / "prototypes.pgm");
  std::printf("wrote %d prototypes and %s\n", mc.classes, (out / "prototypes.pgm").string().c_str());
  return 0;
}

int cmd_sweep(RunConfig r)
{
  const Checkpoint ckpt = open_checkpoint(r.checkpoint);
  HitNet<float> model = load_hitnet(ckpt);
  const fs::path out = prepare_out(r);
  const ModelConfig& mc = model.config();
  std::vector<int> features;
  if (r.feature == -1)
    for (int j = 0; j < mc.capsule_size; ++j) features.push_back(j);
  else
    features.push_back(r.feature);

  std::vector<Image> tiles;
  for (int j : features) {
    SweepGrid grid = feature_sweep(model, r.class_index, j, r.sweep_lo, r.sweep_hi, r.sweep_steps);
    for (auto& img : grid.images) tiles.push_back(std::move(img));
  }
  const std::string name = r.feature == -1 ? "sweep_class" + std::to_string(r.class_index) + ".pgm"
                                           : "sweep_class" + std::to_string(r.class_index) + "_feature" + std::to_string(r.feature) + ".pgm";
  export_grid(tiles, mc.height, mc.width, GridLayout{static_cast<int>(features.size()), r.sweep_steps}, out / name);
  std::printf("wrote %zu tiles to %s\n", tiles.size(), (out / name).string().c_str());
  return 0;
}

int cmd_augment(RunConfig r)
{
  const Checkpoint ckpt = open_checkpoint(r.checkpoint);
  HitNet<float> model = load_hitnet(ckpt);
  const ModelConfig& mc = model.config();
  r.classes = mc.classes;
  if (r.count < 1) throw std::invalid_argument("--count must be at least 1");
  const Dataset source = load_split(r, true, r.train_limit);
  const fs::path out = prepare_out(r);

  Dataset result;
  result.rows = source.rows;
  result.cols = source.cols;
  result.class_count = source.class_count;
  std::vector<Image> panel_top, panel_bottom;
  const std::size_t count = static_cast<std::size_t>(r.count);
  const std::size_t chunk = 100;
  for (std::size_t start = 0; start < count; start += chunk) {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::vector<float>> tweaks;
    for (std::size_t i = start; i < std::min(count, start + chunk); ++i) {
      const std::size_t src = i % source.size();
      images.emplace_back(source.image(src).begin(), source.image(src).end());
      labels.push_back(source.labels[src]);
      std::mt19937_64 rng(stream_seed(r.seed, 0, i));
      tweaks.push_back(random_tweak(mc.capsule_size, r.tweak_bound, rng));
    }
    const auto samples = hybrid_augment_batch(model, images, labels, tweaks);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      result.images.insert(result.images.end(), samples[i].image.begin(), samples[i].image.end());
      result.labels.push_back(labels[i]);
      if (panel_top.size() < 10) {
        panel_top.push_back(images[i]);
        panel_bottom.push_back(samples[i].image);
      }
    }
  }
  save_idx(result, out / "augmented-images-idx3-ubyte", out / "augmented-labels-idx1-ubyte");
  std::vector<Image> panel = panel_top;
  panel.insert(panel.end(), panel_bottom.begin(), panel_bottom.end());
  export_grid(panel, result.rows, result.cols, GridLayout{2, static_cast<int>(panel_top.size())}, out / "augment_panel.pgm");
  std::printf("wrote %zu augmented images to %s\n", result.size(), (out / "augmented-images-idx3-ubyte").string().c_str());
  return 0;
}

int cmd_stats(RunConfig r)
{
  const Checkpoint ckpt = open_checkpoint(r.checkpoint);
  HitNet<float> model = load_hitnet(ckpt);
  r.classes = model.config().classes;
  const Dataset data = load_split(r, true, r.train_limit);
  const fs::path out = prepare_out(r);
  const FeatureStats s = feature_histogram(model, data);
  std::ofstream csv(out / "feature_stats.csv");
  csv << "class,feature,count,mean,std\n";
  int in_band = 0;
  for (int k = 0; k < s.classes; ++k)
    for (int j = 0; j < s.capsule_size; ++j) {
      char line[128];
      std::snprintf(line, sizeof line, "%d,%d,%zu,%.6f,%.6f\n", k, j, s.counts[static_cast<std::size_t>(k)], s.mean_at(k, j),
                    s.std_at(k, j));
      csv << line;
      if (s.std_at(k, j) >= 0.01 && s.std_at(k, j) <= 0.05) ++in_band;
    }
  const int pairs = s.classes * s.capsule_size;
  std::printf("%d of %d (class, feature) pairs have std in [0.01, 0.05]\n", in_band, pairs);
  std::printf("wrote %s\n", (out / "feature_stats.csv").string().c_str());
  return 0;
}

std::string shape_text(const Shape& s) { return shape_to_string(s); }

int cmd_inspect(const RunConfig& r)
{
  const Checkpoint ckpt = open_checkpoint(r.checkpoint);
  const ModelConfig mc = checkpoint_model_config(ckpt);
  std::printf("checkpoint %s (format version %u)\n", r.checkpoint.c_str(), checkpoint_version);
  std::printf("model: %s  channels=%d classes=%d capsule_size=%d image=%dx%d\n", to_string(checkpoint_model_kind(ckpt)).c_str(),
              mc.channels, mc.classes, mc.capsule_size, mc.height, mc.width);
  std::printf("epoch: %lld  adam steps: %lld  lr: %.6g\n", static_cast<long long>(ckpt.integer("train.epoch")),
              static_cast<long long>(ckpt.integer("adam.step")), ckpt.real("adam.learning_rate"));
  std::size_t params = 0;
  for (const auto& e : ckpt.entries())
    if (e.name.rfind("param.", 0) == 0) {
      params += static_cast<std::size_t>(shape_size(e.shape));
      std::printf("  %-24s %s\n", e.name.c_str() + 6, shape_text(e.shape).c_str());
    }
  std::printf("parameters: %zu\n", params);
  const auto history = checkpoint_history(ckpt);
  if (!history.empty()) {
    const EpochMetrics& last = history.back();
    std::printf("last epoch %d: L=%.5f test_error=%s\n", last.epoch, last.total, format_error_rate(last.test_error).c_str());
  }
  return 0;
}

}  // namespace

int run(int argc, char** argv)
{
  CLI::App app{"Hit-or-Miss capsule network: training, evaluation, prototypes and hybrid augmentation"};
  app.require_subcommand(1);
  const RunConfig defaults;

  std::vector<Command> cmds = {
      {"train", scope_train, nullptr, {}, {}, {}},  {"eval", scope_eval, nullptr, {}, {}, {}},
      {"proto", scope_proto, nullptr, {}, {}, {}},  {"sweep", scope_sweep, nullptr, {}, {}, {}},
      {"augment", scope_augment, nullptr, {}, {}, {}}, {"inspect", scope_inspect, nullptr, {}, {}, {}},
      {"stats", scope_stats, nullptr, {}, {}, {}},
  };
  const std::map<std::string, std::string> about = {
      {"train", "train a model; writes config.txt, metrics.csv and checkpoint.bin under --out"},
      {"eval", "print the test error rate of a checkpoint"},
      {"proto", "decode the central capsule of every class"},
      {"sweep", "decode the central capsule with one feature swept over a range"},
      {"augment", "write hybrid-augmented training images as an IDX pair"},
      {"inspect", "print checkpoint metadata"},
      {"stats", "per-class, per-feature statistics of the true-class capsules"},
  };
  for (auto& c : cmds) {
    c.app = app.add_subcommand(c.name, about.at(c.name));
    add_fields(c, defaults);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (auto& c : cmds) {
      if (!c.app->parsed()) continue;
      const RunConfig r = resolve(c);
      if (c.name == "train") return cmd_train(r);
      if (c.name == "eval") return cmd_eval(r);
      if (c.name == "proto") return cmd_proto(r);
      if (c.name == "sweep") return cmd_sweep(r);
      if (c.name == "augment") return cmd_augment(r);
      if (c.name == "inspect") return cmd_inspect(r);
      if (c.name == "stats") return cmd_stats(r);
    }
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace homnet::cli
