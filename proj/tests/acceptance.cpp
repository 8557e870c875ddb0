// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Needs MNIST: argv[1], $HOMNET_DATA_DIR, or
// the directory configured at build time.
#include "homnet/checkpoint.hpp"
#include "homnet/cli.hpp"
#include "homnet/config.hpp"
#include "homnet/prototype.hpp"
#include "homnet/trainer.hpp"

#include "oracles.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

using namespace homnet;
using namespace homnet::test;

namespace fs = std::filesystem;

namespace {

#ifndef HOMNET_DEFAULT_DATA_DIR
#define HOMNET_DEFAULT_DATA_DIR ""
#endif

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o)
{
  std::printf("criterion %d %s: %s (%s)\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void run(int id, const char* name, const std::function<Outcome()>& fn)
{
  try {
    report(id, name, fn());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("error: ") + e.what()});
  }
}

std::string fmt(const char* f, double a)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void progress(const std::string& what) { std::fprintf(stderr, "  %s\n", what.c_str()); }

// -- data -------------------------------------------------------------------

fs::path data_root(int argc, char** argv)
{
  if (argc > 1) return argv[1];
  if (const char* env = std::getenv("HOMNET_DATA_DIR"); env && *env) return env;
  return HOMNET_DEFAULT_DATA_DIR;
}

Dataset load_split(const fs::path& dir, const std::string& prefix)
{
  auto pick = [&](const std::string& stem) {
    const fs::path plain = dir / stem;
    if (fs::exists(plain)) return plain;
    const fs::path gz = dir / (stem + ".gz");
    if (fs::exists(gz)) return gz;
    throw std::runtime_error("MNIST file not found: " + plain.string());
  };
  return load_idx(pick(prefix + "-images-idx3-ubyte"), pick(prefix + "-labels-idx1-ubyte"));
}

struct Mnist {
  Dataset train;  // 10,000-image subset
  Dataset test;   // full test set
};

std::optional<Mnist> mnist;
std::string mnist_error;

const Mnist& data()
{
  if (!mnist) throw std::runtime_error(mnist_error);
  return *mnist;
}

// -- shared desk-scale setup --------------------------------------------------

RunConfig desk_config(const std::string& model)
{
  RunConfig c;
  c.model = model;
  c.channels = 32;
  c.epochs = 10;
  c.batch = 128;
  c.lr = 0.001;
  c.schedule = "const";
  c.seed = 1;
  return c;
}

struct DeskRun {
  std::vector<EpochMetrics> history;
  double seconds = 0;
  fs::path checkpoint;
};

template <typename Model>
DeskRun train_desk(Model& model, const RunConfig& rc, const fs::path& out)
{
  model.init(rc.seed);
  Trainer<Model> trainer(model, rc.train_config());
  const auto t0 = Clock::now();
  trainer.train(data().train, data().test, [&](const EpochMetrics& m) {
    progress(rc.model + " epoch " + std::to_string(m.epoch) + ": L=" + fmt("%.5f", m.total) + " test_error=" + format_error_rate(m.test_error) +
             " (" + fmt("%.1f", m.seconds) + " s)");
  });
  DeskRun r;
  r.seconds = seconds_since(t0);
  r.history = trainer.history();
  r.checkpoint = out / "checkpoint.bin";
  save_checkpoint(r.checkpoint, trainer.checkpoint());
  return r;
}

std::optional<HitNet<float>> hitnet;
std::optional<DeskRun> hitnet_run;

HitNet<float>& trained_hitnet()
{
  if (!hitnet_run) throw std::runtime_error("criterion 4 model unavailable");
  return *hitnet;
}

std::vector<float> parameter_snapshot(HitNet<float>& model)
{
  std::vector<float> out;
  for (auto& p : model.parameters()) out.insert(out.end(), p.tensor->data().begin(), p.tensor->data().end());
  return out;
}

bool same_histories(const std::vector<EpochMetrics>& a, const std::vector<EpochMetrics>& b)
{
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_metrics(a[i], b[i])) return false;
  return true;
}

// -- criteria -----------------------------------------------------------------

Outcome loss_oracle()
{
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = random_staircase(rng);
    const double closed = staircase_loss(s.x, s.l, s.h, s.m);
    worst = std::max(worst, std::abs(closed - integrate_staircase_grad(s.x, s.l, s.h, s.m)));
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && t < 1.0, "max abs error " + fmt("%.2e", worst) + ", " + fmt("%.3f", t) + " s"};
}

Outcome gradient_suite()
{
  const auto t0 = Clock::now();
  const CentripetalParams p;
  std::mt19937_64 rng(2002);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    CapsuleConfig c = random_capsules(rng, p, 1, 10);
    const auto r = check_gradients({&c.logits}, [&](auto& g, auto& v) { return centripetal_through_sigmoid(g, v[0], c.labels, p); }, 1e-6);
    worst = std::max(worst, r.worst);
  }
  const double t = seconds_since(t0);
  return {worst < 1e-3 && t < 10.0, "max relative error " + fmt("%.2e", worst) + ", " + fmt("%.2f", t) + " s"};
}

Outcome zone_properties()
{
  const CentripetalParams p;
  const double r = p.half_diagonal();
  const std::vector<int> label = {0};
  int in_hit = 0, in_miss = 0, violations = 0, active_outside = 0;
  const int points = 10000;
  for (int i = 0; i < points; ++i) {
    const double d = r * i / (points - 1);
    // slot 0 is the true class; the other slot is parked inside its own zone
    for (int which = 0; which < 2; ++which) {
      Graph<double> g;
      TensorD dist = which == 0 ? TensorD({1, 2}, {d, r}) : TensorD({1, 2}, {0.0, d});
      dist.set_requires_grad();
      auto v = g.leaf(dist);
      auto loss = centripetal_loss(v, std::span<const int>(label), p);
      g.backward(loss);
      const double value = loss.value()[0], grad = dist.grad()[which];
      const double scalar = which == 0 ? hit_loss(d, p) : miss_loss(d, p);
      const double scalar_grad = which == 0 ? hit_grad(d, p) : miss_grad(d, p);
      const bool zone = which == 0 ? d <= p.m : d >= p.m_miss;
      if (zone) {
        (which == 0 ? in_hit : in_miss) += 1;
        if (value != 0.0 || grad != 0.0 || scalar != 0.0 || scalar_grad != 0.0) ++violations;
      } else if (value > 0.0 && grad != 0.0) {
        ++active_outside;
      }
    }
  }
  const int outside = 2 * points - in_hit - in_miss;
  return {violations == 0 && in_hit > 0 && in_miss > 0 && active_outside == outside,
          std::to_string(points) + " points, " + std::to_string(in_hit) + " hit-zone and " + std::to_string(in_miss) + " miss-zone samples, " +
              std::to_string(violations) + " nonzero inside zones, " + std::to_string(active_outside) + "/" + std::to_string(outside) +
              " active outside"};
}

Outcome desk_training(const fs::path& work)
{
  const RunConfig rc = desk_config("hitnet");
  hitnet.emplace(rc.model_config());
  DeskRun r = train_desk(*hitnet, rc, work / "hitnet");
  const double err = r.history.back().test_error;
  // independent re-evaluation of the final model
  const double again = evaluate(*hitnet, data().test, 500);
  hitnet_run = std::move(r);
  const double t = hitnet_run->seconds;
  return {err < 0.05 && again == err && t < 1800.0,
          "test error " + format_error_rate(err) + " on " + std::to_string(data().test.size()) + " images after " +
              std::to_string(hitnet_run->history.size()) + " epochs, " + fmt("%.0f", t) + " s"};
}

Outcome feature_statistics()
{
  HitNet<float>& model = trained_hitnet();
  const FeatureStats s = feature_histogram(model, data().train);
  int inside = 0;
  std::vector<double> all = s.stddev;
  for (double v : all)
    if (v >= 0.01 && v <= 0.05) ++inside;
  std::sort(all.begin(), all.end());
  const FeatureStats t = feature_histogram(model, data().test);
  int inside_test = 0;
  for (double v : t.stddev)
    if (v >= 0.01 && v <= 0.05) ++inside_test;
  const double frac = static_cast<double>(inside) / static_cast<double>(all.size());
  return {frac >= 0.75, std::to_string(inside) + "/" + std::to_string(all.size()) + " pairs in [0.01, 0.05] on the training subset, median std " +
                            fmt("%.4f", all[all.size() / 2]) + ", range [" + fmt("%.4f", all.front()) + ", " + fmt("%.4f", all.back()) + "]; " +
                            std::to_string(inside_test) + "/160 on the test set"};
}

Outcome hybrid_identity()
{
  HitNet<float>& model = trained_hitnet();
  const std::vector<float> zero(16, 0.0f);
  double worst = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto x = data().test.image(i);
    const auto out = hybrid_augment(model, x, data().test.labels[i], zero);
    for (std::size_t p = 0; p < out.size(); ++p) worst = std::max(worst, static_cast<double>(std::abs(out[p] - x[p])));
  }
  return {worst <= 1e-6, "100 test images, max pixel deviation " + fmt("%.2e", worst)};
}

std::vector<std::uint8_t> read_pgm_pixels(const fs::path& path)
{
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if (magic != "P5" || maxval != 255) throw std::runtime_error("not an 8-bit PGM: " + path.string());
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w * h));
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) throw std::runtime_error("truncated PGM: " + path.string());
  return px;
}

Outcome prototype_pipeline(const fs::path& work)
{
  HitNet<float>& model = trained_hitnet();
  const fs::path out = work / "proto";
  std::string ckpt = hitnet_run->checkpoint.string(), dir = out.string();
  std::vector<std::string> args = {"homnet", "proto", "--checkpoint", ckpt, "--out", dir};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  // keep the command's own chatter off the report
  std::fflush(stdout);
  const int saved = dup(1), null = open("/dev/null", O_WRONLY);
  dup2(null, 1);
  const int code = cli::run(static_cast<int>(argv.size()), argv.data());
  std::cout.flush();
  std::fflush(stdout);
  dup2(saved, 1);
  close(saved);
  close(null);
  if (code != 0) return {false, "proto command exited with " + std::to_string(code)};

  std::vector<std::vector<std::uint8_t>> images;
  for (int k = 0; k < 10; ++k) images.push_back(read_pgm_pixels(out / ("prototype_" + std::to_string(k) + ".pgm")));
  double closest = 1e9;
  for (std::size_t a = 0; a < images.size(); ++a)
    for (std::size_t b = a + 1; b < images.size(); ++b) {
      double sum = 0;
      for (std::size_t p = 0; p < images[a].size(); ++p) sum += std::abs(images[a][p] - images[b][p]) / 255.0;
      closest = std::min(closest, sum / static_cast<double>(images[a].size()));
    }

  int identical = 0;
  for (int k = 0; k < 10; ++k) {
    const Image proto = generate_prototype(model, k);
    for (int j = 0; j < 16; ++j) {
      const SweepGrid grid = feature_sweep(model, k, j);
      const std::size_t mid = grid.values.size() / 2;
      if (static_cast<float>(grid.values[mid]) == 0.5f && grid.images[mid] == proto) ++identical;
    }
  }
  return {closest > 0.01 && identical == 160, "smallest pairwise mean abs difference " + fmt("%.4f", closest) + ", " + std::to_string(identical) +
                                                  "/160 sweeps at v=0.5 bit-identical"};
}

Outcome determinism_and_persistence()
{
  RunConfig rc = desk_config("hitnet");
  rc.epochs = 2;
  const Dataset train = data().train.head(1000), test = data().test.head(1000);
  auto fresh_run = [&](HitNet<float>& m) {
    m.init(rc.seed);
    Trainer<HitNet<float>> t(m, rc.train_config());
    t.train(train, test);
    return t.history();
  };
  HitNet<float> a(rc.model_config()), b(rc.model_config());
  const auto ha = fresh_run(a), hb = fresh_run(b);
  std::string la, lb;
  for (const auto& m : ha) la += metrics_csv_row(m);
  for (const auto& m : hb) lb += metrics_csv_row(m);
  const bool deterministic = same_histories(ha, hb) && parameter_snapshot(a) == parameter_snapshot(b);

  // one epoch from a saved checkpoint vs the same epoch trained straight through
  const Dataset small = data().train.head(100), small_test = data().test.head(100);
  const fs::path ckpt = fs::temp_directory_path() / "homnet_acceptance_resume.bin";
  HitNet<float> straight(rc.model_config());
  straight.init(rc.seed);
  Trainer<HitNet<float>> ts(straight, rc.train_config());
  ts.train(small, small_test);

  RunConfig first = rc;
  first.epochs = 1;
  HitNet<float> half(rc.model_config());
  half.init(rc.seed);
  Trainer<HitNet<float>> t1(half, first.train_config());
  t1.train(small, small_test);
  save_checkpoint(ckpt, t1.checkpoint());

  HitNet<float> resumed(rc.model_config());
  Trainer<HitNet<float>> t2(resumed, rc.train_config());
  t2.restore(load_checkpoint(ckpt));
  t2.train(small, small_test);
  fs::remove(ckpt);
  const bool persistent = same_histories(t2.history(), ts.history()) && parameter_snapshot(resumed) == parameter_snapshot(straight);

  return {deterministic && persistent, std::string("repeat run ") + (deterministic ? "identical" : "differs") + " over " +
                                           std::to_string(ha.size()) + " epochs, resumed epoch " + (persistent ? "identical" : "differs")};
}

Outcome baseline_comparison(const fs::path& work)
{
  const RunConfig rc = desk_config("baseline");
  Baseline<float> model(rc.model_config());
  const DeskRun r = train_desk(model, rc, work / "baseline");
  const double err = r.history.back().test_error;
  std::string detail = "test error " + format_error_rate(err) + ", " + fmt("%.0f", r.seconds) + " s";
  if (hitnet_run) detail += "; HitNet " + format_error_rate(hitnet_run->history.back().test_error);
  return {err < 0.05, detail};
}

}  // namespace

int main(int argc, char** argv)
{
  const fs::path dir = data_root(argc, argv);
  try {
    if (dir.empty()) throw std::runtime_error("no MNIST directory: pass it as an argument or set HOMNET_DATA_DIR");
    Mnist m;
    m.train = load_split(dir, "train").head(10000);
    m.test = load_split(dir, "t10k");
    mnist = std::move(m);
  } catch (const std::exception& e) {
    mnist_error = e.what();
    std::fprintf(stderr, "warning: %s\n", e.what());
  }
  const fs::path work = fs::temp_directory_path() / "homnet_acceptance";
  fs::remove_all(work);
  fs::create_directories(work / "hitnet");
  fs::create_directories(work / "baseline");

  run(1, "loss oracle", loss_oracle);
  run(2, "gradient suite", gradient_suite);
  run(3, "zone properties", zone_properties);
  run(4, "desk-scale training", [&] { return desk_training(work); });
  run(5, "feature statistics", feature_statistics);
  run(6, "hybrid identity", hybrid_identity);
  run(7, "prototype pipeline", [&] { return prototype_pipeline(work); });
  run(8, "determinism and persistence", determinism_and_persistence);
  run(9, "baseline comparison", [&] { return baseline_comparison(work); });

  std::printf("%d of 9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
