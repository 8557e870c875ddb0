// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/model.hpp"
#include "homnet/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>

namespace homnet {

// Everything a command needs, with the full-size network's defaults.
// Serialised as flat `key=value` lines.
struct RunConfig {
  std::string data_dir;
  std::string out = "run";
  std::string checkpoint;
  std::string resume;
  std::string model = "hitnet";

  int channels = 256;
  int classes = 10;
  int capsule_size = 16;

  double l = 0.1;
  double h = 0.2;
  double m = 0.1;
  double l_miss = 0.1;
  double h_miss = 0.2;
  double m_miss = 0.9;
  double lambda = 0.5;
  double alpha = 0.392;

  int epochs = 250;
  int batch = 128;
  double lr = 0.001;
  std::string schedule = "const";
  double decay = 0.95;
  std::uint64_t seed = 1;
  int eval_batch = 500;

  int max_shift = 2;
  double tweak_bound = 0.025;
  double hybrid_prob = 0.0;
  std::string hybrid_source = "shifted";

  int train_limit = 0;  // 0 = all images
  int test_limit = 0;

  int class_index = 0;
  int feature = 0;  // -1 in sweep = every feature
  double sweep_lo = 0.45;
  double sweep_hi = 0.55;
  int sweep_steps = 11;
  int count = 100;

  ModelConfig model_config() const;
  // Validates enumerations and loss geometry.
  TrainConfig train_config() const;

  std::string to_text() const;
  // Applies `key=value` lines on top of `base`. Unknown keys are errors.
  static RunConfig from_text(const std::string& text, RunConfig base);
  static RunConfig from_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path, RunConfig base);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

enum Scope : unsigned {
  scope_train = 1u << 0,
  scope_eval = 1u << 1,
  scope_proto = 1u << 2,
  scope_sweep = 1u << 3,
  scope_augment = 1u << 4,
  scope_inspect = 1u << 5,
  scope_stats = 1u << 6,
};

struct FieldSpec {
  using Member = std::variant<std::string RunConfig::*, int RunConfig::*, double RunConfig::*, std::uint64_t RunConfig::*>;

  const char* key;   // config file key
  const char* flag;  // command-line flag
  const char* help;
  unsigned scopes;
  Member member;
};

std::span<const FieldSpec> run_config_fields();

std::string field_to_string(const RunConfig& c, const FieldSpec& f);
void field_from_string(RunConfig& c, const FieldSpec& f, const std::string& value);

}  // namespace homnet
