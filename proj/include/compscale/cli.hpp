#pragma once

// The compscale command line: experiment configs and the subcommands that
// front the data, trainer, lawfit and analysis modules.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "compscale/data.hpp"
#include "compscale/trainer.hpp"
#include "json.hpp"

namespace compscale {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitFit = 3;
inline constexpr int kExitDiverged = 4;

struct DataSource {
  std::string path;  // token file; empty means the synthetic corpus
  std::size_t vocab_size = 256;
  std::size_t tokens = 0;  // synthetic length; 0 sizes the corpus to the largest run
  std::uint64_t seed = 1;
  double validation_fraction = kDefaultValidationFraction;

  friend bool operator==(const DataSource&, const DataSource&) = default;
};

struct ExperimentConfig {
  // In JSON each entry is a preset name (resolved with anchor_lr) or an
  // object {name, model, peak_lr, batch_size}.
  std::vector<SizePreset> sizes = default_sizes();
  std::vector<double> ratios{20.0};
  std::vector<std::string> specs{"dense"};
  TrainConfig train;  // base config; lr, batch and D come from the size and ratio
  DataSource data;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;  // overrides train.seed
  double anchor_lr = kDefaultAnchorLr;
  std::size_t jobs = 1;

  static std::vector<SizePreset> default_sizes();
  // ConfigError on empty lists, bad specs, non-positive ratios or jobs.
  void validate() const;
  std::string store_path() const { return output_dir + "/runs.jsonl"; }
  TrainConfig base_train() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

void to_json(nlohmann::json& j, const DataSource& d);
void from_json(const nlohmann::json& j, DataSource& d);
void to_json(nlohmann::json& j, const SizePreset& p);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment(const std::string& path);

// Synthetic corpus length that covers every (size, ratio) cell of `config`
// without token reuse, plus the evaluation windows.
std::size_t required_corpus_tokens(const ExperimentConfig& config);

// Token file or synthetic corpus per config.data.
TokenStream load_data(const ExperimentConfig& config);

// Runs one command line (args excludes the program name). Results go to
// `out`; errors print one JSON line {"error": {...}} to `err`. Returns the
// process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace compscale
