#pragma once

// Deterministic AdamW training of the tiny decoder on a token stream, run
// records with an append-only JSON-lines store, and the two sweep protocols
// (fixed tokens-per-parameter across sizes, learning-rate grids).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "compscale/compress.hpp"
#include "compscale/data.hpp"
#include "compscale/model.hpp"
#include "json.hpp"

namespace compscale {

inline constexpr const char* kArtifactVersion = "0.1.0";
inline constexpr int kRunSchemaVersion = 1;

struct TrainConfig {
  double peak_lr = 3e-3;
  std::size_t warmup_steps = 50;
  double final_lr_fraction = 0.1;  // cosine decays to this fraction of peak
  std::size_t batch_size = 16;
  double weight_decay = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  std::size_t total_tokens = 0;  // D, counted in predicted (target) tokens
  std::size_t eval_tokens = 16384;
  std::uint64_t seed = 0;
  std::size_t curve_points = 32;
  // A run also counts as diverged when its training loss, after warmup,
  // exceeds this multiple of the loss at step 0.
  double divergence_factor = 1.5;

  void validate() const;
  std::size_t total_steps(std::size_t seq_len) const;
  double lr_at(std::size_t step, std::size_t total_steps) const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct RunRecord {
  std::string digest;
  ModelConfig model;
  TrainConfig train;
  std::string spec;
  std::size_t n_params = 0;  // N: total parameter count
  std::size_t tokens = 0;    // D: tokens actually trained on
  double ratio = 0.0;        // D / N
  double final_loss = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::vector<CurvePoint> curve;
  double wallclock_s = 0.0;
  std::string version = kArtifactVersion;
};

// +inf losses of diverged runs are written as the string "inf".
void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

// FNV-1a over the canonical JSON of (model, train, spec, seed), as 16 hex digits.
std::string run_digest(const ModelConfig& model, const TrainConfig& train, const CompressionSpec& spec);

// Validation loss averaged over `eval_tokens` of the validation slice.
double validation_loss(const ModelParams<float>& params, const TokenStream& stream, const TrainConfig& train,
                       const CompressionSpec& spec);

struct TrainResult {
  RunRecord record;
  ModelParams<float> params;
};

// Trains from init_params(model, train.seed). Non-finite losses or the blow-up
// rule above mark the record diverged with an infinite final loss; they do not
// throw. DomainError if the training slice holds fewer than D tokens.
TrainResult train_model(const ModelConfig& model, const TrainConfig& train, const TokenStream& stream,
                        const CompressionSpec& spec);
RunRecord train(const ModelConfig& model, const TrainConfig& train, const TokenStream& stream,
                const CompressionSpec& spec);

// Append-only JSON-lines store; appends are serialized by a mutex and flushed
// line by line.
class RunStore {
 public:
  explicit RunStore(std::string path) : path_(std::move(path)) {}

  // ConfigError on malformed lines or an unknown schema version. A missing
  // file reads as empty.
  std::vector<RunRecord> load() const;
  std::set<std::string> digests() const;
  void append(const RunRecord& record);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::mutex mutex_;
};

struct SizePreset {
  std::string name;
  ModelConfig model;
  double peak_lr = 0.0;
  std::size_t batch_size = 16;

  friend bool operator==(const SizePreset&, const SizePreset&) = default;
};

// Desk-scale presets of roughly 0.2M, 0.5M, 1.1M and 2.4M parameters over a
// 256-token vocabulary. Peak lr scales as 1/sqrt(d_model) from the anchor.
inline constexpr double kDefaultAnchorLr = 4e-3;  // peak lr at d_model = 64
std::vector<SizePreset> size_presets(double anchor_lr = kDefaultAnchorLr);
const SizePreset& find_preset(const std::vector<SizePreset>& presets, const std::string& name);

struct SweepOptions {
  std::size_t jobs = 1;
  std::set<std::string> skip_digests;                    // cells already in the store
  std::function<void(const RunRecord&)> on_record;       // called under a lock
};

struct SweepFailure {
  std::string cell;
  std::string error;
};

struct SweepResult {
  std::vector<RunRecord> records;  // new records in cell order
  std::vector<SweepFailure> failures;
  std::size_t skipped = 0;
};

// The train config a sweep uses for one preset at one ratio: base with the
// preset's lr and batch, and D = ratio * N.
TrainConfig sweep_train_config(const SizePreset& preset, double ratio, const TrainConfig& base);

// One run per (preset, spec) with D = ratio * N. All specs at a size share
// the same train config. Throws ConfigError for fewer than 3 presets.
SweepResult chinchilla_sweep(const std::vector<SizePreset>& presets, double ratio,
                             const std::vector<CompressionSpec>& specs, const TrainConfig& base,
                             const TokenStream& stream, const SweepOptions& options = {});

struct LrCell {
  std::string spec;
  double lr = 0.0;
  double loss = 0.0;
  bool diverged = false;
};

struct LrSweepResult {
  std::vector<LrCell> cells;  // spec-major, lr grid order
  // Per spec, the grid lr with the lowest non-diverged loss (none if all diverged).
  std::vector<std::pair<std::string, std::optional<double>>> argmin;
};

LrSweepResult lr_sweep(const ModelConfig& model, const TrainConfig& base, const TokenStream& stream,
                       const std::vector<CompressionSpec>& specs, const std::vector<double>& lr_grid,
                       std::size_t jobs = 1);

// Runs task(i) for i in [0, count) on up to `jobs` threads.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task);

}  // namespace compscale
