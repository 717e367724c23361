#include "compscale/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numbers>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "compscale/json_util.hpp"

namespace compscale {

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("train config: peak_lr must be positive");
  if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) {
    throw ConfigError("train config: final_lr_fraction must lie in [0, 1]");
  }
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train config: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train config: adam_eps must be positive");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train config: grad_clip_norm must be positive");
  if (eval_tokens == 0) throw ConfigError("train config: eval_tokens must be positive");
  if (!(divergence_factor > 1.0)) throw ConfigError("train config: divergence_factor must exceed 1");
}

std::size_t TrainConfig::total_steps(std::size_t seq_len) const {
  const double per_step = static_cast<double>(batch_size * seq_len);
  return static_cast<std::size_t>(std::llround(static_cast<double>(total_tokens) / per_step));
}

double TrainConfig::lr_at(std::size_t step, std::size_t steps) const {
  if (step < warmup_steps) return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const std::size_t decay = steps > warmup_steps ? steps - warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return peak_lr * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"final_lr_fraction", c.final_lr_fraction},
                     {"batch_size", c.batch_size},
                     {"weight_decay", c.weight_decay},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"grad_clip_norm", c.grad_clip_norm},
                     {"total_tokens", c.total_tokens},
                     {"eval_tokens", c.eval_tokens},
                     {"seed", c.seed},
                     {"curve_points", c.curve_points},
                     {"divergence_factor", c.divergence_factor}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  constexpr std::string_view ctx = "train";
  reject_unknown_keys(j,
                      {"peak_lr", "warmup_steps", "final_lr_fraction", "batch_size", "weight_decay", "adam_beta1",
                       "adam_beta2", "adam_eps", "grad_clip_norm", "total_tokens", "eval_tokens", "seed",
                       "curve_points", "divergence_factor"},
                      ctx);
  read_optional(j, "peak_lr", c.peak_lr, ctx);
  read_optional(j, "warmup_steps", c.warmup_steps, ctx);
  read_optional(j, "final_lr_fraction", c.final_lr_fraction, ctx);
  read_optional(j, "batch_size", c.batch_size, ctx);
  read_optional(j, "weight_decay", c.weight_decay, ctx);
  read_optional(j, "adam_beta1", c.adam_beta1, ctx);
  read_optional(j, "adam_beta2", c.adam_beta2, ctx);
  read_optional(j, "adam_eps", c.adam_eps, ctx);
  read_optional(j, "grad_clip_norm", c.grad_clip_norm, ctx);
  read_optional(j, "total_tokens", c.total_tokens, ctx);
  read_optional(j, "eval_tokens", c.eval_tokens, ctx);
  read_optional(j, "seed", c.seed, ctx);
  read_optional(j, "curve_points", c.curve_points, ctx);
  read_optional(j, "divergence_factor", c.divergence_factor, ctx);
}

namespace {

nlohmann::json loss_to_json(double v) {
  if (std::isinf(v) && v > 0) return "inf";
  return v;
}

double loss_from_json(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const RunRecord& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.curve) curve.push_back({p.step, loss_to_json(p.loss)});
  j = nlohmann::json{{"schema", kRunSchemaVersion},
                     {"digest", r.digest},
                     {"model", r.model},
                     {"train", r.train},
                     {"spec", r.spec},
                     {"N", r.n_params},
                     {"D", r.tokens},
                     {"ratio", r.ratio},
                     {"final_loss", loss_to_json(r.final_loss)},
                     {"diverged", r.diverged},
                     {"curve", curve},
                     {"wallclock_s", r.wallclock_s},
                     {"version", r.version}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  reject_unknown_keys(j,
                      {"schema", "digest", "model", "train", "spec", "N", "D", "ratio", "final_loss", "diverged",
                       "curve", "wallclock_s", "version"},
                      "run record");
  try {
    const int schema = j.at("schema").get<int>();
    if (schema != kRunSchemaVersion) {
      throw ConfigError("run record: unsupported schema version " + std::to_string(schema));
    }
    r.digest = j.at("digest").get<std::string>();
    r.model = j.at("model").get<ModelConfig>();
    r.train = j.at("train").get<TrainConfig>();
    r.spec = j.at("spec").get<std::string>();
    r.n_params = j.at("N").get<std::size_t>();
    r.tokens = j.at("D").get<std::size_t>();
    r.ratio = j.at("ratio").get<double>();
    r.final_loss = loss_from_json(j.at("final_loss"));
    r.diverged = j.at("diverged").get<bool>();
    r.curve.clear();
    for (const auto& p : j.at("curve")) r.curve.push_back({p.at(0).get<std::size_t>(), loss_from_json(p.at(1))});
    r.wallclock_s = j.at("wallclock_s").get<double>();
    r.version = j.at("version").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run record: ") + e.what());
  }
}

std::string run_digest(const ModelConfig& model, const TrainConfig& train, const CompressionSpec& spec) {
  const nlohmann::json key = {{"model", model}, {"train", train}, {"spec", spec.to_string()}, {"seed", train.seed}};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : key.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double validation_loss(const ModelParams<float>& params, const TokenStream& stream, const TrainConfig& train,
                       const CompressionSpec& spec) {
  const auto blocks = validation_blocks(stream, train.batch_size, params.config.seq_len, train.eval_tokens);
  double total = 0.0;
  for (const auto& block : blocks) total += evaluate_loss(params, block, spec);
  return total / static_cast<double>(blocks.size());
}

namespace {

struct AdamState {
  std::vector<Tensor<float>> m, v;
};

// Returns false when the gradient norm is not finite.
bool adamw_step(ModelParams<float>& params, const std::vector<const Tensor<float>*>& grads,
                const std::vector<ParamInfo>& infos, AdamState& state, const TrainConfig& tc, double lr,
                std::size_t t) {
  double sq = 0.0;
  for (const auto* g : grads) {
    for (float x : g->data()) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return false;
  const double clip = norm > tc.grad_clip_norm ? tc.grad_clip_norm / norm : 1.0;
  const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto p = params.tensors[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const auto g = grads[i]->data();
    const double decay = infos[i].decayed() ? tc.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = clip * g[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + tc.adam_eps) + decay * p[j];
      p[j] = static_cast<float>(p[j] - lr * update);
    }
  }
  return true;
}

}  // namespace

namespace {

// Every step frees and reallocates the same activation buffers. glibc serves
// large ones from fresh mmap pages by default, and the page faults cost about
// a fifth of a step, so raise the thresholds once per process.
void keep_buffers_on_heap() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

TrainResult train_model(const ModelConfig& model, const TrainConfig& tc, const TokenStream& stream,
                        const CompressionSpec& spec) {
  keep_buffers_on_heap();
  model.validate();
  tc.validate();
  spec.validate();
  if (stream.vocab_size != model.vocab_size) {
    throw ConfigError("train: stream vocab " + std::to_string(stream.vocab_size) + " differs from model vocab " +
                      std::to_string(model.vocab_size));
  }
  const auto started = std::chrono::steady_clock::now();
  const std::size_t steps = tc.total_steps(model.seq_len);
  // Windows carry seq_len + 1 tokens, so this is what one pass without reuse needs.
  const std::size_t tokens = steps * tc.batch_size * model.seq_len;
  const std::size_t needed = steps * tc.batch_size * (model.seq_len + 1);
  if (stream.train().size() < needed) {
    throw DomainError("train: training slice has " + std::to_string(stream.train().size()) + " tokens, run needs " +
                      std::to_string(needed));
  }

  TrainResult result{{}, init_params<float>(model, tc.seed)};
  RunRecord& rec = result.record;
  rec.digest = run_digest(model, tc, spec);
  rec.model = model;
  rec.train = tc;
  rec.spec = spec.to_string();
  rec.n_params = param_count(model).total;
  rec.tokens = tokens;
  rec.ratio = static_cast<double>(tokens) / static_cast<double>(rec.n_params);

  const auto infos = param_layout(model);
  AdamState state;
  for (const auto& t : result.params.tensors) {
    state.m.emplace_back(t.shape());
    state.v.emplace_back(t.shape());
  }
  const std::size_t every = std::max<std::size_t>(1, steps / std::max<std::size_t>(1, tc.curve_points));
  std::optional<BatchSampler> sampler;
  if (steps > 0) sampler.emplace(stream, tc.batch_size, model.seq_len, CounterRng::mix(tc.seed ^ 0x5eedba7c4ULL));

  double first_loss = 0.0;
  for (std::size_t step = 0; step < steps && !rec.diverged; ++step) {
    const TokenBlock block = sampler->next();
    Tape<float> tape;
    const auto vars = bind_params(tape, result.params, true);
    double loss = std::numeric_limits<double>::quiet_NaN();
    bool ok = true;
    try {
      const Var out = forward_loss(tape, model, vars, block, spec);
      loss = tape.value(out)[0];
      if (std::isfinite(loss)) tape.backward(out);
    } catch (const NumericError&) {
      ok = false;
    }
    if (step == 0) first_loss = loss;
    const bool blew_up = step >= tc.warmup_steps && loss > tc.divergence_factor * first_loss;
    if (!ok || !std::isfinite(loss) || blew_up) {
      rec.diverged = true;
      rec.curve.push_back({step, std::isfinite(loss) ? loss : std::numeric_limits<double>::infinity()});
      break;
    }
    if (step % every == 0) rec.curve.push_back({step, loss});
    std::vector<const Tensor<float>*> grads;
    grads.reserve(vars.size());
    for (const Var v : vars) grads.push_back(&tape.grad(v));
    if (!adamw_step(result.params, grads, infos, state, tc, tc.lr_at(step, steps), step + 1)) rec.diverged = true;
  }

  if (!rec.diverged) {
    try {
      rec.final_loss = validation_loss(result.params, stream, tc, spec);
    } catch (const NumericError&) {
      rec.final_loss = std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(rec.final_loss)) rec.diverged = true;
  }
  if (rec.diverged) rec.final_loss = std::numeric_limits<double>::infinity();
  rec.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

RunRecord train(const ModelConfig& model, const TrainConfig& tc, const TokenStream& stream,
                const CompressionSpec& spec) {
  return train_model(model, tc, stream, spec).record;
}

std::vector<RunRecord> RunStore::load() const {
  std::vector<RunRecord> out;
  std::ifstream in(path_);
  if (!in) return out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<RunRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + ":" + std::to_string(number) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(path_ + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

std::set<std::string> RunStore::digests() const {
  std::set<std::string> out;
  for (const auto& r : load()) out.insert(r.digest);
  return out;
}

void RunStore::append(const RunRecord& record) {
  const std::string line = nlohmann::json(record).dump() + "\n";
  std::lock_guard lock(mutex_);
  std::ofstream out(path_, std::ios::app);
  if (!out) throw ConfigError("cannot append to run store " + path_);
  out << line;
  out.flush();
  if (!out) throw ConfigError("write failed for run store " + path_);
}

std::vector<SizePreset> size_presets(double anchor_lr) {
  struct Shape {
    const char* name;
    std::size_t d, layers, heads;
  };
  const Shape shapes[] = {{"0.2M", 64, 3, 2}, {"0.5M", 96, 4, 3}, {"1.1M", 128, 5, 4}, {"2.4M", 160, 7, 5}};
  std::vector<SizePreset> out;
  for (const auto& s : shapes) {
    ModelConfig m;
    m.vocab_size = 256;
    m.d_model = s.d;
    m.n_layers = s.layers;
    m.n_heads = s.heads;
    m.d_ff = 3 * s.d;
    m.seq_len = 64;
    out.push_back({s.name, m, anchor_lr * std::sqrt(64.0 / static_cast<double>(s.d)), 16});
  }
  return out;
}

const SizePreset& find_preset(const std::vector<SizePreset>& presets, const std::string& name) {
  for (const auto& p : presets) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown size preset '" + name + "'");
}

TrainConfig sweep_train_config(const SizePreset& preset, double ratio, const TrainConfig& base) {
  if (!(ratio > 0.0)) throw ConfigError("sweep: ratio must be positive");
  TrainConfig tc = base;
  tc.peak_lr = preset.peak_lr;
  tc.batch_size = preset.batch_size;
  tc.total_tokens = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(param_count(preset.model).total)));
  return tc;
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < jobs; ++t) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) task(i);
    });
  }
  for (auto& th : threads) th.join();
}

SweepResult chinchilla_sweep(const std::vector<SizePreset>& presets, double ratio,
                             const std::vector<CompressionSpec>& specs, const TrainConfig& base,
                             const TokenStream& stream, const SweepOptions& options) {
  if (presets.size() < 3) throw ConfigError("sweep: need at least 3 size presets");
  struct Cell {
    const SizePreset* preset;
    TrainConfig tc;
    const CompressionSpec* spec;
    std::string digest;
  };
  std::vector<Cell> cells;
  SweepResult result;
  for (const auto& preset : presets) {
    // One train config per size, shared by every spec.
    const TrainConfig tc = sweep_train_config(preset, ratio, base);
    for (const auto& spec : specs) {
      Cell cell{&preset, tc, &spec, run_digest(preset.model, tc, spec)};
      if (options.skip_digests.count(cell.digest)) {
        ++result.skipped;
        continue;
      }
      cells.push_back(std::move(cell));
    }
  }
  std::vector<std::optional<RunRecord>> done(cells.size());
  std::vector<std::optional<std::string>> errors(cells.size());
  std::mutex lock;
  parallel_for(cells.size(), options.jobs, [&](std::size_t i) {
    const Cell& cell = cells[i];
    try {
      RunRecord rec = train(cell.preset->model, cell.tc, stream, *cell.spec);
      std::lock_guard guard(lock);
      if (options.on_record) options.on_record(rec);
      done[i] = std::move(rec);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (done[i]) result.records.push_back(std::move(*done[i]));
    if (errors[i]) result.failures.push_back({cells[i].preset->name + "/" + cells[i].spec->to_string(), *errors[i]});
  }
  return result;
}

LrSweepResult lr_sweep(const ModelConfig& model, const TrainConfig& base, const TokenStream& stream,
                       const std::vector<CompressionSpec>& specs, const std::vector<double>& lr_grid,
                       std::size_t jobs) {
  if (lr_grid.empty()) throw ConfigError("lr sweep: empty learning-rate grid");
  if (specs.empty()) throw ConfigError("lr sweep: no specs");
  LrSweepResult result;
  result.cells.resize(specs.size() * lr_grid.size());
  parallel_for(result.cells.size(), jobs, [&](std::size_t i) {
    const auto& spec = specs[i / lr_grid.size()];
    TrainConfig tc = base;
    tc.peak_lr = lr_grid[i % lr_grid.size()];
    const RunRecord rec = train(model, tc, stream, spec);
    result.cells[i] = {rec.spec, tc.peak_lr, rec.final_loss, rec.diverged};
  });
  for (std::size_t s = 0; s < specs.size(); ++s) {
    std::optional<double> best_lr;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < lr_grid.size(); ++k) {
      const auto& cell = result.cells[s * lr_grid.size() + k];
      if (!cell.diverged && cell.loss < best) {
        best = cell.loss;
        best_lr = cell.lr;
      }
    }
    result.argmin.emplace_back(specs[s].to_string(), best_lr);
  }
  return result;
}

}  // namespace compscale
