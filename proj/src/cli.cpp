#include "compscale/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "compscale/analysis.hpp"
#include "compscale/json_util.hpp"
#include "compscale/lawfit.hpp"

namespace compscale {

std::vector<SizePreset> ExperimentConfig::default_sizes() {
  auto all = size_presets();
  return {all.begin(), all.begin() + 3};
}

void ExperimentConfig::validate() const {
  if (sizes.empty()) throw ConfigError("experiment: sizes must not be empty");
  if (ratios.empty()) throw ConfigError("experiment: ratios must not be empty");
  if (specs.empty()) throw ConfigError("experiment: specs must not be empty");
  for (double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("experiment: ratios must be positive");
  }
  for (const auto& s : specs) CompressionSpec::parse(s);
  for (const auto& p : sizes) {
    p.model.validate();
    if (p.model.vocab_size != data.vocab_size) {
      throw ConfigError("experiment: size " + p.name + " has vocab " + std::to_string(p.model.vocab_size) +
                        " but data has " + std::to_string(data.vocab_size));
    }
  }
  if (jobs == 0) throw ConfigError("experiment: jobs must be at least 1");
  if (!(anchor_lr > 0.0)) throw ConfigError("experiment: anchor_lr must be positive");
  if (!(data.validation_fraction > 0.0 && data.validation_fraction < 1.0)) {
    throw ConfigError("experiment: data.validation_fraction must lie in (0, 1)");
  }
  base_train().validate();
}

TrainConfig ExperimentConfig::base_train() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void to_json(nlohmann::json& j, const DataSource& d) {
  j = nlohmann::json{{"path", d.path},
                     {"vocab_size", d.vocab_size},
                     {"tokens", d.tokens},
                     {"seed", d.seed},
                     {"validation_fraction", d.validation_fraction}};
}

void from_json(const nlohmann::json& j, DataSource& d) {
  constexpr std::string_view ctx = "data";
  reject_unknown_keys(j, {"path", "vocab_size", "tokens", "seed", "validation_fraction"}, ctx);
  read_optional(j, "path", d.path, ctx);
  read_optional(j, "vocab_size", d.vocab_size, ctx);
  read_optional(j, "tokens", d.tokens, ctx);
  read_optional(j, "seed", d.seed, ctx);
  read_optional(j, "validation_fraction", d.validation_fraction, ctx);
}

void to_json(nlohmann::json& j, const SizePreset& p) {
  j = nlohmann::json{{"name", p.name}, {"model", p.model}, {"peak_lr", p.peak_lr}, {"batch_size", p.batch_size}};
}

namespace {

SizePreset size_from_json(const nlohmann::json& j, double anchor_lr) {
  if (j.is_string()) return find_preset(size_presets(anchor_lr), j.get<std::string>());
  constexpr std::string_view ctx = "sizes[]";
  reject_unknown_keys(j, {"name", "model", "peak_lr", "batch_size"}, ctx);
  SizePreset p;
  read_optional(j, "name", p.name, ctx);
  read_optional(j, "model", p.model, ctx);
  read_optional(j, "peak_lr", p.peak_lr, ctx);
  read_optional(j, "batch_size", p.batch_size, ctx);
  if (p.name.empty()) throw ConfigError("sizes[]: a custom size needs a name");
  if (!(p.peak_lr > 0.0)) throw ConfigError("sizes[]: size " + p.name + " needs a positive peak_lr");
  return p;
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"sizes", c.sizes},
                     {"ratios", c.ratios},
                     {"specs", c.specs},
                     {"train", c.train},
                     {"data", c.data},
                     {"output_dir", c.output_dir},
                     {"seed", c.seed},
                     {"anchor_lr", c.anchor_lr},
                     {"jobs", c.jobs}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  constexpr std::string_view ctx = "experiment";
  reject_unknown_keys(j, {"sizes", "ratios", "specs", "train", "data", "output_dir", "seed", "anchor_lr", "jobs"}, ctx);
  read_optional(j, "anchor_lr", c.anchor_lr, ctx);
  if (j.contains("sizes")) {
    if (!j.at("sizes").is_array()) throw ConfigError("experiment.sizes: expected an array");
    c.sizes.clear();
    for (const auto& item : j.at("sizes")) c.sizes.push_back(size_from_json(item, c.anchor_lr));
  } else if (j.contains("anchor_lr")) {
    auto all = size_presets(c.anchor_lr);
    c.sizes.assign(all.begin(), all.begin() + 3);
  }
  read_optional(j, "ratios", c.ratios, ctx);
  read_optional(j, "specs", c.specs, ctx);
  read_optional(j, "train", c.train, ctx);
  read_optional(j, "data", c.data, ctx);
  read_optional(j, "output_dir", c.output_dir, ctx);
  read_optional(j, "seed", c.seed, ctx);
  read_optional(j, "jobs", c.jobs, ctx);
}

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw ConfigError("cannot write " + path);
}

}  // namespace

ExperimentConfig load_experiment(const std::string& path) {
  return read_json_file(path).get<ExperimentConfig>();
}

std::size_t required_corpus_tokens(const ExperimentConfig& config) {
  const TrainConfig base = config.base_train();
  std::size_t train_need = 0, val_need = 0;
  for (const auto& size : config.sizes) {
    const std::size_t window = size.model.seq_len + 1;
    for (double ratio : config.ratios) {
      const TrainConfig tc = sweep_train_config(size, ratio, base);
      train_need = std::max(train_need, tc.total_steps(size.model.seq_len) * tc.batch_size * window);
    }
    const std::size_t per_block = size.batch_size * size.model.seq_len;
    const std::size_t blocks = std::max<std::size_t>(1, (base.eval_tokens + per_block - 1) / per_block);
    val_need = std::max(val_need, blocks * size.batch_size * window);
  }
  const double f = config.data.validation_fraction;
  const auto by_train = static_cast<std::size_t>(std::ceil(static_cast<double>(train_need) / (1.0 - f)));
  const auto by_val = static_cast<std::size_t>(std::ceil(static_cast<double>(val_need) / f));
  return std::max(by_train, by_val) + 1;
}

TokenStream load_data(const ExperimentConfig& config) {
  const auto& d = config.data;
  if (!d.path.empty()) return load_tokens(d.path, d.vocab_size, d.validation_fraction);
  const std::size_t length = d.tokens ? d.tokens : required_corpus_tokens(config);
  return synth_corpus(d.vocab_size, length, d.seed, d.validation_fraction);
}

namespace {

struct CliFailure {
  int code;
  std::string type;
  std::string message;
};

// Options shared by the commands that take an experiment config.
struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::string> out_dir;
  std::optional<std::string> data;
  std::optional<std::size_t> data_tokens;
  std::vector<std::string> specs;
  std::vector<std::string> sizes;
  std::vector<double> ratios;

  ExperimentConfig resolve() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_experiment(config);
    if (seed) c.seed = *seed;
    if (jobs) c.jobs = *jobs;
    if (out_dir) c.output_dir = *out_dir;
    if (data) c.data.path = *data;
    if (data_tokens) c.data.tokens = *data_tokens;
    if (!specs.empty()) c.specs = specs;
    if (!ratios.empty()) c.ratios = ratios;
    if (!sizes.empty()) {
      std::vector<SizePreset> chosen;
      for (const auto& name : sizes) {
        const auto it = std::find_if(c.sizes.begin(), c.sizes.end(), [&](const SizePreset& p) { return p.name == name; });
        chosen.push_back(it != c.sizes.end() ? *it : find_preset(size_presets(c.anchor_lr), name));
      }
      c.sizes = chosen;
    }
    c.validate();
    return c;
  }
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f, bool lists) {
  cmd->add_option("--config", f.config, "experiment config (JSON)");
  cmd->add_option("--seed", f.seed, "run seed (overrides the config)");
  cmd->add_option("--out-dir", f.out_dir, "output directory holding runs.jsonl");
  cmd->add_option("--data", f.data, "token file (default: synthetic corpus)");
  cmd->add_option("--data-tokens", f.data_tokens, "synthetic corpus length");
  if (lists) {
    cmd->add_option("--jobs", f.jobs, "concurrent runs");
    cmd->add_option("--spec", f.specs, "compression specs (repeatable)");
    cmd->add_option("--size", f.sizes, "size preset names (repeatable)");
    cmd->add_option("--ratio", f.ratios, "tokens per parameter (repeatable)");
  }
}

std::vector<RunRecord> load_store(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("run store " + path + " does not exist");
  return RunStore(path).load();
}

LawParams read_law_params(const std::string& path) {
  const auto j = read_json_file(path);
  return (j.contains("params") ? j.at("params") : j).get<LawParams>();
}

std::vector<EpmEstimate> read_estimates(const std::string& path) {
  const auto j = read_json_file(path);
  if (!j.contains("estimates")) throw ConfigError(path + ": missing 'estimates'");
  return j.at("estimates").get<std::vector<EpmEstimate>>();
}

bool ratio_matches(const RunRecord& r, std::optional<double> ratio) {
  return !ratio || std::abs(r.ratio / *ratio - 1.0) < 0.1;
}

void emit(std::ostream& out, const nlohmann::json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  if (!path.empty()) write_text(path, text);
  out << text;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int cmd_gen_data(std::size_t vocab, std::size_t tokens, std::uint64_t seed, double fraction, const std::string& path,
                 bool entropy, std::ostream& out) {
  const auto stream = synth_corpus(vocab, tokens, seed, fraction);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  save_tokens(path, stream.tokens);
  nlohmann::json j{{"path", path}, {"tokens", tokens}, {"vocab_size", vocab}, {"seed", seed}};
  if (entropy) j["conditional_entropy"] = MarkovSource(vocab, seed).conditional_entropy();
  out << j.dump() << "\n";
  return kExitOk;
}

int cmd_train(const ExperimentConfig& c, const std::string& size, const std::string& spec_text, double ratio,
              std::ostream& out) {
  const auto it = std::find_if(c.sizes.begin(), c.sizes.end(), [&](const SizePreset& p) { return p.name == size; });
  const SizePreset preset = it != c.sizes.end() ? *it : find_preset(size_presets(c.anchor_lr), size);
  const auto spec = CompressionSpec::parse(spec_text);
  const TrainConfig tc = sweep_train_config(preset, ratio, c.base_train());
  ExperimentConfig data_cfg = c;
  data_cfg.sizes = {preset};
  data_cfg.ratios = {ratio};
  const auto stream = load_data(data_cfg);
  const auto record = train(preset.model, tc, stream, spec);
  std::filesystem::create_directories(c.output_dir);
  RunStore(c.store_path()).append(record);
  out << nlohmann::json(record).dump() << "\n";
  return record.diverged ? kExitDiverged : kExitOk;
}

int cmd_sweep(const ExperimentConfig& c, std::ostream& out) {
  std::filesystem::create_directories(c.output_dir);
  RunStore store(c.store_path());
  const auto existing = store.digests();
  std::vector<CompressionSpec> specs;
  for (const auto& s : c.specs) specs.push_back(CompressionSpec::parse(s));
  const TrainConfig base = c.base_train();
  std::size_t pending = 0;
  for (double ratio : c.ratios) {
    for (const auto& size : c.sizes) {
      const auto tc = sweep_train_config(size, ratio, base);
      for (const auto& spec : specs) pending += !existing.count(run_digest(size.model, tc, spec));
    }
  }
  SweepResult total;
  if (pending > 0) {
    const auto stream = load_data(c);
    SweepOptions options;
    options.jobs = c.jobs;
    options.skip_digests = existing;
    options.on_record = [&](const RunRecord& r) { store.append(r); };
    for (double ratio : c.ratios) {
      auto r = chinchilla_sweep(c.sizes, ratio, specs, base, stream, options);
      total.records.insert(total.records.end(), r.records.begin(), r.records.end());
      total.failures.insert(total.failures.end(), r.failures.begin(), r.failures.end());
      total.skipped += r.skipped;
    }
  } else {
    total.skipped = c.sizes.size() * c.ratios.size() * specs.size();
  }
  std::size_t diverged = 0;
  for (const auto& r : total.records) diverged += r.diverged;
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : total.failures) failures.push_back({{"cell", f.cell}, {"error", f.error}});
  out << nlohmann::json{{"new", total.records.size()},
                        {"skipped", total.skipped},
                        {"diverged", diverged},
                        {"failures", failures},
                        {"store", c.store_path()}}
             .dump()
      << "\n";
  if (!total.failures.empty()) return kExitFit;
  return diverged ? kExitDiverged : kExitOk;
}

int cmd_fit(const std::string& store, const std::string& path, std::ostream& out) {
  const auto points = law_points(load_store(store), CompressionSpec::dense());
  emit(out, nlohmann::json(fit_dense(points)), path);
  return kExitOk;
}

int cmd_epm(const std::string& store, const std::string& fit_path, std::vector<std::string> specs,
            std::optional<double> ratio, bool joint, const std::string& path, std::ostream& out) {
  const auto records = load_store(store);
  const LawParams params = read_law_params(fit_path);
  std::vector<RunRecord> selected;
  for (const auto& r : records) {
    if (ratio_matches(r, ratio)) selected.push_back(r);
  }
  if (specs.empty()) {
    std::set<std::string> seen;
    for (const auto& r : selected) {
      const auto spec = CompressionSpec::parse(r.spec);
      if (!spec.is_dense() && seen.insert(spec.to_string()).second) specs.push_back(spec.to_string());
    }
  }
  nlohmann::json estimates = nlohmann::json::array();
  std::vector<EpmEstimate> list;
  std::map<std::string, std::vector<LawPoint>> compressed;
  for (const auto& s : specs) {
    const auto spec = CompressionSpec::parse(s);
    const auto points = law_points(selected, spec);
    list.push_back(fit_epm(points, spec, params));
    compressed[spec.to_string()] = points;
    estimates.push_back(list.back());
  }
  nlohmann::json j{{"params", params}, {"estimates", estimates}};
  if (joint) {
    const auto dense_points = law_points(selected, CompressionSpec::dense());
    DenseFit dense;
    dense.params = params;
    j["joint_refit"] = joint_refit(dense_points, compressed, dense, list);
  }
  emit(out, j, path);
  return kExitOk;
}

int cmd_check(const std::string& store, const std::string& fit_path, const std::string& epm_path,
              const std::string& spec_text, std::optional<double> ratio, double tolerance, const std::string& path,
              std::ostream& out) {
  const auto records = load_store(store);
  const LawParams params = read_law_params(fit_path);
  const auto want = CompressionSpec::parse(spec_text).to_string();
  const auto estimates = read_estimates(epm_path);
  const auto it = std::find_if(estimates.begin(), estimates.end(),
                               [&](const EpmEstimate& e) { return CompressionSpec::parse(e.spec).to_string() == want; });
  if (it == estimates.end()) throw ConfigError("no estimate for spec " + want + " in " + epm_path);
  const std::set<std::string> used(it->digests.begin(), it->digests.end());
  std::vector<RunRecord> held_out;
  for (const auto& r : records) {
    if (r.diverged || used.count(r.digest) || !ratio_matches(r, ratio)) continue;
    if (CompressionSpec::parse(r.spec).to_string() == want) held_out.push_back(r);
  }
  const auto report = data_independence_check(held_out, params, *it);
  nlohmann::json j = report;
  j["tolerance"] = tolerance;
  j["consistent"] = report.consistent(tolerance);
  emit(out, j, path);
  return kExitOk;
}

int cmd_analyze(const std::string& store, const std::string& fit_path, const std::string& epm_path,
                const std::string& out_dir, std::ostream& out) {
  const auto records = load_store(store);
  ReportFits fits;
  std::map<std::string, double> epm;
  if (!fit_path.empty()) fits.params = read_law_params(fit_path);
  if (!epm_path.empty()) {
    for (const auto& e : read_estimates(epm_path)) {
      fits.eff[e.spec] = e.eff;
      epm[CompressionSpec::parse(e.spec).to_string()] = e.eff;
    }
  }
  const auto report = emit_report(records, fits);
  const std::string dir = out_dir.empty() ? "." : out_dir;
  write_text(dir + "/report.csv", report.csv);
  write_text(dir + "/report.svg", report.svg);

  nlohmann::json gains = nlohmann::json::object();
  for (const auto& [name, eff] : epm) {
    const auto spec = CompressionSpec::parse(name);
    if (const auto* q = spec.weight_quant()) gains[name] = size_gain(eff, q->bits);
    if (const auto* s = spec.weight_sparsity()) gains[name] = size_gain_sparse(eff, s->fraction);
  }
  nlohmann::json summary{{"size_gain", gains}};
  for (Counting counting : {Counting::kLinear, Counting::kQuadratic}) {
    nlohmann::json pareto = nlohmann::json::array();
    for (const auto& p : mark_dominated(pareto_points(epm, counting))) {
      pareto.push_back({{"spec", p.spec}, {"efficiency", p.efficiency}, {"eff", p.quality}, {"dominated", p.dominated}});
    }
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : compare_at_equal_cost(epm, counting)) {
      pairs.push_back({{"cost", p.cost},
                       {"better", p.better},
                       {"worse", p.worse},
                       {"better_eff", p.better_eff},
                       {"worse_eff", p.worse_eff},
                       {"delta", p.delta}});
    }
    summary["pareto"][to_string(counting)] = pareto;
    summary["equal_cost"][to_string(counting)] = pairs;
  }
  write_text(dir + "/analysis.json", summary.dump(2) + "\n");
  out << nlohmann::json{{"csv", dir + "/report.csv"}, {"svg", dir + "/report.svg"}, {"analysis", dir + "/analysis.json"}}
             .dump()
      << "\n";
  return kExitOk;
}

struct PredictFlags {
  std::optional<double> a, b, c, d, e;
  std::string fit;
  double eff = 1.0;
  std::optional<double> n, tokens, flops;
  bool optimal_data = false;
  double ratio = kChinchillaRatio;
};

int cmd_predict(const PredictFlags& f, std::ostream& out) {
  if (f.optimal_data) {
    if (!f.n) throw ConfigError("predict --optimal-data needs --n");
    out << fmt(optimal_data(*f.n, f.eff, f.ratio)) << "\n";
    return kExitOk;
  }
  LawParams p;
  if (!f.fit.empty()) {
    p = read_law_params(f.fit);
  } else {
    if (!f.a || !f.b || !f.c || !f.d || !f.e) throw ConfigError("predict needs --fit or all of --a --b --c --d --e");
    p = {*f.a, *f.b, *f.c, *f.d, *f.e};
  }
  if (f.flops) {
    out << nlohmann::json(compute_optimal_allocation(p, f.eff, *f.flops)).dump() << "\n";
    return kExitOk;
  }
  if (!f.n || !f.tokens) throw ConfigError("predict needs --n and --d-tokens (or --flops)");
  out << fmt(predict_loss(p, *f.n, *f.tokens, f.eff)) << "\n";
  return kExitOk;
}

CliFailure classify(const std::exception& ex) {
  if (dynamic_cast<const FitError*>(&ex)) return {kExitFit, "FitError", ex.what()};
  if (dynamic_cast<const NumericError*>(&ex)) return {kExitFit, "NumericError", ex.what()};
  if (dynamic_cast<const ConfigError*>(&ex)) return {kExitConfig, "ConfigError", ex.what()};
  if (dynamic_cast<const DomainError*>(&ex)) return {kExitConfig, "DomainError", ex.what()};
  if (dynamic_cast<const ShapeError*>(&ex)) return {kExitConfig, "ShapeError", ex.what()};
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&ex)) return {kExitConfig, "IOError", ex.what()};
  return {kExitConfig, "Error", ex.what()};
}

void report_failure(std::ostream& err, const CliFailure& f) {
  err << nlohmann::json{{"error", {{"type", f.type}, {"message", f.message}, {"exit_code", f.code}}}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Scaling laws for compressed language models at desk scale", "compscale");
  app.require_subcommand(1);

  std::function<int()> action;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic token file");
  std::size_t vocab = 256, gen_tokens = 0;
  std::uint64_t gen_seed = 1;
  double gen_fraction = kDefaultValidationFraction;
  std::string gen_out;
  bool gen_entropy = false;
  gen->add_option("--vocab", vocab, "vocabulary size");
  gen->add_option("--tokens", gen_tokens, "corpus length")->required();
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--out", gen_out, "output token file")->required();
  gen->add_flag("--entropy", gen_entropy, "also report the source's conditional entropy");
  gen->callback([&] { action = [&] { return cmd_gen_data(vocab, gen_tokens, gen_seed, gen_fraction, gen_out, gen_entropy, out); }; });

  // train
  auto* tr = app.add_subcommand("train", "train one model and append its record");
  ConfigFlags train_flags;
  std::string train_size, train_spec = "dense";
  double train_ratio = kChinchillaRatio;
  add_config_flags(tr, train_flags, false);
  tr->add_option("--size", train_size, "size preset name")->required();
  tr->add_option("--spec", train_spec, "compression spec");
  tr->add_option("--ratio", train_ratio, "tokens per parameter");
  tr->callback([&] {
    action = [&] { return cmd_train(train_flags.resolve(), train_size, train_spec, train_ratio, out); };
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "run every (size, ratio, spec) cell missing from the store");
  ConfigFlags sweep_flags;
  add_config_flags(sw, sweep_flags, true);
  sw->callback([&] { action = [&] { return cmd_sweep(sweep_flags.resolve(), out); }; });

  // fit
  auto* fit = app.add_subcommand("fit", "fit the dense law to the dense records of a store");
  std::string fit_store, fit_out;
  fit->add_option("--store", fit_store, "run store (JSON lines)")->required();
  fit->add_option("--out", fit_out, "also write the fit here");
  fit->callback([&] { action = [&] { return cmd_fit(fit_store, fit_out, out); }; });

  // epm
  auto* epm = app.add_subcommand("epm", "fit eff per compression spec with the dense law frozen");
  std::string epm_store, epm_fit, epm_out;
  std::vector<std::string> epm_specs;
  std::optional<double> epm_ratio;
  bool epm_joint = false;
  epm->add_option("--store", epm_store, "run store")->required();
  epm->add_option("--fit", epm_fit, "dense fit JSON")->required();
  epm->add_option("--spec", epm_specs, "specs to fit (default: every compressed spec)");
  epm->add_option("--ratio", epm_ratio, "only use records within 10% of this tokens-per-parameter ratio");
  epm->add_flag("--joint", epm_joint, "add a joint refit cross-check");
  epm->add_option("--out", epm_out, "also write the estimates here");
  epm->callback([&] {
    action = [&] { return cmd_epm(epm_store, epm_fit, epm_specs, epm_ratio, epm_joint, epm_out, out); };
  });

  // check-independence
  auto* chk = app.add_subcommand("check-independence", "predict held-out records with a frozen eff");
  std::string chk_store, chk_fit, chk_epm, chk_spec, chk_out;
  std::optional<double> chk_ratio;
  double chk_tol = 0.02;
  chk->add_option("--store", chk_store, "run store")->required();
  chk->add_option("--fit", chk_fit, "dense fit JSON")->required();
  chk->add_option("--epm", chk_epm, "estimates JSON from epm")->required();
  chk->add_option("--spec", chk_spec, "spec to check")->required();
  chk->add_option("--ratio", chk_ratio, "only check records near this ratio");
  chk->add_option("--tolerance", chk_tol, "relative error counted as consistent");
  chk->add_option("--out", chk_out, "also write the report here");
  chk->callback([&] {
    action = [&] { return cmd_check(chk_store, chk_fit, chk_epm, chk_spec, chk_ratio, chk_tol, chk_out, out); };
  });

  // analyze
  auto* an = app.add_subcommand("analyze", "write report.csv, report.svg and analysis.json");
  std::string an_store, an_fit, an_epm, an_dir;
  an->add_option("--store", an_store, "run store")->required();
  an->add_option("--fit", an_fit, "dense fit JSON");
  an->add_option("--epm", an_epm, "estimates JSON");
  an->add_option("--out-dir", an_dir, "output directory");
  an->callback([&] { action = [&] { return cmd_analyze(an_store, an_fit, an_epm, an_dir, out); }; });

  // predict
  auto* pr = app.add_subcommand("predict", "evaluate the law, the optimal data budget or a FLOP allocation");
  PredictFlags pf;
  pr->add_option("--a", pf.a);
  pr->add_option("--b", pf.b);
  pr->add_option("--c", pf.c);
  pr->add_option("--d", pf.d);
  pr->add_option("--e", pf.e);
  pr->add_option("--fit", pf.fit, "dense fit JSON instead of --a..--e");
  pr->add_option("--eff", pf.eff, "effective parameter multiplier");
  pr->add_option("--n", pf.n, "parameters N");
  pr->add_option("--d-tokens", pf.tokens, "training tokens D");
  pr->add_option("--flops", pf.flops, "FLOP budget: print the loss-optimal (N, D)");
  pr->add_flag("--optimal-data", pf.optimal_data, "print ratio * N * eff");
  pr->add_option("--ratio", pf.ratio, "dense tokens-per-parameter ratio");
  pr->callback([&] { action = [&] { return cmd_predict(pf, out); }; });

  std::vector<std::string> argv_store{"compscale"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_failure(err, {kExitConfig, "UsageError", e.what()});
    return kExitConfig;
  }
  try {
    return action();
  } catch (const std::exception& ex) {
    report_failure(err, classify(ex));
    return classify(ex).code;
  }
}

}  // namespace compscale
