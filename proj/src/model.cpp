#include "compscale/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "compscale/json_util.hpp"

namespace compscale {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || seq_len == 0) {
    throw ConfigError("model config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model config: head dimension must be even for rotary embedding");
  if (!(rope_theta > 0.0) || !(init_std > 0.0)) {
    throw ConfigError("model config: rope_theta and init_std must be positive");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},             {"seq_len", c.seq_len},
                     {"rope_theta", c.rope_theta}, {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  constexpr std::string_view ctx = "model";
  reject_unknown_keys(j, {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "seq_len", "rope_theta", "init_std"},
                      ctx);
  read_optional(j, "vocab_size", c.vocab_size, ctx);
  read_optional(j, "d_model", c.d_model, ctx);
  read_optional(j, "n_layers", c.n_layers, ctx);
  read_optional(j, "n_heads", c.n_heads, ctx);
  read_optional(j, "d_ff", c.d_ff, ctx);
  read_optional(j, "seq_len", c.seq_len, ctx);
  read_optional(j, "rope_theta", c.rope_theta, ctx);
  read_optional(j, "init_std", c.init_std, ctx);
}

std::vector<ParamInfo> param_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  std::vector<ParamInfo> out;
  out.push_back({"token_embedding", {v, d}, ParamRole::kEmbedding});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "wq", {d, d}, ParamRole::kProjection});
    out.push_back({p + "wk", {d, d}, ParamRole::kProjection});
    out.push_back({p + "wv", {d, d}, ParamRole::kProjection});
    out.push_back({p + "wo", {d, d}, ParamRole::kProjection});
    out.push_back({p + "w_gate", {f, d}, ParamRole::kProjection});
    out.push_back({p + "w_up", {f, d}, ParamRole::kProjection});
    out.push_back({p + "w_down", {d, f}, ParamRole::kProjection});
    out.push_back({p + "attn_norm", {d}, ParamRole::kNormGain});
    out.push_back({p + "mlp_norm", {d}, ParamRole::kNormGain});
  }
  out.push_back({"final_norm", {d}, ParamRole::kNormGain});
  out.push_back({"head", {v, d}, ParamRole::kHead});
  return out;
}

ParamCount param_count(const ModelConfig& config) {
  ParamCount count;
  for (const auto& info : param_layout(config)) {
    const std::size_t n = shape_size(info.shape);
    count.total += n;
    if (info.role == ParamRole::kEmbedding || info.role == ParamRole::kHead) count.embedding_and_head += n;
    if (info.compressible()) count.compressible += n;
  }
  return count;
}

namespace {

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto infos = param_layout(ck.params.config);
  if (infos.size() != ck.params.tensors.size()) throw ShapeError("checkpoint: tensor count does not match config");
  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw ConfigError("checkpoint: cannot open " + path);
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < infos.size(); ++i) {
    const auto& t = ck.params.tensors[i];
    if (t.shape() != infos[i].shape) throw ShapeError("checkpoint: " + infos[i].name + " has the wrong shape");
    for (float v : t.data()) {
      const std::uint32_t word = to_little_endian(std::bit_cast<std::uint32_t>(v));
      bin.write(reinterpret_cast<const char*>(&word), sizeof(word));
    }
    tensors.push_back({{"name", infos[i].name}, {"shape", infos[i].shape}});
  }
  if (!bin) throw ConfigError("checkpoint: write failed for " + path);
  nlohmann::json header = {{"format", "compscale-checkpoint"}, {"version", 1},        {"dtype", "f32le"},
                           {"config", ck.params.config},       {"seed", ck.seed},     {"spec", ck.spec},
                           {"tensors", tensors}};
  std::ofstream side(path + ".json");
  side << header.dump(2) << '\n';
  if (!side) throw ConfigError("checkpoint: write failed for " + path + ".json");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw ConfigError("checkpoint: missing header " + path + ".json");
  nlohmann::json header;
  try {
    side >> header;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint: bad header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "compscale-checkpoint" || header.value("dtype", "") != "f32le") {
    throw ConfigError("checkpoint: unrecognized header in " + path + ".json");
  }
  Checkpoint ck;
  ck.params.config = header.at("config").get<ModelConfig>();
  ck.params.config.validate();
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.spec = header.at("spec").get<std::string>();
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw ConfigError("checkpoint: cannot open " + path);
  for (const auto& info : param_layout(ck.params.config)) {
    Tensor<float> t(info.shape);
    for (auto& v : t.data()) {
      std::uint32_t word = 0;
      if (!bin.read(reinterpret_cast<char*>(&word), sizeof(word))) {
        throw ConfigError("checkpoint: truncated data in " + path);
      }
      v = std::bit_cast<float>(to_little_endian(word));
    }
    ck.params.tensors.push_back(std::move(t));
  }
  if (bin.peek() != std::char_traits<char>::eof()) throw ConfigError("checkpoint: trailing bytes in " + path);
  return ck;
}

}  // namespace compscale
