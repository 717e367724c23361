#pragma once

// Tiny Llama-type decoder: pre-norm residual blocks, RoPE attention, SwiGLU
// MLP, untied embedding/head, no biases. Every attention/MLP projection can
// be compressed on the fly; embeddings, head and attention math never are.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "compscale/compress.hpp"
#include "compscale/ops.hpp"
#include "compscale/rng.hpp"
#include "compscale/tape.hpp"
#include "compscale/tensor.hpp"
#include "compscale/tokens.hpp"
#include "json.hpp"

namespace compscale {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 192;
  std::size_t seq_len = 64;
  double rope_theta = 10000.0;
  double init_std = 0.02;

  // Throws ConfigError on zero dims, d_model % n_heads != 0 or an odd head
  // dimension.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParamCount {
  std::size_t total = 0;
  std::size_t embedding_and_head = 0;
  std::size_t compressible = 0;
};

ParamCount param_count(const ModelConfig& config);

enum class ParamRole { kEmbedding, kProjection, kNormGain, kHead };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamRole role;

  bool compressible() const { return role == ParamRole::kProjection; }
  bool decayed() const { return role != ParamRole::kNormGain; }
};

// Fixed tensor order shared by ModelParams, optimizers and checkpoints:
// embedding, per layer {wq, wk, wv, wo, w_gate, w_up, w_down, attn_norm,
// mlp_norm}, final_norm, head. Linear weights are [out x in].
std::vector<ParamInfo> param_layout(const ModelConfig& config);

namespace layout {
inline constexpr std::size_t kPerLayer = 9;
enum LayerSlot : std::size_t { kWq, kWk, kWv, kWo, kGate, kUp, kDown, kAttnNorm, kMlpNorm };
inline std::size_t embedding() { return 0; }
inline std::size_t layer(std::size_t l, LayerSlot slot) { return 1 + l * kPerLayer + slot; }
inline std::size_t final_norm(std::size_t n_layers) { return 1 + n_layers * kPerLayer; }
inline std::size_t head(std::size_t n_layers) { return 2 + n_layers * kPerLayer; }
}  // namespace layout

// Full-precision master tensors in param_layout order.
template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<Tensor<T>> tensors;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out{config, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// N(0, init_std^2) for matrices from a counter-based stream per tensor;
// norm gains start at 1.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<T> params{config, {}};
  const auto infos = param_layout(config);
  params.tensors.reserve(infos.size());
  for (std::size_t i = 0; i < infos.size(); ++i) {
    Tensor<T> t(infos[i].shape);
    if (infos[i].role == ParamRole::kNormGain) {
      for (auto& v : t.data()) v = T{1};
    } else {
      const CounterRng rng(seed, i);
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<T>(config.init_std * rng.normal(j));
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

inline constexpr double kNormEpsilon = 1e-5;

// Mean next-token cross-entropy over `block`, built on `tape` from parameter
// handles in param_layout order. Weight compression (STE) wraps every
// projection weight; activation quantization (STE) wraps every projection
// input.
template <typename T>
Var forward_loss(Tape<T>& tape, const ModelConfig& config, std::span<const Var> params, const TokenBlock& block,
                 const CompressionSpec& spec) {
  if (params.size() != layout::head(config.n_layers) + 1) {
    throw ShapeError("forward_loss: expected " + std::to_string(layout::head(config.n_layers) + 1) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  if (block.length < 2 || block.batch == 0 || block.ids.size() != block.batch * block.length) {
    throw ShapeError("forward_loss: malformed token block");
  }
  const std::size_t t = block.length - 1;
  if (t > config.seq_len) {
    throw ShapeError("forward_loss: sequence of " + std::to_string(t) + " exceeds seq_len " +
                     std::to_string(config.seq_len));
  }
  std::vector<std::uint32_t> inputs, targets;
  inputs.reserve(block.batch * t);
  targets.reserve(block.batch * t);
  for (std::size_t b = 0; b < block.batch; ++b) {
    const auto row = block.row(b);
    for (std::size_t i = 0; i < t; ++i) {
      if (row[i] >= config.vocab_size || row[i + 1] >= config.vocab_size) {
        throw DomainError("forward_loss: token id outside vocab " + std::to_string(config.vocab_size));
      }
      inputs.push_back(row[i]);
      targets.push_back(row[i + 1]);
    }
  }

  const auto eps = static_cast<T>(kNormEpsilon);
  auto project = [&](Var input, std::size_t index) {
    return linear(tape, input, compress_weight(tape, params[index], spec));
  };

  Var x = embedding(tape, params[layout::embedding()], inputs);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    using namespace layout;
    const Var h = compress_activation(tape, rmsnorm(tape, x, params[layer(l, kAttnNorm)], eps), spec);
    const Var q = project(h, layer(l, kWq));
    const Var k = project(h, layer(l, kWk));
    const Var v = project(h, layer(l, kWv));
    const Var att = multihead_causal_attention(tape, q, k, v, block.batch, config.n_heads, config.rope_theta);
    x = add(tape, x, project(compress_activation(tape, att, spec), layer(l, kWo)));
    const Var h2 = compress_activation(tape, rmsnorm(tape, x, params[layer(l, kMlpNorm)], eps), spec);
    const Var gated = mul(tape, silu(tape, project(h2, layer(l, kGate))), project(h2, layer(l, kUp)));
    x = add(tape, x, project(compress_activation(tape, gated, spec), layer(l, kDown)));
  }
  const Var normed = rmsnorm(tape, x, params[layout::final_norm(config.n_layers)], eps);
  const Var logits = linear(tape, normed, params[layout::head(config.n_layers)]);
  return cross_entropy(tape, logits, targets);
}

// Puts every master tensor on the tape, as leaves or as constants.
template <typename T>
std::vector<Var> bind_params(Tape<T>& tape, const ModelParams<T>& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(trainable ? tape.leaf(t) : tape.constant(t));
  return vars;
}

// Loss without gradients.
template <typename T>
T evaluate_loss(const ModelParams<T>& params, const TokenBlock& block, const CompressionSpec& spec) {
  Tape<T> tape;
  const auto vars = bind_params(tape, params, false);
  return tape.value(forward_loss(tape, params.config, vars, block, spec))[0];
}

// Checkpoint: `<path>` holds little-endian float32 values of every tensor in
// param_layout order; `<path>.json` holds config, seed, spec and layout.
struct Checkpoint {
  ModelParams<float> params;
  std::uint64_t seed = 0;
  std::string spec;
};

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace compscale
