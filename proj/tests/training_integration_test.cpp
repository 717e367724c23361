// The desk-scale training protocol on tiny models, so that the ordering
// properties are exercised on every test run.

#include <iostream>

#include "gtest/gtest.h"
#include "training_sanity.hpp"

namespace compscale {
namespace {

SizePreset Tiny(const std::string& name, std::size_t d, std::size_t layers) {
  SizePreset p;
  p.name = name;
  p.model.vocab_size = 64;
  p.model.d_model = d;
  p.model.n_layers = layers;
  p.model.n_heads = 2;
  p.model.d_ff = 3 * d;
  p.model.seq_len = 32;
  p.peak_lr = 1e-2 * std::sqrt(32.0 / static_cast<double>(d));
  p.batch_size = 16;
  return p;
}

TEST(TrainingIntegration, ReducedScaleOrderings) {
  const std::vector<SizePreset> sizes{Tiny("s", 16, 1), Tiny("m", 32, 1), Tiny("l", 48, 2)};
  TrainConfig base;
  base.warmup_steps = 20;
  base.eval_tokens = 8192;
  base.seed = 2;
  const auto stream = synth_corpus(64, 2'000'000, 3);
  const auto out = sanity::Run(sizes, 20.0, base, stream, 1);
  std::cout << "N:";
  for (const auto& s : sizes) std::cout << " " << param_count(s.model).total;
  std::cout << "\n(i) " << out.converged.detail << "\n(ii) " << out.dense_monotone.detail << "\n(iii) "
            << out.bits_monotone.detail << "\n(iv) " << out.eff_order.detail << "\n"
            << out.seconds << " s\n";
  EXPECT_TRUE(out.failures.empty());
  EXPECT_TRUE(out.converged.pass) << out.converged.detail;
  EXPECT_TRUE(out.dense_monotone.pass) << out.dense_monotone.detail;
  EXPECT_TRUE(out.bits_monotone.pass) << out.bits_monotone.detail;
  EXPECT_TRUE(out.eff_order.pass) << out.eff_order.detail;
}

}  // namespace
}  // namespace compscale
