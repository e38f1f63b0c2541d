#pragma once

#include <cstdint>
#include <string>

#include "tdu/model.hpp"

namespace tdu {

struct GradCheckConfig {
  ModelConfig model;       // tiny dimensions by default
  std::uint64_t seed = 0;
  double step = 1e-5;      // central-difference step
  double tolerance = 1e-5;

  GradCheckConfig() {
    model.layers = 2;
    model.hidden = 16;
    model.heads = 2;
    model.dropout = 0.0;
    model.max_positions = 8;
    model.feature_dim = 4;
    model.max_contexts = 4;
    model.vocab_size = 0;  // filled from the built-in fixture vocabulary
  }
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  long long checked = 0;
  bool passed = false;
};

// Compares every analytic parameter gradient of a 64-bit model against
// central finite differences of the full loss (classification plus, for the
// early-fusion model, the pretraining objective). Relative error uses a
// 1e-3 scale floor so near-zero gradients do not blow up the ratio.
GradCheckReport grad_check(const GradCheckConfig& cfg);

}  // namespace tdu
