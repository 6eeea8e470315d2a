#pragma once

// Staged SGD training, one image per step.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "brainseg/config.hpp"
#include "brainseg/errors.hpp"
#include "brainseg/model.hpp"

namespace brainseg {

struct StepRecord {
  int stage = 0;
  int step = 0;  // global, 0-based
  double learning_rate = 0.0;
  double grad_norm = 0.0;  // before clipping
  LossValues loss;
};

/// Thrown when a step produces a non-finite loss or gradient. The model is
/// left as it was before that step.
class TrainingDiverged : public RuntimeFailure {
 public:
  TrainingDiverged(const std::string& what, StepRecord snapshot) : RuntimeFailure(what), snapshot_(snapshot) {}
  const StepRecord& snapshot() const { return snapshot_; }

 private:
  StepRecord snapshot_;
};

/// Supplies the training example for a global step; may draw from `rng`
/// (e.g. to pick an image or an augmentation).
using ExampleSource = std::function<TrainingExample(int step, std::mt19937_64& rng)>;

/// Called after every completed step.
template <typename T>
using StepCallback = std::function<void(const StepRecord&, Model<T>&)>;

/// Runs the schedule's stages in order. Heads-only stages freeze every
/// "backbone." parameter; other stages train everything. Sampling and data
/// order draw from one generator seeded with `seed`.
template <typename T>
std::vector<StepRecord> train_two_stage(Model<T>& model, const ExampleSource& source, const Schedule& schedule,
                                        const LossConfig& loss, std::uint64_t seed,
                                        const StepCallback<T>& on_step = {});

/// Parameter-name prefixes frozen by a heads-only stage.
const std::vector<std::string>& heads_only_frozen_prefixes();

}  // namespace brainseg
