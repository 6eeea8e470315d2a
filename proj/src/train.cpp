#include "brainseg/train.hpp"

#include <cmath>
#include <sstream>

namespace brainseg {

const std::vector<std::string>& heads_only_frozen_prefixes() {
  static const std::vector<std::string> prefixes{"backbone."};
  return prefixes;
}

namespace {

std::string describe(const StepRecord& r) {
  std::ostringstream os;
  os << "stage " << r.stage << " step " << r.step << ": rpn_cls=" << r.loss.rpn_cls << " rpn_reg=" << r.loss.rpn_reg
     << " cls=" << r.loss.cls << " reg=" << r.loss.reg << " mask=" << r.loss.mask << " total=" << r.loss.total
     << " grad_norm=" << r.grad_norm;
  return os.str();
}

}  // namespace

template <typename T>
std::vector<StepRecord> train_two_stage(Model<T>& model, const ExampleSource& source, const Schedule& schedule,
                                        const LossConfig& loss, std::uint64_t seed, const StepCallback<T>& on_step) {
  schedule.validate();
  loss.validate();
  std::mt19937_64 rng(seed);
  std::vector<StepRecord> trace;
  auto& params = model.params();
  int step = 0;
  for (std::size_t s = 0; s < schedule.stages.size(); ++s) {
    const TrainStage& stage = schedule.stages[s];
    params.set_trainable(stage.heads_only ? heads_only_frozen_prefixes() : std::vector<std::string>{});
    const auto trainable = params.trainable();
    for (int it = 0; it < stage.iterations; ++it, ++step) {
      const TrainingExample example = source(step, rng);
      TrainingLoss<T> l = model.training_loss(example, loss, rng);

      StepRecord rec;
      rec.stage = static_cast<int>(s);
      rec.step = step;
      rec.learning_rate = stage.learning_rate;
      rec.loss = l.values;
      if (!std::isfinite(rec.loss.total)) throw TrainingDiverged("non-finite loss at " + describe(rec), rec);

      params.zero_grad();
      nn::backward(l.total);
      // Branches the example never reached (e.g. the mask head when no RoI is
      // positive) get an explicit zero gradient.
      for (auto* p : trainable) {
        if (!p->value.has_grad()) p->value.grad_buffer();
      }
      rec.grad_norm = nn::grad_norm(trainable);
      if (!std::isfinite(rec.grad_norm)) {
        params.zero_grad();
        throw TrainingDiverged("non-finite gradient at " + describe(rec), rec);
      }
      if (schedule.clip_norm > 0) nn::clip_grad_norm(trainable, schedule.clip_norm);
      nn::sgd_step(trainable, stage.learning_rate, schedule.momentum);
      trace.push_back(rec);
      if (on_step) on_step(rec, model);
    }
  }
  params.set_trainable({});
  return trace;
}

template std::vector<StepRecord> train_two_stage<float>(Model<float>&, const ExampleSource&, const Schedule&,
                                                        const LossConfig&, std::uint64_t, const StepCallback<float>&);
template std::vector<StepRecord> train_two_stage<double>(Model<double>&, const ExampleSource&, const Schedule&,
                                                         const LossConfig&, std::uint64_t,
                                                         const StepCallback<double>&);

}  // namespace brainseg
