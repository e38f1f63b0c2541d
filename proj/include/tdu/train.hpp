#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdu/checkpoint.hpp"
#include "tdu/model.hpp"

namespace tdu {

struct TrainConfig {
  double lr = 8e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;
  long long steps = 20000;
  int batch = 8;
  double dropout = 0.1;
  long long eval_every = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr <= 0 || beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1 ||
        weight_decay < 0 || steps <= 0 || batch <= 0 || eval_every <= 0 ||
        dropout < 0 || dropout >= 1) {
      throw ValueError("TrainConfig: hyperparameters out of range");
    }
    if (eval_every > steps) {
      throw ValueError("TrainConfig: eval_every " + std::to_string(eval_every) +
                       " exceeds steps " + std::to_string(steps));
    }
  }
};

struct ConfusionMatrix {
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;
  long long tn = 0;

  long long total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

// (TP + TN) / total; zero total is an error.
double accuracy(const ConfusionMatrix& cm);

struct EvalResult {
  ConfusionMatrix cm;
  double accuracy = 0.0;
};

// Deterministic single-pass evaluation in infer mode: a sample counts as
// predicted-positive iff p(correct) >= threshold.
EvalResult evaluate(const ModelParams<float>& params, const ModelConfig& config,
                    const Vocab& vocab, const std::vector<Sample>& samples,
                    double threshold = 0.5);

struct EvalRecord {
  long long step = 0;
  double train_loss = 0.0;  // mean batch loss since the previous record
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  ConfusionMatrix val_cm;
  ConfusionMatrix test_cm;
  std::string checkpoint;  // file name relative to the output directory
};

struct TrainLog {
  std::vector<EvalRecord> records;
};

struct SelectedModel {
  long long step = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  ConfusionMatrix test_cm;
  std::string checkpoint;
};

// The record with maximal validation accuracy; ties resolve to the earliest.
SelectedModel select_final(const TrainLog& log);

std::string eval_record_json(const EvalRecord& r);
std::string summary_json(const SelectedModel& s);

struct TrainOptions {
  std::string out_dir;
  bool write_files = true;            // checkpoints, train_log.jsonl, summary.json
  const TrainerState* resume = nullptr;
};

struct TrainResult {
  TrainLog log;
  SelectedModel best;
  std::vector<double> step_losses;  // batch loss per executed step
};

// Fine-tuning loop: seeded shuffling with epoch wrap-around, one batch per
// step, evaluation plus checkpoint every eval_every steps. Fully determined
// by (params, configs, data, seed); a non-finite loss aborts with the step
// number in the message.
TrainResult train(ModelParams<float>& params, const ModelConfig& model_config,
                  const TrainConfig& config, const Vocab& vocab,
                  const DatasetSplit& split, const TrainOptions& opts);

struct PretrainResult {
  std::vector<double> step_losses;
  std::string checkpoint;  // written when opts.write_files
};

// Masked-token + instruction-matching pretraining over the sample pool; the
// resulting checkpoint carries parameters only (fine-tuning restarts AdamW).
PretrainResult pretrain(ModelParams<float>& params,
                        const ModelConfig& model_config,
                        const TrainConfig& config, const Vocab& vocab,
                        const std::vector<Sample>& samples,
                        const TrainOptions& opts);

}  // namespace tdu
