#include "tdu/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace tdu {

using nlohmann::json;

double accuracy(const ConfusionMatrix& cm) {
  if (cm.tp < 0 || cm.fp < 0 || cm.fn < 0 || cm.tn < 0) {
    throw ValueError("accuracy: negative count in confusion matrix");
  }
  const long long total = cm.total();
  if (total == 0) throw ValueError("accuracy: empty confusion matrix");
  return static_cast<double>(cm.tp + cm.tn) / static_cast<double>(total);
}

EvalResult evaluate(const ModelParams<float>& params, const ModelConfig& config,
                    const Vocab& vocab, const std::vector<Sample>& samples,
                    double threshold) {
  if (samples.empty()) throw ValueError("evaluate: no samples");
  if (threshold < 0.0 || threshold > 1.0) {
    throw ValueError("evaluate: threshold must be in [0, 1]");
  }
  Prng unused = Prng::seeded(0);
  EvalResult out;
  for (const Sample& s : samples) {
    Prediction<float> pred =
        forward(s, vocab, params, config, Mode::infer, unused);
    const bool positive = pred.p.data[1] >= static_cast<float>(threshold);
    if (s.label == 1) {
      (positive ? out.cm.tp : out.cm.fn) += 1;
    } else {
      (positive ? out.cm.fp : out.cm.tn) += 1;
    }
  }
  out.accuracy = accuracy(out.cm);
  return out;
}

SelectedModel select_final(const TrainLog& log) {
  if (log.records.empty()) throw ValueError("select_final: empty train log");
  const EvalRecord* best = &log.records.front();
  for (const EvalRecord& r : log.records) {
    if (r.val_accuracy > best->val_accuracy) best = &r;
  }
  return SelectedModel{best->step, best->val_accuracy, best->test_accuracy,
                       best->test_cm, best->checkpoint};
}

namespace {

json cm_json(const ConfusionMatrix& cm) {
  return json{{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
}

// Deterministic sample order: each epoch is an independent seeded shuffle, and
// position g in the global stream depends only on (seed, g, pool size).
class EpochStream {
 public:
  EpochStream(std::uint64_t seed, std::size_t pool_size)
      : seed_(seed), pool_(pool_size), epoch_(-1) {}

  std::size_t at(long long g) {
    const long long epoch = g / static_cast<long long>(pool_);
    if (epoch != epoch_) {
      order_.resize(pool_);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Prng rng = Prng::seeded(seed_).fork(
          1000000000ull + static_cast<std::uint64_t>(epoch));
      rng.shuffle(order_);
      epoch_ = epoch;
    }
    return order_[static_cast<std::size_t>(g % static_cast<long long>(pool_))];
  }

 private:
  std::uint64_t seed_;
  std::size_t pool_;
  long long epoch_;
  std::vector<std::size_t> order_;
};

Prng step_rng(std::uint64_t seed, long long step) {
  return Prng::seeded(seed).fork(2000000000ull + static_cast<std::uint64_t>(step));
}

std::string checkpoint_name(long long step) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.ckpt", step);
  return std::string(buf);
}

struct Optimizer {
  AdamWConfig cfg;
  std::vector<AdamWState<float>> states;

  void apply(ModelParams<float>& params, ModelP<Var<float>>& vars,
             Tape<float>& tape) {
    std::size_t i = 0;
    for_each_param2(params, vars,
                    [&](const std::string&, Tensor<float>& t, Var<float>& v) {
                      const Tensor<float>& g = tape.grad(v.id);
                      // Heads untouched by this loss still get a zero-gradient
                      // update so every state advances in lockstep.
                      if (g.data.empty()) {
                        adamw_step(t, zeros_like(t), states[i++], cfg);
                      } else {
                        adamw_step(t, g, states[i++], cfg);
                      }
                    });
  }
};

Optimizer make_optimizer(ModelParams<float>& params, const TrainConfig& cfg,
                         const TrainerState* resume) {
  Optimizer opt;
  opt.cfg = AdamWConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay};
  if (resume != nullptr) {
    opt.states = resume->states;
  } else {
    for_each_param(params, [&](const std::string&, Tensor<float>& t) {
      opt.states.push_back(AdamWState<float>::for_param(t));
    });
  }
  return opt;
}

double finite_loss_or_throw(float loss, long long step) {
  if (!std::isfinite(loss)) {
    throw NumericError("training diverged at step " + std::to_string(step) +
                       ": loss=" + std::to_string(loss));
  }
  return static_cast<double>(loss);
}

std::string scene_prefix(const std::string& id) {
  return id.substr(0, id.find(':'));
}

}  // namespace

std::string eval_record_json(const EvalRecord& r) {
  json j{{"step", r.step},
         {"train_loss", r.train_loss},
         {"val", json{{"accuracy", r.val_accuracy}, {"cm", cm_json(r.val_cm)}}},
         {"test",
          json{{"accuracy", r.test_accuracy}, {"cm", cm_json(r.test_cm)}}},
         {"checkpoint", r.checkpoint}};
  return j.dump();
}

std::string summary_json(const SelectedModel& s) {
  json j{{"best_step", s.step},
         {"val_acc", s.val_accuracy},
         {"test_acc", s.test_accuracy},
         {"confusion", cm_json(s.test_cm)}};
  return j.dump();
}

TrainResult train(ModelParams<float>& params, const ModelConfig& model_config,
                  const TrainConfig& config, const Vocab& vocab,
                  const DatasetSplit& split, const TrainOptions& opts) {
  config.validate();
  ModelConfig mc = model_config;
  mc.dropout = config.dropout;
  mc.validate();
  if (split.train.empty() || split.val.empty() || split.test.empty()) {
    throw ValueError("train: every split must be nonempty");
  }
  const long long start =
      (opts.resume != nullptr) ? opts.resume->step : 0;
  if (start >= config.steps) {
    throw ValueError("train: resume step " + std::to_string(start) +
                     " is not before total steps " +
                     std::to_string(config.steps));
  }
  Optimizer opt = make_optimizer(params, config, opts.resume);

  std::ofstream log_file;
  if (opts.write_files) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir + "/train_log.jsonl",
                  std::ios::trunc);
    if (!log_file) {
      throw ValueError("train: cannot write to " + opts.out_dir);
    }
  }

  TrainResult result;
  EpochStream stream(config.seed, split.train.size());
  double window_loss = 0.0;
  long long window_count = 0;

  for (long long step = start + 1; step <= config.steps; ++step) {
    Prng rng = step_rng(config.seed, step);
    Tape<float> tape;
    ModelP<Var<float>> vars = bind(tape, params);
    std::vector<Var<float>> logits;
    std::vector<int> labels;
    logits.reserve(static_cast<std::size_t>(config.batch));
    for (int b = 0; b < config.batch; ++b) {
      const long long g =
          (step - 1) * static_cast<long long>(config.batch) + b;
      const Sample& s = split.train[stream.at(g)];
      ForwardVars<float> fv =
          forward_vars(s, vocab, vars, mc, Mode::train, rng);
      logits.push_back(fv.logits);
      labels.push_back(s.label);
    }
    Var<float> loss = classification_loss(logits, labels);
    const double loss_value =
        finite_loss_or_throw(loss.val().data[0], step);
    tape.backward(loss.id);
    opt.apply(params, vars, tape);

    result.step_losses.push_back(loss_value);
    window_loss += loss_value;
    window_count += 1;

    if (step % config.eval_every == 0) {
      EvalRecord rec;
      rec.step = step;
      rec.train_loss = window_loss / static_cast<double>(window_count);
      window_loss = 0.0;
      window_count = 0;
      EvalResult val = evaluate(params, mc, vocab, split.val);
      EvalResult test = evaluate(params, mc, vocab, split.test);
      rec.val_accuracy = val.accuracy;
      rec.val_cm = val.cm;
      rec.test_accuracy = test.accuracy;
      rec.test_cm = test.cm;
      rec.checkpoint = checkpoint_name(step);
      if (opts.write_files) {
        TrainerState ts;
        ts.step = step;
        ts.seed = config.seed;
        ts.states = opt.states;
        save_checkpoint(opts.out_dir + "/" + rec.checkpoint, mc, params, &ts);
        log_file << eval_record_json(rec) << "\n";
        log_file.flush();
      }
      result.log.records.push_back(std::move(rec));
    }
  }

  result.best = select_final(result.log);
  if (opts.write_files) {
    std::ofstream summary(opts.out_dir + "/summary.json", std::ios::trunc);
    summary << summary_json(result.best) << "\n";
  }
  return result;
}

PretrainResult pretrain(ModelParams<float>& params,
                        const ModelConfig& model_config,
                        const TrainConfig& config, const Vocab& vocab,
                        const std::vector<Sample>& samples,
                        const TrainOptions& opts) {
  config.validate();
  ModelConfig mc = model_config;
  mc.dropout = config.dropout;
  mc.validate();
  if (samples.empty()) throw ValueError("pretrain: no samples");
  bool multi_scene = false;
  const std::string first_scene = scene_prefix(samples.front().id);
  for (const Sample& s : samples) {
    if (scene_prefix(s.id) != first_scene) {
      multi_scene = true;
      break;
    }
  }
  if (!multi_scene) {
    throw ValueError("pretrain: instruction swapping needs at least two scenes");
  }
  Optimizer opt = make_optimizer(params, config, nullptr);
  EpochStream stream(config.seed, samples.size());
  PretrainResult result;

  for (long long step = 1; step <= config.steps; ++step) {
    Prng rng = step_rng(config.seed, step);
    std::vector<PretrainItem> batch;
    batch.reserve(static_cast<std::size_t>(config.batch));
    for (int b = 0; b < config.batch; ++b) {
      const long long g =
          (step - 1) * static_cast<long long>(config.batch) + b;
      const Sample& s = samples[stream.at(g)];
      PretrainItem item;
      item.sample = &s;
      item.instruction = s.instruction;
      if (rng.bernoulli(0.5)) {
        const std::string own = scene_prefix(s.id);
        for (int tries = 0;; ++tries) {
          const Sample& other =
              samples[static_cast<std::size_t>(rng.next_below(samples.size()))];
          if (scene_prefix(other.id) != own) {
            item.instruction = other.instruction;
            item.itm_label = 1;
            break;
          }
          if (tries > 1000) {
            throw ValueError("pretrain: could not find a different scene");
          }
        }
      }
      batch.push_back(std::move(item));
    }
    Tape<float> tape;
    ModelP<Var<float>> vars = bind(tape, params);
    Var<float> loss =
        pretrain_loss(batch, vocab, vars, mc, Mode::train, rng);
    result.step_losses.push_back(
        finite_loss_or_throw(loss.val().data[0], step));
    tape.backward(loss.id);
    opt.apply(params, vars, tape);
  }

  if (opts.write_files) {
    std::filesystem::create_directories(opts.out_dir);
    result.checkpoint = opts.out_dir + "/pretrain.ckpt";
    save_checkpoint(result.checkpoint, mc, params, nullptr);
  }
  return result;
}

}  // namespace tdu
