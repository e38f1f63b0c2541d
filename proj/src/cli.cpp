#include "tdu/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tdu/checkpoint.hpp"
#include "tdu/data.hpp"
#include "tdu/gradcheck.hpp"
#include "tdu/model.hpp"
#include "tdu/train.hpp"

namespace tdu {

using nlohmann::json;

namespace {

// --config names a flat JSON object keyed by long flag names. Entries are
// spliced into the argument list for flags absent from the command line, so
// precedence is command-line flag > config file entry > built-in default and
// the usual type conversion, validation, and required checks still apply.
std::vector<std::string> expand_config_args(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(args[i].find('=') + 1);
      break;
    }
  }
  if (path.empty()) return args;

  std::ifstream in(path);
  if (!in) throw ValueError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValueError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValueError("config must be a JSON object");

  auto given = [&args](const std::string& flag) {
    for (const std::string& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "config") throw ValueError("config cannot name another config");
    const std::string flag = "--" + key;
    if (given(flag)) continue;
    if (value.is_boolean()) {
      args.push_back(flag + (value.get<bool>() ? "=true" : "=false"));
    } else if (value.is_string()) {
      args.push_back(flag);
      args.push_back(value.get<std::string>());
    } else {
      args.push_back(flag);
      args.push_back(value.dump());
    }
  }
  return args;
}

std::uint64_t env_seed() {
  const char* s = std::getenv("TDU_SEED");
  if (s == nullptr || *s == '\0') return 0;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ValueError(std::string("TDU_SEED is not an unsigned integer: ") + s);
  }
}

struct ModelFlags {
  int layers = 2;
  int hidden = 768;
  int heads = 12;
  double dropout = 0.1;
  int max_positions = 32;
  int max_contexts = 16;
  int ffn_mult = 4;
  bool late_fusion = false;
};

struct TrainFlags {
  double lr = 8e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;
  long long steps = 20000;
  int batch = 8;
  long long eval_every = 2000;
  std::uint64_t seed = 0;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--layers", f.layers, "Transformer layers");
  cmd->add_option("--hidden", f.hidden, "Hidden width");
  cmd->add_option("--heads", f.heads, "Attention heads");
  cmd->add_option("--dropout", f.dropout, "Dropout probability");
  cmd->add_option("--max-positions", f.max_positions, "Instruction length cap");
  cmd->add_option("--max-contexts", f.max_contexts, "Context region cap");
  cmd->add_option("--ffn-mult", f.ffn_mult, "Feed-forward width multiplier");
  cmd->add_flag("--late-fusion", f.late_fusion,
                "Fuse text+contexts and the target in separate stacks");
}

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--lr", f.lr, "Learning rate");
  cmd->add_option("--beta1", f.beta1, "AdamW beta1");
  cmd->add_option("--beta2", f.beta2, "AdamW beta2");
  cmd->add_option("--weight-decay", f.weight_decay, "Decoupled weight decay");
  cmd->add_option("--steps", f.steps, "Total optimization steps");
  cmd->add_option("--batch", f.batch, "Samples per step");
  cmd->add_option("--eval-every", f.eval_every, "Evaluation/checkpoint cadence");
  cmd->add_option("--seed", f.seed, "Random seed (default: TDU_SEED or 0)");
}

void enable_json_config(CLI::App* cmd) {
  cmd->add_option("--config",
                  "JSON object of flag defaults; explicit flags win");
}

struct LoadedData {
  DatasetSplit split;
  Vocab vocab;
  int feature_dim = 0;
};

int feature_dim_of(const std::vector<Sample>& samples, int current,
                   const std::string& which) {
  for (const Sample& s : samples) {
    const int d = static_cast<int>(s.target.feat.size());
    if (current == 0) current = d;
    if (d != current) {
      throw ValueError(which + ": sample " + s.id + " has feature dim " +
                       std::to_string(d) + ", expected " +
                       std::to_string(current));
    }
  }
  return current;
}

LoadedData load_data_dir(const std::string& dir) {
  LoadedData out;
  out.split.train = load_samples(dir + "/train.jsonl");
  out.split.val = load_samples(dir + "/val.jsonl");
  out.split.test = load_samples(dir + "/test.jsonl");
  out.vocab = load_vocab(dir + "/vocab.txt");
  out.feature_dim = feature_dim_of(out.split.train, 0, "train");
  out.feature_dim = feature_dim_of(out.split.val, out.feature_dim, "val");
  out.feature_dim = feature_dim_of(out.split.test, out.feature_dim, "test");
  if (out.feature_dim == 0) throw ValueError(dir + ": no samples");
  return out;
}

ModelConfig assemble_config(const ModelFlags& mf, const LoadedData& data) {
  ModelConfig mc;
  mc.layers = mf.layers;
  mc.hidden = mf.hidden;
  mc.heads = mf.heads;
  mc.dropout = mf.dropout;
  mc.vocab_size = data.vocab.size();
  mc.max_positions = mf.max_positions;
  mc.feature_dim = data.feature_dim;
  mc.max_contexts = mf.max_contexts;
  mc.ffn_mult = mf.ffn_mult;
  mc.late_fusion = mf.late_fusion;
  mc.validate();
  return mc;
}

TrainConfig assemble_train_config(const TrainFlags& tf, double dropout) {
  TrainConfig tc;
  tc.lr = tf.lr;
  tc.beta1 = tf.beta1;
  tc.beta2 = tf.beta2;
  tc.weight_decay = tf.weight_decay;
  tc.steps = tf.steps;
  tc.batch = tf.batch;
  tc.dropout = dropout;
  tc.eval_every = tf.eval_every;
  tc.seed = tf.seed;
  tc.validate();
  return tc;
}

void check_data_compat(const ModelConfig& mc, const LoadedData& data,
                       const std::string& origin) {
  if (mc.vocab_size != data.vocab.size()) {
    throw ValueError(origin + ": checkpoint vocab size " +
                     std::to_string(mc.vocab_size) + " vs data vocab " +
                     std::to_string(data.vocab.size()));
  }
  if (mc.feature_dim != data.feature_dim) {
    throw ValueError(origin + ": checkpoint feature dim " +
                     std::to_string(mc.feature_dim) + " vs data " +
                     std::to_string(data.feature_dim));
  }
}

int run_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& init_ckpt, const std::string& resume_ckpt,
              const ModelFlags& mf, const TrainFlags& tf, bool halve) {
  LoadedData data = load_data_dir(data_dir);
  if (halve) {
    for (std::vector<Sample>* part :
         {&data.split.train, &data.split.val, &data.split.test}) {
      for (Sample& s : *part) s = halve_contexts(s);
    }
  }
  TrainConfig tc = assemble_train_config(tf, mf.dropout);
  ModelConfig mc;
  ModelParams<float> params;
  std::optional<TrainerState> resume_state;
  if (!resume_ckpt.empty()) {
    LoadedCheckpoint lc = load_checkpoint(resume_ckpt);
    if (!lc.trainer.has_value()) {
      throw ValueError("--resume checkpoint has no optimizer state: " +
                       resume_ckpt);
    }
    mc = lc.config;
    check_data_compat(mc, data, "--resume");
    params = std::move(lc.params);
    resume_state = std::move(*lc.trainer);
    if (tc.seed != resume_state->seed) {
      std::cerr << "note: using seed " << resume_state->seed
                << " stored in the resume checkpoint\n";
      tc.seed = resume_state->seed;
    }
  } else if (!init_ckpt.empty()) {
    LoadedCheckpoint lc = load_checkpoint(init_ckpt);
    mc = lc.config;
    mc.late_fusion = mf.late_fusion;
    if (mc.late_fusion && !lc.config.late_fusion) {
      throw ValueError("--init: pretrained checkpoint is early-fusion; "
                       "late fusion cannot reuse it");
    }
    check_data_compat(mc, data, "--init");
    params = std::move(lc.params);
  } else {
    mc = assemble_config(mf, data);
    params = init_params<float>(mc, tc.seed);
  }

  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.resume = resume_state.has_value() ? &*resume_state : nullptr;
  TrainResult result = train(params, mc, tc, data.vocab, data.split, opts);
  std::cerr << "trained " << tc.steps << " steps; best step "
            << result.best.step << " val acc " << result.best.val_accuracy
            << "\n";
  std::cout << summary_json(result.best) << "\n";
  return 0;
}

json prediction_json(const Sample& s, const Prediction<float>& p) {
  return json{{"id", s.id},
              {"p", {p.p.data[0], p.p.data[1]}},
              {"label", s.label}};
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  std::uint64_t fallback_seed = 0;
  try {
    fallback_seed = env_seed();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"Target-dependent region/instruction matching pipeline"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic scenes");
  std::string gen_out;
  SynthConfig synth;
  synth.seed = fallback_seed;
  gen->add_option("--out", gen_out, "Output scenes JSONL")->required();
  gen->add_option("--scenes", synth.n_scenes, "Number of scenes");
  gen->add_option("--objects", synth.objects_per_scene, "Objects per scene");
  gen->add_option("--noise-sigma", synth.noise_sigma, "Feature noise sigma");
  gen->add_option("--seed", synth.seed, "Random seed (default: TDU_SEED or 0)");
  enable_json_config(gen);

  // preprocess
  auto* pre = app.add_subcommand("preprocess",
                                 "Label, balance, and split scenes into samples");
  std::string pre_scenes;
  std::string pre_out;
  PreprocessConfig prep;
  prep.seed = fallback_seed;
  int vocab_size = 200;
  pre->add_option("--scenes", pre_scenes, "Input scenes JSONL")->required();
  pre->add_option("--out", pre_out, "Output directory")->required();
  pre->add_option("--train-frac", prep.train_frac, "Training scene fraction");
  pre->add_option("--val-frac", prep.val_frac, "Validation scene fraction");
  pre->add_option("--train-cap", prep.train_cap, "Max train samples (0 = all)");
  pre->add_option("--val-cap", prep.val_cap, "Max val samples (0 = all)");
  pre->add_option("--test-cap", prep.test_cap, "Max test samples (0 = all)");
  pre->add_option("--vocab-size", vocab_size, "Vocabulary size target");
  pre->add_option("--seed", prep.seed, "Random seed (default: TDU_SEED or 0)");
  enable_json_config(pre);

  // pretrain
  auto* pt = app.add_subcommand("pretrain",
                                "Masked-token + matching pretraining");
  std::string pt_data;
  std::string pt_out;
  ModelFlags pt_mf;
  TrainFlags pt_tf;
  pt_tf.seed = fallback_seed;
  pt->add_option("--data", pt_data, "Preprocessed data directory")->required();
  pt->add_option("--out", pt_out, "Output directory")->required();
  add_model_flags(pt, pt_mf);
  add_train_flags(pt, pt_tf);
  enable_json_config(pt);

  // train
  auto* tr = app.add_subcommand("train", "Fine-tune and select the best model");
  std::string tr_data;
  std::string tr_out;
  std::string tr_init;
  std::string tr_resume;
  ModelFlags tr_mf;
  TrainFlags tr_tf;
  tr_tf.seed = fallback_seed;
  tr->add_option("--data", tr_data, "Preprocessed data directory")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--init", tr_init, "Start from this checkpoint's parameters");
  tr->add_option("--resume", tr_resume, "Resume an interrupted run");
  add_model_flags(tr, tr_mf);
  add_train_flags(tr, tr_tf);
  enable_json_config(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on samples");
  std::string ev_samples;
  std::string ev_ckpt;
  std::string ev_vocab;
  double ev_threshold = 0.5;
  ev->add_option("--samples", ev_samples, "Samples JSONL")->required();
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--vocab", ev_vocab, "Vocabulary file")->required();
  ev->add_option("--threshold", ev_threshold, "Positive-decision threshold");
  enable_json_config(ev);

  // predict
  auto* pd = app.add_subcommand("predict", "Per-sample probabilities");
  std::string pd_samples;
  std::string pd_ckpt;
  std::string pd_vocab;
  pd->add_option("--samples", pd_samples, "Samples JSONL")->required();
  pd->add_option("--ckpt", pd_ckpt, "Checkpoint path")->required();
  pd->add_option("--vocab", pd_vocab, "Vocabulary file")->required();
  enable_json_config(pd);

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run an ablation variant");
  std::string ab_variant;
  std::string ab_data;
  std::string ab_out;
  ModelFlags ab_mf;
  TrainFlags ab_tf;
  ab_tf.seed = fallback_seed;
  ab->add_option("--variant", ab_variant, "late-fusion | few-contexts | no-pretrain")
      ->required()
      ->check(CLI::IsMember({"late-fusion", "few-contexts", "no-pretrain"}));
  ab->add_option("--data", ab_data, "Preprocessed data directory")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  add_model_flags(ab, ab_mf);
  add_train_flags(ab, ab_tf);
  enable_json_config(ab);

  // grad-check
  auto* gc = app.add_subcommand("grad-check",
                                "Finite-difference audit of all gradients");
  GradCheckConfig gcc;
  gcc.seed = fallback_seed;
  bool gc_late = false;
  gc->add_option("--layers", gcc.model.layers, "Transformer layers");
  gc->add_option("--hidden", gcc.model.hidden, "Hidden width");
  gc->add_option("--heads", gcc.model.heads, "Attention heads");
  gc->add_option("--max-positions", gcc.model.max_positions, "Instruction cap");
  gc->add_option("--feature-dim", gcc.model.feature_dim, "Region feature dim");
  gc->add_flag("--late-fusion", gc_late, "Check the late-fusion variant");
  gc->add_option("--step", gcc.step, "Finite-difference step");
  gc->add_option("--tolerance", gcc.tolerance, "Max relative error to pass");
  gc->add_option("--seed", gcc.seed, "Random seed (default: TDU_SEED or 0)");
  enable_json_config(gc);

  try {
    std::vector<std::string> args = expand_config_args(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
        std::vector<Scene> scenes = generate_scenes(synth);
      save_scenes(scenes, gen_out);
      std::cerr << "wrote " << scenes.size() << " scenes to " << gen_out << "\n";
      return 0;
    }

    if (pre->parsed()) {
        std::vector<Scene> scenes = load_scenes(pre_scenes);
      DatasetSplit split = preprocess_scenes(scenes, prep);
      std::vector<std::string> corpus;
      for (const Sample& s : split.train) corpus.push_back(s.instruction);
      Vocab vocab = build_vocab(corpus, vocab_size);
      std::filesystem::create_directories(pre_out);
      save_samples(split.train, pre_out + "/train.jsonl");
      save_samples(split.val, pre_out + "/val.jsonl");
      save_samples(split.test, pre_out + "/test.jsonl");
      save_vocab(vocab, pre_out + "/vocab.txt");
      std::cerr << "train/val/test = " << split.train.size() << "/"
                << split.val.size() << "/" << split.test.size() << ", vocab "
                << vocab.size() << " -> " << pre_out << "\n";
      return 0;
    }

    if (pt->parsed()) {
      if (pt_mf.late_fusion) {
        throw ValueError("pretrain: only the early-fusion model pretrains");
      }
      LoadedData data = load_data_dir(pt_data);
      TrainConfig tc = assemble_train_config(pt_tf, pt_mf.dropout);
      ModelConfig mc = assemble_config(pt_mf, data);
      ModelParams<float> params = init_params<float>(mc, tc.seed);
      TrainOptions opts;
      opts.out_dir = pt_out;
      PretrainResult result =
          pretrain(params, mc, tc, data.vocab, data.split.train, opts);
      const std::size_t n = result.step_losses.size();
      const std::size_t tail = std::min<std::size_t>(n, 100);
      const double recent =
          std::accumulate(result.step_losses.end() - static_cast<long>(tail),
                          result.step_losses.end(), 0.0) /
          static_cast<double>(tail);
      std::cerr << "pretrained " << n << " steps; mean loss over last " << tail
                << " steps " << recent << "; wrote " << result.checkpoint
                << "\n";
      return 0;
    }

    if (tr->parsed()) {
      if (!tr_init.empty() && !tr_resume.empty()) {
        throw ValueError("train: --init and --resume are mutually exclusive");
      }
      return run_train(tr_data, tr_out, tr_init, tr_resume, tr_mf, tr_tf,
                       /*halve=*/false);
    }

    if (ev->parsed()) {
      LoadedCheckpoint lc = load_checkpoint(ev_ckpt);
      Vocab vocab = load_vocab(ev_vocab);
      std::vector<Sample> samples = load_samples(ev_samples);
      if (vocab.size() != lc.config.vocab_size) {
        throw ValueError("eval: vocab size " + std::to_string(vocab.size()) +
                         " does not match checkpoint " +
                         std::to_string(lc.config.vocab_size));
      }
      EvalResult r = evaluate(lc.params, lc.config, vocab, samples, ev_threshold);
      json out{{"TP", r.cm.tp},
               {"FP", r.cm.fp},
               {"FN", r.cm.fn},
               {"TN", r.cm.tn},
               {"accuracy", r.accuracy}};
      std::cout << out.dump() << "\n";
      return 0;
    }

    if (pd->parsed()) {
      LoadedCheckpoint lc = load_checkpoint(pd_ckpt);
      Vocab vocab = load_vocab(pd_vocab);
      std::vector<Sample> samples = load_samples(pd_samples);
      if (vocab.size() != lc.config.vocab_size) {
        throw ValueError("predict: vocab size " + std::to_string(vocab.size()) +
                         " does not match checkpoint " +
                         std::to_string(lc.config.vocab_size));
      }
      Prng unused = Prng::seeded(0);
      for (const Sample& s : samples) {
        Prediction<float> p =
            forward(s, vocab, lc.params, lc.config, Mode::infer, unused);
        std::cout << prediction_json(s, p).dump() << "\n";
      }
      return 0;
    }

    if (ab->parsed()) {
      ModelFlags mf = ab_mf;
      bool halve = false;
      if (ab_variant == "late-fusion") {
        mf.late_fusion = true;
      } else if (ab_variant == "few-contexts") {
        halve = true;
      }
      // "no-pretrain" is a from-scratch run of the standard model.
      return run_train(ab_data, ab_out, "", "", mf, ab_tf, halve);
    }

    if (gc->parsed()) {
      gcc.model.late_fusion = gc_late;
      GradCheckReport report = grad_check(gcc);
      std::cerr << "checked " << report.checked
                << " parameter gradients; max relative error "
                << report.max_rel_err << " at " << report.worst_param
                << " (tolerance " << gcc.tolerance << ")\n";
      return report.passed ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace tdu
