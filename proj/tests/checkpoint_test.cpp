#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdu/checkpoint.hpp"

using namespace tdu;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(bool late = false) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.dropout = 0.1;
  cfg.vocab_size = 12;
  cfg.max_positions = 6;
  cfg.feature_dim = 4;
  cfg.max_contexts = 3;
  cfg.ffn_mult = 2;
  cfg.late_fusion = late;
  return cfg;
}

fs::path scratch_dir() {
  fs::path dir = fs::temp_directory_path() / "tdu_checkpoint_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Splits a checkpoint file into its JSON manifest and the raw float body so
// tests can corrupt one part in isolation.
struct SplitFile {
  nlohmann::json manifest;
  std::string body;
};

SplitFile split_checkpoint(const fs::path& p) {
  const std::string bytes = slurp(p);
  REQUIRE(bytes.size() >= 4);
  const auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i]));
  };
  const std::uint32_t len = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
  SplitFile out;
  out.manifest = nlohmann::json::parse(bytes.substr(4, len));
  out.body = bytes.substr(4 + len);
  return out;
}

void write_checkpoint_parts(const fs::path& p, const nlohmann::json& manifest,
                            const std::string& body) {
  const std::string text = manifest.dump();
  std::string bytes;
  const auto len = static_cast<std::uint32_t>(text.size());
  bytes.push_back(static_cast<char>(len & 0xff));
  bytes.push_back(static_cast<char>((len >> 8) & 0xff));
  bytes.push_back(static_cast<char>((len >> 16) & 0xff));
  bytes.push_back(static_cast<char>((len >> 24) & 0xff));
  bytes += text;
  bytes += body;
  spit(p, bytes);
}

TrainerState advanced_trainer(ModelParams<float>& params, long long steps,
                              std::uint64_t seed) {
  TrainerState ts;
  ts.seed = seed;
  AdamWConfig cfg;
  Prng g = Prng::seeded(seed);
  for (long long step = 0; step < steps; ++step) {
    std::size_t i = 0;
    for_each_param(params, [&](const std::string&, Tensor<float>& t) {
      if (step == 0) ts.states.push_back(AdamWState<float>::for_param(t));
      Tensor<float> grad = Tensor<float>::zeros(t.shape);
      for (float& gval : grad.data) gval = static_cast<float>(g.uniform(-1, 1));
      adamw_step(t, grad, ts.states[i++], cfg);
    });
  }
  ts.step = steps;
  return ts;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves every byte") {
  const fs::path dir = scratch_dir();
  const ModelConfig cfg = small_config();
  ModelParams<float> params = init_params<float>(cfg, 17);

  SUBCASE("parameters only") {
    const fs::path a = dir / "a.ckpt", b = dir / "b.ckpt";
    save_checkpoint(a.string(), cfg, params);
    LoadedCheckpoint loaded = load_checkpoint(a.string());
    CHECK(loaded.config == cfg);
    CHECK(!loaded.trainer.has_value());
    for_each_param2(params, loaded.params,
                    [&](const std::string&, Tensor<float>& x, Tensor<float>& y) {
                      REQUIRE(x.shape == y.shape);
                      for (std::size_t i = 0; i < x.data.size(); ++i) {
                        CHECK(x.data[i] == y.data[i]);
                      }
                    });
    save_checkpoint(b.string(), loaded.config, loaded.params);
    CHECK(slurp(a) == slurp(b));
  }

  SUBCASE("with optimizer state") {
    const fs::path a = dir / "t_a.ckpt", b = dir / "t_b.ckpt";
    ModelParams<float> stepped = params;
    TrainerState ts = advanced_trainer(stepped, 3, 99);
    save_checkpoint(a.string(), cfg, stepped, &ts);
    LoadedCheckpoint loaded = load_checkpoint(a.string());
    REQUIRE(loaded.trainer.has_value());
    CHECK(loaded.trainer->step == 3);
    CHECK(loaded.trainer->seed == 99);
    REQUIRE(loaded.trainer->states.size() == ts.states.size());
    for (std::size_t i = 0; i < ts.states.size(); ++i) {
      CHECK(loaded.trainer->states[i].t == 3);
      for (std::size_t j = 0; j < ts.states[i].m.data.size(); ++j) {
        CHECK(loaded.trainer->states[i].m.data[j] == ts.states[i].m.data[j]);
        CHECK(loaded.trainer->states[i].v.data[j] == ts.states[i].v.data[j]);
      }
    }
    save_checkpoint(b.string(), loaded.config, loaded.params,
                    &*loaded.trainer);
    CHECK(slurp(a) == slurp(b));
  }

  SUBCASE("late-fusion topology round trips too") {
    const ModelConfig late = small_config(true);
    ModelParams<float> lp = init_params<float>(late, 18);
    const fs::path a = dir / "late.ckpt";
    save_checkpoint(a.string(), late, lp);
    LoadedCheckpoint loaded = load_checkpoint(a.string());
    CHECK(loaded.config.late_fusion);
    CHECK(loaded.params.fusion_fc.has_value());
  }
}

TEST_CASE("each corruption mode reports its own failure kind") {
  const fs::path dir = scratch_dir();
  const ModelConfig cfg = small_config();
  ModelParams<float> params = init_params<float>(cfg, 23);
  const fs::path good = dir / "good.ckpt";
  save_checkpoint(good.string(), cfg, params);

  auto expect_kind = [&](const fs::path& p, CheckpointError::Kind kind) {
    try {
      load_checkpoint(p.string());
      FAIL("expected a checkpoint error for ", p.string());
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == kind);
    }
  };

  SUBCASE("missing file") {
    expect_kind(dir / "no_such.ckpt", CheckpointError::Kind::io);
  }
  SUBCASE("foreign format version") {
    SplitFile parts = split_checkpoint(good);
    parts.manifest["format_version"] = 2;
    const fs::path bad = dir / "version.ckpt";
    write_checkpoint_parts(bad, parts.manifest, parts.body);
    expect_kind(bad, CheckpointError::Kind::version_mismatch);
  }
  SUBCASE("file cut off mid-tensor") {
    const std::string bytes = slurp(good);
    const fs::path bad = dir / "cut.ckpt";
    spit(bad, bytes.substr(0, bytes.size() - 5));
    expect_kind(bad, CheckpointError::Kind::truncated);
  }
  SUBCASE("header promising more than the file holds") {
    const fs::path bad = dir / "short.ckpt";
    spit(bad, std::string("\xff\x00\x00\x00tiny", 8));
    expect_kind(bad, CheckpointError::Kind::truncated);
  }
  SUBCASE("manifest shape disagrees with the config") {
    SplitFile parts = split_checkpoint(good);
    parts.manifest["params"][0]["shape"] = std::vector<int>{3, 3};
    const fs::path bad = dir / "shape.ckpt";
    write_checkpoint_parts(bad, parts.manifest, parts.body);
    expect_kind(bad, CheckpointError::Kind::shape_mismatch);
  }
  SUBCASE("manifest listing the wrong parameter count") {
    SplitFile parts = split_checkpoint(good);
    parts.manifest["params"].erase(0);
    const fs::path bad = dir / "count.ckpt";
    write_checkpoint_parts(bad, parts.manifest, parts.body);
    expect_kind(bad, CheckpointError::Kind::shape_mismatch);
  }
  SUBCASE("unparseable manifest") {
    SplitFile parts = split_checkpoint(good);
    const fs::path bad = dir / "garbled.ckpt";
    write_checkpoint_parts(bad, parts.manifest, parts.body);
    std::string bytes = slurp(bad);
    bytes[6] = '\x01';  // stomp inside the JSON text
    spit(bad, bytes);
    expect_kind(bad, CheckpointError::Kind::io);
  }
  SUBCASE("trailing bytes after the last tensor") {
    const fs::path bad = dir / "tail.ckpt";
    spit(bad, slurp(good) + "x");
    expect_kind(bad, CheckpointError::Kind::io);
  }
}

TEST_CASE("saving validates the optimizer state against the step counter") {
  const fs::path dir = scratch_dir();
  const ModelConfig cfg = small_config();
  ModelParams<float> params = init_params<float>(cfg, 29);
  TrainerState ts = advanced_trainer(params, 2, 1);

  SUBCASE("state count must match the parameter count") {
    TrainerState broken = ts;
    broken.states.pop_back();
    CHECK_THROWS_AS(
        save_checkpoint((dir / "x.ckpt").string(), cfg, params, &broken),
        ValueError);
  }
  SUBCASE("every moment tensor must be at the trainer step") {
    TrainerState broken = ts;
    broken.step = 5;
    CHECK_THROWS_AS(
        save_checkpoint((dir / "y.ckpt").string(), cfg, params, &broken),
        ValueError);
  }
  SUBCASE("moment shapes must match their parameters") {
    TrainerState broken = ts;
    broken.states[0].m = Tensor<float>::zeros({1, 1});
    CHECK_THROWS_AS(
        save_checkpoint((dir / "z.ckpt").string(), cfg, params, &broken),
        ShapeError);
  }
}
