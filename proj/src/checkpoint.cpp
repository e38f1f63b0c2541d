#include "tdu/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <utility>

#include <json.hpp>

namespace tdu {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json config_to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"hidden", c.hidden},
              {"heads", c.heads},
              {"dropout", c.dropout},
              {"vocab_size", c.vocab_size},
              {"max_positions", c.max_positions},
              {"feature_dim", c.feature_dim},
              {"max_contexts", c.max_contexts},
              {"ffn_mult", c.ffn_mult},
              {"late_fusion", c.late_fusion}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.max_contexts = j.at("max_contexts").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.late_fusion = j.at("late_fusion").get<bool>();
  return c;
}

void write_exact(std::ostream& out, const char* src, std::size_t n,
                 const std::string& path) {
  out.write(src, static_cast<std::streamsize>(n));
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: write failed for " + path);
  }
}

void write_floats(std::ostream& out, const std::vector<float>& data,
                  const std::string& path) {
  write_exact(out, reinterpret_cast<const char*>(data.data()),
              data.size() * sizeof(float), path);
}

void read_exact(std::istream& in, char* dst, std::size_t n,
                const std::string& path) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw CheckpointError(CheckpointError::Kind::truncated,
                          "checkpoint: " + path + " ends mid-record");
  }
}

void read_floats(std::istream& in, std::vector<float>& data,
                 const std::string& path) {
  read_exact(in, reinterpret_cast<char*>(data.data()),
             data.size() * sizeof(float), path);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ModelParams<float>& params,
                     const TrainerState* trainer) {
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = config_to_json(config);
  json names = json::array();
  std::vector<const Tensor<float>*> order;
  auto& mut = const_cast<ModelParams<float>&>(params);
  for_each_param(mut, [&](const std::string& name, Tensor<float>& t) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape;
    names.push_back(std::move(entry));
    order.push_back(&t);
  });
  manifest["params"] = std::move(names);
  if (trainer != nullptr) {
    if (trainer->states.size() != order.size()) {
      throw ValueError("save_checkpoint: " + std::to_string(trainer->states.size()) +
                       " optimizer states for " + std::to_string(order.size()) +
                       " parameters");
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
      const AdamWState<float>& s = trainer->states[i];
      if (!s.m.same_shape(*order[i]) || !s.v.same_shape(*order[i])) {
        throw ShapeError("save_checkpoint: optimizer state shape " +
                         shape_str(s.m.shape) + " does not match parameter " +
                         shape_str(order[i]->shape));
      }
      if (s.t != trainer->step) {
        throw ValueError("save_checkpoint: optimizer state at t=" +
                         std::to_string(s.t) + " but trainer step is " +
                         std::to_string(trainer->step));
      }
    }
    manifest["trainer"] = json{{"step", trainer->step}, {"seed", trainer->seed}};
  } else {
    manifest["trainer"] = nullptr;
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: cannot open " + path + " for writing");
  }
  const std::string text = manifest.dump();
  const auto len = static_cast<std::uint32_t>(text.size());
  char hdr[4] = {static_cast<char>(len & 0xff),
                 static_cast<char>((len >> 8) & 0xff),
                 static_cast<char>((len >> 16) & 0xff),
                 static_cast<char>((len >> 24) & 0xff)};
  write_exact(out, hdr, 4, path);
  write_exact(out, text.data(), text.size(), path);
  for (const Tensor<float>* t : order) write_floats(out, t->data, path);
  if (trainer != nullptr) {
    for (std::size_t i = 0; i < order.size(); ++i) {
      write_floats(out, trainer->states[i].m.data, path);
      write_floats(out, trainer->states[i].v.data, path);
    }
  }
  out.flush();
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: flush failed for " + path);
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: cannot open " + path);
  }
  char hdr[4];
  read_exact(in, hdr, 4, path);
  const std::uint32_t len = static_cast<std::uint32_t>(static_cast<unsigned char>(hdr[0])) |
                            (static_cast<std::uint32_t>(static_cast<unsigned char>(hdr[1])) << 8) |
                            (static_cast<std::uint32_t>(static_cast<unsigned char>(hdr[2])) << 16) |
                            (static_cast<std::uint32_t>(static_cast<unsigned char>(hdr[3])) << 24);
  std::string text(len, '\0');
  read_exact(in, text.data(), len, path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: corrupt manifest in " + path + ": " +
                              e.what());
  }
  LoadedCheckpoint out;
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw CheckpointError(CheckpointError::Kind::version_mismatch,
                            "checkpoint: " + path + " has format version " +
                                std::to_string(version) + ", expected " +
                                std::to_string(kFormatVersion));
    }
    out.config = config_from_json(manifest.at("config"));
    out.params = make_params<float>(out.config);
    std::vector<Tensor<float>*> order;
    std::vector<std::string> expect_names;
    for_each_param(out.params, [&](const std::string& name, Tensor<float>& t) {
      order.push_back(&t);
      expect_names.push_back(name);
    });
    const json& listed = manifest.at("params");
    if (listed.size() != order.size()) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "checkpoint: manifest lists " +
                                std::to_string(listed.size()) +
                                " parameters, config implies " +
                                std::to_string(order.size()));
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
      const std::string name = listed[i].at("name").get<std::string>();
      const Shape shape = listed[i].at("shape").get<Shape>();
      if (name != expect_names[i] || shape != order[i]->shape) {
        throw CheckpointError(
            CheckpointError::Kind::shape_mismatch,
            "checkpoint: parameter " + std::to_string(i) + " is " + name + " " +
                shape_str(shape) + ", expected " + expect_names[i] + " " +
                shape_str(order[i]->shape));
      }
    }
    for (Tensor<float>* t : order) read_floats(in, t->data, path);
    const json& trainer = manifest.at("trainer");
    if (!trainer.is_null()) {
      TrainerState ts;
      ts.step = trainer.at("step").get<long long>();
      ts.seed = trainer.at("seed").get<std::uint64_t>();
      ts.states.reserve(order.size());
      for (Tensor<float>* t : order) {
        AdamWState<float> s = AdamWState<float>::for_param(*t);
        s.t = ts.step;
        ts.states.push_back(std::move(s));
      }
      for (std::size_t i = 0; i < order.size(); ++i) {
        read_floats(in, ts.states[i].m.data, path);
        read_floats(in, ts.states[i].v.data, path);
      }
      out.trainer = std::move(ts);
    }
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: malformed manifest in " + path + ": " +
                              e.what());
  }
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0) {
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: trailing bytes in " + path);
  }
  return out;
}

}  // namespace tdu
