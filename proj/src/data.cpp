#include "tdu/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace tdu {

using nlohmann::json;

double iou(const Box& a, const Box& b) {
  a.validate();
  b.validate();
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

std::vector<LabeledCandidate> label_candidates(const std::vector<Region>& detections,
                                               const Box& gt) {
  std::vector<LabeledCandidate> out;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const double beta = iou(detections[i].bbox, gt);
    if (beta > 0.7) {
      out.push_back({static_cast<int>(i), 1});
    } else if (beta < 0.3) {
      out.push_back({static_cast<int>(i), 0});
    }
    // 0.3 <= beta <= 0.7: excluded as a candidate (still usable as context).
  }
  return out;
}

std::vector<Sample> balance(std::vector<Sample> samples, Prng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    (samples[i].label == 1 ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty()) {
    throw ValueError("balance: need both classes, got " +
                     std::to_string(pos.size()) + " positive / " +
                     std::to_string(neg.size()) + " negative");
  }
  std::vector<std::size_t>& majority = pos.size() >= neg.size() ? pos : neg;
  const std::size_t keep = std::min(pos.size(), neg.size());
  rng.shuffle(majority);
  majority.resize(keep);

  std::vector<std::size_t> chosen;
  chosen.reserve(2 * keep);
  chosen.insert(chosen.end(), pos.begin(), pos.end());
  chosen.insert(chosen.end(), neg.begin(), neg.end());
  std::sort(chosen.begin(), chosen.end());  // stable base order before shuffle
  rng.shuffle(chosen);

  std::vector<Sample> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) out.push_back(std::move(samples[i]));
  return out;
}

namespace {

struct ObjectTriple {
  int color, shape, place;
};

std::vector<float> make_feature(const SynthConfig& cfg, const ObjectTriple& t,
                                Prng& rng) {
  std::vector<float> feat(static_cast<std::size_t>(cfg.feature_dim()), 0.0f);
  feat[static_cast<std::size_t>(t.color)] = 1.0f;
  feat[cfg.colors.size() + static_cast<std::size_t>(t.shape)] = 1.0f;
  feat[cfg.colors.size() + cfg.shapes.size() + static_cast<std::size_t>(t.place)] =
      1.0f;
  for (float& f : feat) {
    f += static_cast<float>(rng.next_gaussian() * cfg.noise_sigma);
  }
  return feat;
}

std::string make_instruction(const SynthConfig& cfg, const ObjectTriple& t,
                             Prng& rng) {
  static const char* kVerbs[] = {"pick up", "grab", "fetch"};
  const char* verb = kVerbs[rng.next_below(3)];
  return std::string(verb) + " the " + cfg.colors[static_cast<std::size_t>(t.color)] +
         " " + cfg.shapes[static_cast<std::size_t>(t.shape)] + " on the " +
         cfg.places[static_cast<std::size_t>(t.place)];
}

// Small perturbation guaranteed to keep IoU with the source box above 0.7.
Box jitter_high_overlap(const Box& b, Prng& rng) {
  const double w = b.width(), h = b.height();
  const double dx = rng.uniform(-0.05, 0.05) * w;
  const double dy = rng.uniform(-0.05, 0.05) * h;
  const double sx = rng.uniform(0.95, 1.05);
  const double sy = rng.uniform(0.95, 1.05);
  const double cx = (b.x1 + b.x2) / 2 + dx;
  const double cy = (b.y1 + b.y2) / 2 + dy;
  return Box{cx - w * sx / 2, cy - h * sy / 2, cx + w * sx / 2, cy + h * sy / 2};
}

// Single-axis shift targeting the excluded overlap band (0.3, 0.7).
Box jitter_mid_overlap(const Box& b, Prng& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double mag = rng.uniform(0.25, 0.42);
    const bool horizontal = rng.bernoulli(0.5);
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    Box j = b;
    if (horizontal) {
      const double d = sign * mag * b.width();
      j.x1 += d;
      j.x2 += d;
    } else {
      const double d = sign * mag * b.height();
      j.y1 += d;
      j.y2 += d;
    }
    const double beta = iou(j, b);
    if (beta > 0.32 && beta < 0.68) return j;
  }
  return b;  // unreachable in practice; fall back to the source box
}

}  // namespace

std::vector<Scene> generate_scenes(const SynthConfig& cfg) {
  if (cfg.n_scenes <= 0 || cfg.objects_per_scene <= 0) {
    throw ValueError("generate_scenes: scene and object counts must be positive");
  }
  const std::size_t smallest = std::min(
      {cfg.colors.size(), cfg.shapes.size(), cfg.places.size()});
  if (smallest < static_cast<std::size_t>(cfg.objects_per_scene)) {
    throw ValueError("generate_scenes: smallest attribute inventory (" +
                     std::to_string(smallest) + ") cannot fill " +
                     std::to_string(cfg.objects_per_scene) +
                     " objects with scene-unique attributes");
  }
  if (cfg.image_w < 200 || cfg.image_h < 200) {
    throw ValueError("generate_scenes: image too small for box placement");
  }

  Prng root = Prng::seeded(cfg.seed);
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.n_scenes));

  for (int si = 0; si < cfg.n_scenes; ++si) {
    Prng rng = root.fork(static_cast<std::uint64_t>(si));
    Scene scene;
    scene.width = cfg.image_w;
    scene.height = cfg.image_h;

    // Attributes are drawn without replacement per category, so within a
    // scene every object has its own color, shape, and place. An instruction
    // then disagrees with every non-target object in all three attributes,
    // which keeps the task cleanly separable.
    auto draw_distinct = [&](std::size_t n) {
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(cfg.objects_per_scene));
      return idx;
    };
    const std::vector<int> cs = draw_distinct(cfg.colors.size());
    const std::vector<int> ss = draw_distinct(cfg.shapes.size());
    const std::vector<int> ps = draw_distinct(cfg.places.size());
    std::vector<ObjectTriple> objects;
    for (int oi = 0; oi < cfg.objects_per_scene; ++oi) {
      objects.push_back({cs[static_cast<std::size_t>(oi)],
                         ss[static_cast<std::size_t>(oi)],
                         ps[static_cast<std::size_t>(oi)]});
    }

    // Ground-truth boxes, placed with low mutual overlap and an edge margin
    // so jittered detections stay inside the image.
    std::vector<Box> gt;
    for (int oi = 0; oi < cfg.objects_per_scene; ++oi) {
      Box placed;
      bool ok = false;
      for (int attempt = 0; attempt < 400 && !ok; ++attempt) {
        const double w = rng.uniform(70.0, 140.0);
        const double h = rng.uniform(70.0, 140.0);
        const double margin = 0.6;  // room for mid-overlap shifts
        const double x = rng.uniform(margin * w, cfg.image_w - (1 + margin) * w);
        const double y = rng.uniform(margin * h, cfg.image_h - (1 + margin) * h);
        placed = Box{x, y, x + w, y + h};
        ok = true;
        for (const Box& other : gt) {
          if (iou(placed, other) > 0.25) {
            ok = false;
            break;
          }
        }
      }
      if (!ok) {
        throw ValueError("generate_scenes: box placement failed in scene " +
                         std::to_string(si));
      }
      gt.push_back(placed);
    }

    // Detections: one well-localized box per object, plus sometimes a
    // mid-overlap duplicate that the labeling stage must exclude.
    for (int oi = 0; oi < cfg.objects_per_scene; ++oi) {
      Region det;
      det.bbox = jitter_high_overlap(gt[static_cast<std::size_t>(oi)], rng);
      det.feat = make_feature(cfg, objects[static_cast<std::size_t>(oi)], rng);
      det.score = static_cast<float>(rng.uniform(0.5, 1.0));
      scene.regions.push_back(std::move(det));
      if (rng.bernoulli(cfg.mid_detection_prob)) {
        Region mid;
        mid.bbox = jitter_mid_overlap(gt[static_cast<std::size_t>(oi)], rng);
        mid.feat = make_feature(cfg, objects[static_cast<std::size_t>(oi)], rng);
        mid.score = static_cast<float>(rng.uniform(0.5, 1.0));
        scene.regions.push_back(std::move(mid));
      }
    }

    for (int oi = 0; oi < cfg.objects_per_scene; ++oi) {
      scene.instructions.push_back(
          make_instruction(cfg, objects[static_cast<std::size_t>(oi)], rng));
      scene.gt_boxes.push_back(gt[static_cast<std::size_t>(oi)]);
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

namespace {

std::string sample_id(int scene_index, int instruction_index, int region_index) {
  std::ostringstream os;
  os << 's';
  std::string num = std::to_string(scene_index);
  os << std::string(num.size() < 5 ? 5 - num.size() : 0, '0') << num;
  os << ":i" << instruction_index << ":d" << region_index;
  return os.str();
}

std::vector<Sample> scenes_to_samples(const std::vector<Scene>& scenes,
                                      const std::vector<std::size_t>& indices) {
  std::vector<Sample> out;
  for (std::size_t scene_idx : indices) {
    const Scene& scene = scenes[scene_idx];
    for (std::size_t ii = 0; ii < scene.instructions.size(); ++ii) {
      for (const LabeledCandidate& cand :
           label_candidates(scene.regions, scene.gt_boxes[ii])) {
        Sample s;
        s.id = sample_id(static_cast<int>(scene_idx), static_cast<int>(ii),
                         cand.region_index);
        s.instruction = scene.instructions[ii];
        s.width = scene.width;
        s.height = scene.height;
        s.target = scene.regions[static_cast<std::size_t>(cand.region_index)];
        s.contexts = scene.regions;
        s.label = cand.label;
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

// Truncates a balanced list to `cap` entries while keeping classes even.
std::vector<Sample> cap_balanced(std::vector<Sample> samples, int cap) {
  if (cap <= 0 || static_cast<int>(samples.size()) <= cap) return samples;
  const int want_pos = cap / 2;
  const int want_neg = cap - want_pos;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cap));
  int got_pos = 0, got_neg = 0;
  for (Sample& s : samples) {
    if (s.label == 1 && got_pos < want_pos) {
      ++got_pos;
      out.push_back(std::move(s));
    } else if (s.label == 0 && got_neg < want_neg) {
      ++got_neg;
      out.push_back(std::move(s));
    }
    if (got_pos == want_pos && got_neg == want_neg) break;
  }
  return out;
}

}  // namespace

DatasetSplit preprocess_scenes(const std::vector<Scene>& scenes,
                               const PreprocessConfig& cfg) {
  if (scenes.empty()) throw ValueError("preprocess_scenes: no scenes");
  if (cfg.train_frac <= 0 || cfg.val_frac <= 0 ||
      cfg.train_frac + cfg.val_frac >= 1.0) {
    throw ValueError("preprocess_scenes: split fractions must be positive and "
                     "leave room for a test split");
  }
  Prng root = Prng::seeded(cfg.seed);

  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Prng split_rng = root.fork(1);
  split_rng.shuffle(order);

  const std::size_t n = scenes.size();
  const std::size_t n_train = static_cast<std::size_t>(cfg.train_frac * n);
  const std::size_t n_val = static_cast<std::size_t>(cfg.val_frac * n);
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw ValueError("preprocess_scenes: too few scenes (" + std::to_string(n) +
                     ") for a three-way split");
  }

  auto slice = [&](std::size_t lo, std::size_t hi) {
    return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                    order.begin() + static_cast<std::ptrdiff_t>(hi));
  };

  DatasetSplit split;
  Prng train_rng = root.fork(2), val_rng = root.fork(3), test_rng = root.fork(4);
  split.train = cap_balanced(
      balance(scenes_to_samples(scenes, slice(0, n_train)), train_rng),
      cfg.train_cap);
  split.val = cap_balanced(
      balance(scenes_to_samples(scenes, slice(n_train, n_train + n_val)), val_rng),
      cfg.val_cap);
  split.test = cap_balanced(
      balance(scenes_to_samples(scenes, slice(n_train + n_val, n)), test_rng),
      cfg.test_cap);
  return split;
}

Sample halve_contexts(const Sample& s) {
  const int n = static_cast<int>(s.contexts.size());
  if (n < 1) throw ValueError("halve_contexts: sample has no contexts");
  const int keep = (n + 1) / 2;
  if (keep == n) return s;

  std::vector<int> rank(static_cast<std::size_t>(n));
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) {
    return s.contexts[static_cast<std::size_t>(a)].score >
           s.contexts[static_cast<std::size_t>(b)].score;
  });
  rank.resize(static_cast<std::size_t>(keep));

  int target_idx = -1;
  for (int i = 0; i < n; ++i) {
    if (s.contexts[static_cast<std::size_t>(i)] == s.target) {
      target_idx = i;
      break;
    }
  }
  if (target_idx < 0) throw ValueError("halve_contexts: target not in contexts");
  if (std::find(rank.begin(), rank.end(), target_idx) == rank.end()) {
    rank.back() = target_idx;  // lowest-ranked survivor makes way
  }
  std::sort(rank.begin(), rank.end());  // keep original relative order

  Sample out = s;
  out.contexts.clear();
  for (int i : rank) out.contexts.push_back(s.contexts[static_cast<std::size_t>(i)]);
  return out;
}

namespace {

json region_to_json(const Region& r) {
  json j;
  j["feat"] = r.feat;
  j["bbox"] = {r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2};
  j["score"] = r.score;
  return j;
}

Region region_from_json(const json& j) {
  Region r;
  r.feat = j.at("feat").get<std::vector<float>>();
  const auto& b = j.at("bbox");
  if (!b.is_array() || b.size() != 4) throw ValueError("region bbox must have 4 numbers");
  r.bbox = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
               b[3].get<double>()};
  r.score = j.at("score").get<float>();
  return r;
}

void validate_region(const Region& r, const std::string& where) {
  r.bbox.validate();
  if (r.feat.empty()) throw ValueError(where + ": empty feature vector");
  for (float f : r.feat) {
    if (!std::isfinite(f)) throw ValueError(where + ": non-finite feature");
  }
  if (!(r.score >= 0.0f && r.score <= 1.0f)) {
    throw ValueError(where + ": score " + std::to_string(r.score) +
                     " outside [0,1]");
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot open '" + path + "' for writing");
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValueError("cannot open '" + path + "'");
  return in;
}

}  // namespace

void save_scenes(const std::vector<Scene>& scenes, const std::string& path) {
  std::ofstream out = open_out(path);
  for (const Scene& s : scenes) {
    json j;
    j["image_size"] = {s.width, s.height};
    j["regions"] = json::array();
    for (const Region& r : s.regions) j["regions"].push_back(region_to_json(r));
    j["instructions"] = s.instructions;
    j["gt_boxes"] = json::array();
    for (const Box& b : s.gt_boxes) {
      j["gt_boxes"].push_back({b.x1, b.y1, b.x2, b.y2});
    }
    out << j.dump() << '\n';
  }
  if (!out) throw ValueError("write failed for '" + path + "'");
}

std::vector<Scene> load_scenes(const std::string& path) {
  std::ifstream in = open_in(path);
  std::vector<Scene> scenes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      Scene s;
      s.width = j.at("image_size").at(0).get<int>();
      s.height = j.at("image_size").at(1).get<int>();
      for (const json& rj : j.at("regions")) {
        Region r = region_from_json(rj);
        validate_region(r, "region");
        s.regions.push_back(std::move(r));
      }
      s.instructions = j.at("instructions").get<std::vector<std::string>>();
      for (const json& bj : j.at("gt_boxes")) {
        Box b{bj.at(0).get<double>(), bj.at(1).get<double>(),
              bj.at(2).get<double>(), bj.at(3).get<double>()};
        b.validate();
        s.gt_boxes.push_back(b);
      }
      if (s.instructions.size() != s.gt_boxes.size()) {
        throw ValueError("instruction/gt_box count mismatch");
      }
      if (s.width <= 0 || s.height <= 0) throw ValueError("non-positive image size");
      scenes.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ValueError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValueError& e) {
      throw ValueError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return scenes;
}

void save_samples(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream out = open_out(path);
  for (const Sample& s : samples) {
    json j;
    j["id"] = s.id;
    j["instruction"] = s.instruction;
    j["image_size"] = {s.width, s.height};
    j["target"] = region_to_json(s.target);
    j["contexts"] = json::array();
    for (const Region& r : s.contexts) j["contexts"].push_back(region_to_json(r));
    j["label"] = s.label;
    out << j.dump() << '\n';
  }
  if (!out) throw ValueError("write failed for '" + path + "'");
}

std::vector<Sample> load_samples(const std::string& path) {
  std::ifstream in = open_in(path);
  std::vector<Sample> samples;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      Sample s;
      s.id = j.at("id").get<std::string>();
      s.instruction = j.at("instruction").get<std::string>();
      s.width = j.at("image_size").at(0).get<int>();
      s.height = j.at("image_size").at(1).get<int>();
      s.target = region_from_json(j.at("target"));
      for (const json& rj : j.at("contexts")) {
        s.contexts.push_back(region_from_json(rj));
      }
      s.label = j.at("label").get<int>();

      if (s.label != 0 && s.label != 1) throw ValueError("label must be 0 or 1");
      if (s.width <= 0 || s.height <= 0) throw ValueError("non-positive image size");
      if (s.contexts.empty()) throw ValueError("sample has no contexts");
      validate_region(s.target, "target");
      bool found = false;
      for (const Region& r : s.contexts) {
        validate_region(r, "context");
        if (r.feat.size() != s.target.feat.size()) {
          throw ValueError("inconsistent feature dims across regions");
        }
        if (r == s.target) found = true;
      }
      if (!found) throw ValueError("target region not found among contexts");
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ValueError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValueError& e) {
      throw ValueError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return samples;
}

}  // namespace tdu
