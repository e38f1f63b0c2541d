#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdu/errors.hpp"
#include "tdu/prng.hpp"

namespace tdu {

// Axis-aligned pixel box, corner-anchored: (x1,y1) top-left, (x2,y2)
// bottom-right, x1 <= x2 and y1 <= y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  void validate() const {
    if (!(x1 <= x2) || !(y1 <= y2)) {
      throw ValueError("invalid box (" + std::to_string(x1) + "," +
                       std::to_string(y1) + "," + std::to_string(x2) + "," +
                       std::to_string(y2) + ")");
    }
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  bool operator==(const Box& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

// One detected region: precomputed feature vector, box, detector confidence.
struct Region {
  std::vector<float> feat;
  Box bbox;
  float score = 0.0f;

  bool operator==(const Region& o) const {
    return feat == o.feat && bbox == o.bbox && score == o.score;
  }
};

// One generated image: detections plus (instruction, ground-truth box) pairs.
struct Scene {
  int width = 0;
  int height = 0;
  std::vector<Region> regions;
  std::vector<std::string> instructions;
  std::vector<Box> gt_boxes;  // parallel to instructions
};

// One classification unit: is `target` the region the instruction refers to?
// The target always also appears verbatim among the contexts.
struct Sample {
  std::string id;
  std::string instruction;
  int width = 0;
  int height = 0;
  Region target;
  std::vector<Region> contexts;
  int label = 0;
};

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

// Intersection over union; 0 when the union has zero area.
double iou(const Box& a, const Box& b);

// Candidate labeling by overlap with the ground truth: > 0.7 positive,
// < 0.3 negative, the mid band is excluded from candidacy entirely.
struct LabeledCandidate {
  int region_index;
  int label;
};
std::vector<LabeledCandidate> label_candidates(const std::vector<Region>& detections,
                                               const Box& gt);

// Uniformly downsamples the majority class to the minority count, then
// shuffles. Throws when either class is empty.
std::vector<Sample> balance(std::vector<Sample> samples, Prng& rng);

// Synthetic scene generator configuration. Objects are (color, shape, place)
// triples, unique within a scene, so each templated instruction describes
// exactly one object. Features are attribute one-hots plus Gaussian noise.
struct SynthConfig {
  int n_scenes = 100;
  int objects_per_scene = 5;
  int image_w = 640;
  int image_h = 480;
  double noise_sigma = 0.1;
  // Probability of adding a deliberately mid-overlap duplicate detection,
  // exercising the exclusion band.
  double mid_detection_prob = 0.3;
  std::uint64_t seed = 0;

  std::vector<std::string> colors = {"red",    "blue",  "green",
                                     "yellow", "black", "white"};
  std::vector<std::string> shapes = {"ball",   "box",  "cup",
                                     "bottle", "book", "plate"};
  std::vector<std::string> places = {"desk",  "shelf", "tray",
                                     "table", "chair", "floor"};

  int feature_dim() const {
    return static_cast<int>(colors.size() + shapes.size() + places.size());
  }
};

std::vector<Scene> generate_scenes(const SynthConfig& cfg);

// Scene -> sample pipeline: disjoint scene split, candidate labeling,
// class balancing, optional per-split caps (0 = uncapped; caps preserve
// the class balance).
struct PreprocessConfig {
  double train_frac = 0.8;
  double val_frac = 0.1;  // test gets the remainder
  int train_cap = 0;
  int val_cap = 0;
  int test_cap = 0;
  std::uint64_t seed = 0;
};

DatasetSplit preprocess_scenes(const std::vector<Scene>& scenes,
                               const PreprocessConfig& cfg);

// Keeps the ceil(N/2) highest-scoring contexts (ties by index); if that cuts
// the target, the lowest-ranked survivor is swapped for the target.
Sample halve_contexts(const Sample& s);

// JSONL serialization. Loading validates every invariant and reports the
// offending line.
void save_scenes(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> load_scenes(const std::string& path);
void save_samples(const std::vector<Sample>& samples, const std::string& path);
std::vector<Sample> load_samples(const std::string& path);

}  // namespace tdu
