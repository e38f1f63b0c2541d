#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "tdu/data.hpp"
#include "tdu/prng.hpp"

using namespace tdu;

namespace {

Region make_region(double x1, double y1, double x2, double y2, float score,
                   std::vector<float> feat = {1.0f, 0.0f}) {
  Region r;
  r.feat = std::move(feat);
  r.bbox = Box{x1, y1, x2, y2};
  r.score = score;
  return r;
}

Sample make_sample(const std::string& id, int label,
                   const std::vector<Region>& contexts, int target_index) {
  Sample s;
  s.id = id;
  s.instruction = "pick up the red ball on the desk";
  s.width = 640;
  s.height = 480;
  s.contexts = contexts;
  s.target = contexts[static_cast<std::size_t>(target_index)];
  s.label = label;
  return s;
}

// Independent overlap oracle for integer boxes: count unit grid cells.
double grid_iou(const Box& a, const Box& b) {
  long long inter = 0, only_a = 0, only_b = 0;
  const int lo_x = static_cast<int>(std::min(a.x1, b.x1));
  const int hi_x = static_cast<int>(std::max(a.x2, b.x2));
  const int lo_y = static_cast<int>(std::min(a.y1, b.y1));
  const int hi_y = static_cast<int>(std::max(a.y2, b.y2));
  for (int x = lo_x; x < hi_x; ++x) {
    for (int y = lo_y; y < hi_y; ++y) {
      const bool in_a = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
      const bool in_b = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
      if (in_a && in_b) ++inter;
      else if (in_a) ++only_a;
      else if (in_b) ++only_b;
    }
  }
  const long long uni = inter + only_a + only_b;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

TEST_CASE("iou hand oracle values") {
  CHECK(iou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == 1.0);
  CHECK(iou(Box{0, 0, 1, 1}, Box{5, 5, 6, 6}) == 0.0);
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  // Degenerate zero-area union.
  CHECK(iou(Box{1, 1, 1, 1}, Box{1, 1, 1, 1}) == 0.0);
  CHECK_THROWS_AS(iou(Box{2, 0, 1, 1}, Box{0, 0, 1, 1}), ValueError);
  CHECK_THROWS_AS(iou(Box{0, 0, 1, 1}, Box{0, 3, 1, 1}), ValueError);
}

TEST_CASE("iou agrees with pixel-grid counting on random integer boxes") {
  Prng rng = Prng::seeded(99);
  for (int rep = 0; rep < 300; ++rep) {
    auto random_box = [&]() {
      const int x1 = static_cast<int>(rng.next_below(40));
      const int y1 = static_cast<int>(rng.next_below(40));
      const int w = static_cast<int>(rng.next_below(20)) + 1;
      const int h = static_cast<int>(rng.next_below(20)) + 1;
      return Box{static_cast<double>(x1), static_cast<double>(y1),
                 static_cast<double>(x1 + w), static_cast<double>(y1 + h)};
    };
    const Box a = random_box();
    const Box b = random_box();
    CHECK(iou(a, b) == doctest::Approx(grid_iou(a, b)).epsilon(1e-9));
    CHECK(iou(a, b) == iou(b, a));  // symmetry
  }
}

TEST_CASE("label_candidates applies strict thresholds") {
  const Box gt{0, 0, 10, 10};
  std::vector<Region> dets = {
      make_region(0, 0, 10, 10, 0.9f),   // beta = 1.0 -> positive
      make_region(50, 50, 60, 60, 0.9f), // beta = 0.0 -> negative
      make_region(0, 0, 10, 5, 0.9f),    // beta = 0.5 -> excluded
      make_region(0, 0, 10, 7, 0.9f),    // beta = 0.7 exactly -> excluded
      make_region(0, 0, 10, 3, 0.9f),    // beta = 0.3 exactly -> excluded
  };
  auto labels = label_candidates(dets, gt);
  REQUIRE(labels.size() == 2);
  CHECK(labels[0].region_index == 0);
  CHECK(labels[0].label == 1);
  CHECK(labels[1].region_index == 1);
  CHECK(labels[1].label == 0);
}

TEST_CASE("balance downsamples the majority class") {
  auto batch = [&](int pos, int neg) {
    std::vector<Region> ctx = {make_region(0, 0, 5, 5, 0.9f)};
    std::vector<Sample> out;
    for (int i = 0; i < pos; ++i) {
      out.push_back(make_sample("p" + std::to_string(i), 1, ctx, 0));
    }
    for (int i = 0; i < neg; ++i) {
      out.push_back(make_sample("n" + std::to_string(i), 0, ctx, 0));
    }
    return out;
  };
  auto count = [](const std::vector<Sample>& v, int label) {
    return std::count_if(v.begin(), v.end(),
                         [&](const Sample& s) { return s.label == label; });
  };

  SUBCASE("many negatives") {
    Prng rng = Prng::seeded(1);
    auto out = balance(batch(10, 25), rng);
    CHECK(count(out, 1) == 10);
    CHECK(count(out, 0) == 10);
  }
  SUBCASE("many positives") {
    Prng rng = Prng::seeded(1);
    auto out = balance(batch(5, 3), rng);
    CHECK(count(out, 1) == 3);
    CHECK(count(out, 0) == 3);
  }
  SUBCASE("already balanced keeps counts") {
    Prng rng = Prng::seeded(1);
    auto out = balance(batch(4, 4), rng);
    CHECK(count(out, 1) == 4);
    CHECK(count(out, 0) == 4);
  }
  SUBCASE("output is a subset of the input") {
    Prng rng = Prng::seeded(2);
    auto in = batch(6, 9);
    std::set<std::string> in_ids;
    for (const Sample& s : in) in_ids.insert(s.id);
    auto out = balance(in, rng);
    std::set<std::string> out_ids;
    for (const Sample& s : out) {
      CHECK(in_ids.count(s.id) == 1);
      out_ids.insert(s.id);
    }
    CHECK(out_ids.size() == out.size());  // no duplicates
  }
  SUBCASE("an empty class is an error") {
    Prng rng = Prng::seeded(1);
    CHECK_THROWS_AS(balance(batch(3, 0), rng), ValueError);
  }
  SUBCASE("deterministic given the seed") {
    Prng r1 = Prng::seeded(7), r2 = Prng::seeded(7);
    auto a = balance(batch(6, 9), r1);
    auto b = balance(batch(6, 9), r2);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].id == b[i].id);
  }
}

TEST_CASE("generated scenes satisfy the construction contract") {
  SynthConfig cfg;
  cfg.n_scenes = 20;
  cfg.seed = 31;
  auto scenes = generate_scenes(cfg);
  REQUIRE(scenes.size() == 20);

  for (const Scene& sc : scenes) {
    REQUIRE(sc.instructions.size() == sc.gt_boxes.size());
    CHECK(sc.instructions.size() == 5);
    CHECK(sc.regions.size() >= 5);

    // Every region inside the image, scores in range, features finite.
    for (const Region& r : sc.regions) {
      CHECK(r.bbox.x1 >= 0.0);
      CHECK(r.bbox.y1 >= 0.0);
      CHECK(r.bbox.x2 <= sc.width);
      CHECK(r.bbox.y2 <= sc.height);
      CHECK(r.score >= 0.5f);
      CHECK(r.score <= 1.0f);
      CHECK(static_cast<int>(r.feat.size()) == cfg.feature_dim());
    }

    // Each instruction names a distinct attribute triple, so exactly one
    // object in the scene satisfies it.
    std::set<std::string> described;
    for (const std::string& inst : sc.instructions) {
      std::string triple;
      for (const auto& group : {cfg.colors, cfg.shapes, cfg.places}) {
        int hits = 0;
        for (const std::string& word : group) {
          if (inst.find(" " + word) != std::string::npos) {
            triple += word + "/";
            ++hits;
          }
        }
        CHECK(hits == 1);
      }
      described.insert(triple);
    }
    CHECK(described.size() == sc.instructions.size());

    // Each instruction's ground truth box has a well-localized detection.
    for (const Box& gt : sc.gt_boxes) {
      bool has_positive = false;
      for (const Region& r : sc.regions) {
        if (iou(r.bbox, gt) > 0.7) has_positive = true;
      }
      CHECK(has_positive);
    }
  }
}

TEST_CASE("scene generation is byte-identical for a fixed seed") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "tdu_data_test_gen";
  fs::create_directories(dir);

  SynthConfig cfg;
  cfg.n_scenes = 6;
  cfg.seed = 5;
  save_scenes(generate_scenes(cfg), (dir / "a.jsonl").string());
  save_scenes(generate_scenes(cfg), (dir / "b.jsonl").string());
  cfg.seed = 6;
  save_scenes(generate_scenes(cfg), (dir / "c.jsonl").string());

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
  CHECK(slurp(dir / "a.jsonl") != slurp(dir / "c.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("preprocess splits scenes disjointly and balances classes") {
  SynthConfig cfg;
  cfg.n_scenes = 40;
  cfg.seed = 11;
  auto scenes = generate_scenes(cfg);

  PreprocessConfig pre;
  pre.seed = 13;
  DatasetSplit split = preprocess_scenes(scenes, pre);

  auto scene_prefix = [](const std::string& id) {
    return id.substr(0, id.find(':'));
  };
  auto check_balanced = [](const std::vector<Sample>& v) {
    long long pos = std::count_if(v.begin(), v.end(),
                                  [](const Sample& s) { return s.label == 1; });
    CHECK(pos * 2 == static_cast<long long>(v.size()));
  };

  CHECK(!split.train.empty());
  CHECK(!split.val.empty());
  CHECK(!split.test.empty());
  check_balanced(split.train);
  check_balanced(split.val);
  check_balanced(split.test);

  std::set<std::string> train_scenes, val_scenes, test_scenes;
  std::set<std::string> all_ids;
  for (const Sample& s : split.train) {
    train_scenes.insert(scene_prefix(s.id));
    CHECK(all_ids.insert(s.id).second);
  }
  for (const Sample& s : split.val) {
    val_scenes.insert(scene_prefix(s.id));
    CHECK(all_ids.insert(s.id).second);
  }
  for (const Sample& s : split.test) {
    test_scenes.insert(scene_prefix(s.id));
    CHECK(all_ids.insert(s.id).second);
  }
  for (const std::string& sc : train_scenes) {
    CHECK(val_scenes.count(sc) == 0);
    CHECK(test_scenes.count(sc) == 0);
  }
  for (const std::string& sc : val_scenes) CHECK(test_scenes.count(sc) == 0);

  SUBCASE("caps preserve balance") {
    PreprocessConfig capped = pre;
    capped.train_cap = 50;
    capped.val_cap = 10;
    capped.test_cap = 10;
    DatasetSplit small = preprocess_scenes(scenes, capped);
    CHECK(small.train.size() == 50);
    CHECK(small.val.size() == 10);
    CHECK(small.test.size() == 10);
    check_balanced(small.train);
    check_balanced(small.val);
    check_balanced(small.test);
  }
  SUBCASE("deterministic given the seed") {
    DatasetSplit again = preprocess_scenes(scenes, pre);
    REQUIRE(again.train.size() == split.train.size());
    for (std::size_t i = 0; i < again.train.size(); ++i) {
      CHECK(again.train[i].id == split.train[i].id);
    }
  }
}

TEST_CASE("halve_contexts keeps top scores and always the target") {
  SUBCASE("single context unchanged") {
    std::vector<Region> ctx = {make_region(0, 0, 5, 5, 0.9f)};
    Sample s = make_sample("a", 1, ctx, 0);
    Sample out = halve_contexts(s);
    CHECK(out.contexts.size() == 1);
    CHECK(out.contexts[0] == s.target);
  }
  SUBCASE("equal scores fall back to index order") {
    std::vector<Region> ctx = {
        make_region(0, 0, 5, 5, 0.8f), make_region(1, 1, 6, 6, 0.8f),
        make_region(2, 2, 7, 7, 0.8f), make_region(3, 3, 8, 8, 0.8f)};
    Sample s = make_sample("b", 1, ctx, 0);
    Sample out = halve_contexts(s);
    REQUIRE(out.contexts.size() == 2);
    CHECK(out.contexts[0] == ctx[0]);
    CHECK(out.contexts[1] == ctx[1]);
  }
  SUBCASE("low-scored target is swapped back in") {
    std::vector<Region> ctx = {
        make_region(0, 0, 5, 5, 0.9f), make_region(1, 1, 6, 6, 0.8f),
        make_region(2, 2, 7, 7, 0.7f), make_region(3, 3, 8, 8, 0.6f),
        make_region(4, 4, 9, 9, 0.5f)};
    Sample s = make_sample("c", 1, ctx, 4);  // target has the lowest score
    Sample out = halve_contexts(s);
    REQUIRE(out.contexts.size() == 3);  // ceil(5/2)
    bool has_target = false;
    for (const Region& r : out.contexts) {
      if (r == s.target) has_target = true;
    }
    CHECK(has_target);
    CHECK(out.contexts[0] == ctx[0]);  // best scores still first
    CHECK(out.contexts[1] == ctx[1]);
  }
}

TEST_CASE("sample JSONL round trip and validation") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "tdu_data_test_io";
  fs::create_directories(dir);
  fs::path file = dir / "samples.jsonl";

  std::vector<Region> ctx = {make_region(0, 0, 5, 5, 0.9f, {0.5f, -1.25f}),
                             make_region(1, 1, 6, 6, 0.75f, {0.25f, 2.0f})};
  std::vector<Sample> samples = {make_sample("s00000:i0:d0", 1, ctx, 0),
                                 make_sample("s00000:i0:d1", 0, ctx, 1)};

  save_samples(samples, file.string());
  auto loaded = load_samples(file.string());
  REQUIRE(loaded.size() == 2);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(loaded[i].instruction == samples[i].instruction);
    CHECK(loaded[i].width == samples[i].width);
    CHECK(loaded[i].height == samples[i].height);
    CHECK(loaded[i].label == samples[i].label);
    CHECK(loaded[i].target == samples[i].target);
    REQUIRE(loaded[i].contexts.size() == samples[i].contexts.size());
    for (std::size_t j = 0; j < ctx.size(); ++j) {
      CHECK(loaded[i].contexts[j] == samples[i].contexts[j]);
    }
  }

  SUBCASE("target missing from contexts is rejected") {
    Sample bad = samples[0];
    bad.target = make_region(9, 9, 12, 12, 0.1f, {0.0f, 0.0f});
    save_samples({bad}, file.string());
    CHECK_THROWS_AS(load_samples(file.string()), ValueError);
  }
  SUBCASE("bad label is rejected") {
    std::ofstream out(file);
    out << R"({"id":"x","instruction":"t","image_size":[10,10],)"
        << R"("target":{"feat":[1.0],"bbox":[0,0,1,1],"score":0.5},)"
        << R"("contexts":[{"feat":[1.0],"bbox":[0,0,1,1],"score":0.5}],"label":3})"
        << '\n';
    out.close();
    CHECK_THROWS_AS(load_samples(file.string()), ValueError);
  }
  SUBCASE("malformed JSON is rejected with the line number") {
    std::ofstream out(file);
    out << "{not json\n";
    out.close();
    try {
      load_samples(file.string());
      FAIL("expected a ValueError");
    } catch (const ValueError& e) {
      CHECK(std::string(e.what()).find(":1:") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}
