#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "segfuse/pipeline.hpp"
#include "test_util.hpp"

using namespace segfuse;
using namespace segfuse::pipeline;
using segfuse::testing::read_file;
using segfuse::testing::TempDir;
using segfuse::testing::write_file;
using segfuse::testing::write_json;
using segfuse::testing::write_synthetic_dataset;
using nlohmann::json;

namespace {

const fs::path kFixtures = fs::path(SEGFUSE_SOURCE_DIR) / "data" / "fixtures" / "taxonomy";

struct CommandResult {
  int status = 0;
  std::string out, err;
};

CommandResult run(const std::string& command, const fs::path& config, const Options& opts = {}) {
  std::ostringstream out, err;
  CommandResult r;
  r.status = run_command(command, load_config(config), opts, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json fixture_datasets() {
  json d;
  for (const char* name : {"cityscapes", "lostandfound", "kitti", "rellis3d"}) {
    d[name] = (kFixtures / (std::string(name) + ".json")).string();
  }
  return d;
}

json four_dataset_config(const std::string& method) {
  return {{"output_dir", "out"},
          {"datasets", fixture_datasets()},
          {"main", "cityscapes"},
          {"supplements", {"lostandfound", "kitti", "rellis3d"}},
          {"relations", (kFixtures / "relations.json").string()},
          {"method", method}};
}

// Small two-class dataset whose samples are given as (gt, pred) pairs; the
// predictions land in preds/<id>.png.
fs::path write_pair_dataset(const fs::path& dir, const std::vector<std::pair<LabelMap, LabelMap>>& pairs) {
  write_file(dir / "classes.tsv", "0\troad\n1\tsmall obstacle\n");
  json samples = json::array();
  fs::create_directories(dir / "preds");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string id = "p" + std::to_string(i);
    const auto& [gt, pred] = pairs[i];
    png::write_label((dir / (id + "_gt.png")).string(), gt);
    png::write_label((dir / "preds" / (id + ".png")).string(), pred);
    png::write_depth((dir / (id + "_depth.png")).string(), DepthMap(gt.height(), gt.width(), 1, 1.0));
    samples.push_back({{"id", id}, {"label", id + "_gt.png"}, {"depth", id + "_depth.png"}});
  }
  write_json(dir / "manifest.json", {{"dataset", "pairs"}, {"classes", "classes.tsv"}, {"samples", samples}});
  const fs::path cfg = dir / "config.json";
  write_json(cfg, {{"output_dir", "out"},
                   {"datasets", {{"pairs", "manifest.json"}}},
                   {"main", "pairs"},
                   {"evaluate", {{"predictions", "preds"}}}});
  return cfg;
}

geometry::CameraModel small_camera() {
  geometry::CameraModel cam;
  cam.fx = cam.fy = 10;
  cam.cx = 10;
  cam.cy = 8;
  cam.height = 16;
  cam.width = 20;
  return cam;
}

void write_calibration_file(const fs::path& path, const geometry::CameraModel& cam) {
  std::ostringstream ss;
  geometry::write_calibration(ss, cam);
  write_file(path, ss.str());
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifests and config

TEST(Manifest, PathsResolveAgainstTheManifest) {
  TempDir tmp("manifest");
  write_synthetic_dataset(tmp.path() / "ds", 1, 2, 8);
  DatasetManifest m = load_manifest(tmp.path() / "ds" / "manifest.json");
  EXPECT_EQ(m.dataset, "synthetic");
  ASSERT_EQ(m.samples.size(), 2u);
  EXPECT_EQ(m.samples[0].id, "s1000");
  EXPECT_EQ(*m.samples[0].rgb, (tmp.path() / "ds" / "images" / "s1000_rgb.png").lexically_normal());
  EXPECT_EQ(m.samples[1].split, "val");
}

TEST(Manifest, RejectsBadSamples) {
  TempDir tmp("manifest_bad");
  write_file(tmp.path() / "c.tsv", "0\ta\n");
  write_file(tmp.path() / "d.png", "");
  write_file(tmp.path() / "x.bin", "");
  auto load = [&](json samples) {
    write_json(tmp.path() / "m.json", {{"dataset", "d"}, {"classes", "c.tsv"}, {"samples", samples}});
    return load_manifest(tmp.path() / "m.json");
  };
  EXPECT_NO_THROW(load(json::array({{{"depth", "d.png"}}})));
  EXPECT_THROW(load(json::array({{{"depth", "missing.png"}}})), DataError);
  EXPECT_THROW(load(json::array({{{"id", "a"}}})), DataError);  // no depth source
  EXPECT_THROW(load(json::array({{{"depth", "d.png"}, {"cloud", "x.bin"}, {"calibration", "x.bin"}}})), DataError);
  EXPECT_THROW(load(json::array({{{"cloud", "x.bin"}}})), DataError);
  EXPECT_THROW(load(json::array({{{"id", "a"}, {"depth", "d.png"}}, {{"id", "a"}, {"depth", "d.png"}}})), DataError);
  EXPECT_THROW(load(json::array({{{"id", "../a"}, {"depth", "d.png"}}})), DataError);
  write_json(tmp.path() / "m.json", {{"dataset", "d"}, {"classes", "nope.tsv"}});
  EXPECT_THROW(load_manifest(tmp.path() / "m.json"), DataError);
}

TEST(Config, Validation) {
  const fs::path p = "/nowhere/config.json";
  auto parse = [&](const json& j) { return parse_config(j.dump(), p); };
  const PipelineConfig c = parse(four_dataset_config("thrifty"));
  EXPECT_EQ(c.output_dir, fs::path("/nowhere/out"));
  EXPECT_EQ(c.method, taxonomy::Method::thrifty);
  EXPECT_EQ(c.dataset_order(), (std::vector<std::string>{"cityscapes", "lostandfound", "kitti", "rellis3d"}));

  json bad = four_dataset_config("standard");
  bad["method"] = "greedy";
  EXPECT_THROW(parse(bad), UsageError);
  bad = four_dataset_config("standard");
  bad["main"] = "mapillary";
  EXPECT_THROW(parse(bad), UsageError);
  bad = four_dataset_config("standard");
  bad["supplements"] = {"kitti", "kitti"};
  EXPECT_THROW(parse(bad), UsageError);
  bad = four_dataset_config("standard");
  bad.erase("output_dir");
  EXPECT_THROW(parse(bad), UsageError);
  EXPECT_THROW(parse(json{{"output_dir", "o"}, {"depth", {{"window", 4}}}}), UsageError);
  EXPECT_THROW(parse(json{{"output_dir", "o"}, {"train", {{"input_h", 30}}}}), UsageError);
  EXPECT_THROW(parse(json{{"output_dir", "o"}, {"train", {{"variant", "triple"}}}}), UsageError);
  EXPECT_THROW(parse_config("{not json", p), UsageError);
}

TEST(RunMetadata, HashAndContents) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  TempDir tmp("meta");
  write_json(tmp.path() / "c.json", four_dataset_config("standard"));
  run("harmonize", tmp.path() / "c.json", Options{2, std::nullopt, std::nullopt});
  const json meta = json::parse(read_file(tmp.path() / "out" / "run-harmonize.json"));
  char expected[40];
  std::snprintf(expected, sizeof expected, "fnv1a64:%016llx",
                static_cast<unsigned long long>(fnv1a64(read_file(tmp.path() / "c.json"))));
  EXPECT_EQ(meta["config_hash"], expected);
  EXPECT_EQ(meta["overrides"]["workers"], 2);
  EXPECT_EQ(meta["versions"]["segfuse"], kVersion);
}

TEST(ParallelFor, VisitsEveryIndexAndReportsFirstFailure) {
  for (std::size_t workers : {1, 3, 8}) {
    std::vector<int> seen(50, 0);
    parallel_for(seen.size(), workers, [&](std::size_t i, std::size_t w) {
      EXPECT_LT(w, workers);
      ++seen[i];
    });
    EXPECT_EQ(seen, std::vector<int>(50, 1));
    try {
      parallel_for(20, workers, [](std::size_t i, std::size_t) {
        if (i == 7 || i == 13) throw DataError("bad " + std::to_string(i));
      });
      ADD_FAILURE() << "no error";
    } catch (const DataError& e) {
      EXPECT_STREQ(e.what(), "bad 7");
    }
  }
  parallel_for(0, 4, [](std::size_t, std::size_t) { ADD_FAILURE(); });
}

// ---------------------------------------------------------------------------
// harmonize

TEST(Harmonize, FourDatasetsStandard) {
  TempDir tmp("harm_std");
  write_json(tmp.path() / "c.json", four_dataset_config("standard"));
  CommandResult r = run("harmonize", tmp.path() / "c.json");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("rellis3d\t18\t+6\t2\t26\twater, object, log, barrier, puddle, rubble"), std::string::npos);
  std::istringstream tax(read_file(tmp.path() / "out" / "taxonomy.tsv"));
  EXPECT_EQ(taxonomy::read_taxonomy(tax).size(), 26u);
  std::istringstream maps(read_file(tmp.path() / "out" / "relabel_maps.tsv"));
  EXPECT_EQ(taxonomy::read_relabel_maps(maps).size(), 4u);
  EXPECT_EQ(read_file(tmp.path() / "out" / "growth.tsv"), r.out.substr(0, r.out.find("unified classes")));
}

TEST(Harmonize, ThriftyFlagsUnknownAsConflict) {
  TempDir tmp("harm_thrifty");
  write_json(tmp.path() / "c.json", four_dataset_config("thrifty"));
  run("harmonize", tmp.path() / "c.json");
  std::istringstream in(read_file(tmp.path() / "out" / "taxonomy.tsv"));
  const auto tax = taxonomy::read_taxonomy(in);
  const auto unknown = tax.find("unknown");
  ASSERT_TRUE(unknown.has_value());
  EXPECT_TRUE(tax.is_conflict(*unknown));
  EXPECT_NE(read_file(tmp.path() / "out" / "taxonomy.tsv").find("\tunknown\tconflict\t"), std::string::npos);
}

TEST(Harmonize, SingleDatasetEchoesTaxonomyOnly) {
  TempDir tmp("harm_single");
  write_synthetic_dataset(tmp.path() / "ds", 2, 3, 8);
  write_json(tmp.path() / "c.json",
             {{"output_dir", "out"}, {"datasets", {{"synthetic", "ds/manifest.json"}}}, {"main", "synthetic"}});
  CommandResult r = run("harmonize", tmp.path() / "c.json");
  EXPECT_EQ(r.status, 0);
  std::istringstream maps(read_file(tmp.path() / "out" / "relabel_maps.tsv"));
  const auto parsed = taxonomy::read_relabel_maps(maps);
  ASSERT_EQ(parsed.size(), 1u);
  EXPECT_EQ(parsed[0], taxonomy::RelabelMap::identity("synthetic", 3));
  EXPECT_FALSE(fs::exists(tmp.path() / "out" / "labels"));
}

TEST(Harmonize, RelabelsLabelFilesAndEvaluatesToPerfectScores) {
  TempDir tmp("harm_labels");
  const fs::path ds = tmp.path() / "rellis";
  write_file(ds / "classes.tsv", "3\tgrass\n4\ttree\n18\tvehicle\n31\tpuddle\n");
  write_file(tmp.path() / "city.tsv", "0\troad\n1\tvegetation\n2\tterrain\n");
  write_json(tmp.path() / "city.json", {{"dataset", "cityscapes"}, {"classes", "city.tsv"}});
  write_json(tmp.path() / "rel.json",
             {{"rellis3d",
               {{"grass", {{"subset_of", "terrain"}}}, {"tree", {{"subset_of", "vegetation"}}},
                {"vehicle", "overlaps"}, {"puddle", "disjoint"}}}});
  const LabelMap native(2, 3, 1, std::vector<std::uint8_t>{3, 4, 18, 31, 255, 4});
  png::write_label((ds / "a.png").string(), native);
  png::write_depth((ds / "a_depth.png").string(), DepthMap(2, 3, 1, 2.0));
  write_json(ds / "manifest.json", {{"dataset", "rellis3d"},
                                    {"classes", "classes.tsv"},
                                    {"samples", json::array({{{"label", "a.png"}, {"depth", "a_depth.png"}}})}});
  json cfg{{"output_dir", "out"},
           {"datasets", {{"cityscapes", "city.json"}, {"rellis3d", "rellis/manifest.json"}}},
           {"main", "cityscapes"},
           {"supplements", {"rellis3d"}},
           {"relations", "rel.json"},
           {"evaluate", {{"dataset", "rellis3d"}, {"predictions", "out/labels/rellis3d"}}}};
  write_json(tmp.path() / "c.json", cfg);
  EXPECT_EQ(run("harmonize", tmp.path() / "c.json").status, 0);
  const LabelMap relabeled = png::read_label(tmp.str("out/labels/rellis3d/a.png"));
  EXPECT_EQ(relabeled.data(), (std::vector<std::uint8_t>{2, 1, 255, 3, 255, 1}));

  // Ground truth evaluated against its own relabeling.
  run("evaluate", tmp.path() / "c.json");
  const auto report = metrics::report_from_json(json::parse(read_file(tmp.path() / "out" / "eval.json")));
  EXPECT_EQ(report.status[0], metrics::ClassStatus::undefined);  // road absent
  for (std::size_t c = 1; c < 4; ++c) EXPECT_EQ(report.iou[c], 1.0);
  EXPECT_EQ(report.miou, 1.0);
  EXPECT_EQ(report.pixels, 4u);
}

TEST(Harmonize, RelationErrorsNameDatasetAndClass) {
  TempDir tmp("harm_err");
  write_json(tmp.path() / "rel.json", {{"lostandfound", {{"road", {{"subset_of", "road"}}}}}});
  json cfg = four_dataset_config("standard");
  cfg["relations"] = "rel.json";
  cfg["supplements"] = {"lostandfound"};
  write_json(tmp.path() / "c.json", cfg);
  try {
    run("harmonize", tmp.path() / "c.json");
    ADD_FAILURE() << "no error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lostandfound"), std::string::npos) << msg;
    EXPECT_NE(msg.find("small obstacle"), std::string::npos) << msg;
  }
}

// ---------------------------------------------------------------------------
// depth-from-cloud

class DepthFromCloud : public ::testing::Test {
 protected:
  void SetUp() override {
    const fs::path ds = tmp.path() / "lidar";
    write_file(ds / "classes.tsv", "0\troad\n");
    write_calibration_file(ds / "cam.txt", small_camera());
    geometry::save_point_cloud((ds / "one.bin").string(), {{0, 0, 5, 0}});  // lands on (8, 10)
    geometry::save_point_cloud((ds / "empty.bin").string(), {});
    write_file(ds / "broken.bin", "12345");
    write_json(ds / "manifest.json",
               {{"dataset", "lidar"},
                {"classes", "classes.tsv"},
                {"samples", json::array({{{"id", "one"}, {"cloud", "one.bin"}, {"calibration", "cam.txt"}},
                                         {{"id", "empty"}, {"cloud", "empty.bin"}, {"calibration", "cam.txt"}},
                                         {{"id", "broken"}, {"cloud", "broken.bin"}, {"calibration", "cam.txt"}}})}});
    write_json(tmp.path() / "c.json",
               {{"output_dir", "out"}, {"datasets", {{"lidar", "lidar/manifest.json"}}}, {"main", "lidar"}});
  }
  TempDir tmp{"depth"};
};

TEST_F(DepthFromCloud, SinglePointBecomesSevenBySevenBlock) {
  CommandResult r = run("depth-from-cloud", tmp.path() / "c.json");
  EXPECT_EQ(r.status, 2);  // the broken sample
  EXPECT_NE(r.err.find("lidar/broken skipped"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("lidar/empty: empty point cloud"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(tmp.path() / "out" / "depth" / "lidar" / "broken.png"));

  const DepthMap d = png::read_depth(tmp.str("out/depth/lidar/one.png"));
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 20; ++x) {
      const bool inside = y >= 5 && y <= 11 && x >= 7 && x <= 13;
      EXPECT_EQ(d(y, x), inside ? 5.0 : 0.0) << y << "," << x;
    }
  }
  const DepthMap e = png::read_depth(tmp.str("out/depth/lidar/empty.png"));
  EXPECT_EQ(e, DepthMap(16, 20, 1, 0.0));
  EXPECT_NE(r.out.find("lidar/one\t0.003125\t0.153125"), std::string::npos) << r.out;
  EXPECT_EQ(read_file(tmp.path() / "out" / "coverage.tsv"), r.out);
}

TEST_F(DepthFromCloud, WindowOneKeepsRawProjection) {
  run("depth-from-cloud", tmp.path() / "c.json", Options{std::nullopt, std::nullopt, 1});
  const DepthMap d = png::read_depth(tmp.str("out/depth/lidar/one.png"));
  DepthMap expected(16, 20, 1, 0.0);
  expected(8, 10) = 5.0;
  EXPECT_EQ(d, expected);
  EXPECT_THROW(run("depth-from-cloud", tmp.path() / "c.json", Options{std::nullopt, std::nullopt, 4}), UsageError);
}

TEST_F(DepthFromCloud, WorkerCountDoesNotChangeOutput) {
  run("depth-from-cloud", tmp.path() / "c.json");
  const std::string one = read_file(tmp.path() / "out" / "depth" / "lidar" / "one.png");
  CommandResult r = run("depth-from-cloud", tmp.path() / "c.json", Options{3, std::nullopt, std::nullopt});
  EXPECT_EQ(read_file(tmp.path() / "out" / "depth" / "lidar" / "one.png"), one);
  EXPECT_EQ(r.status, 2);
}

// ---------------------------------------------------------------------------
// resize

TEST(Resize, SameWidthWritesPlannedSizes) {
  TempDir tmp("resize");
  write_synthetic_dataset(tmp.path() / "ds", 3, 2, 16);
  write_json(tmp.path() / "c.json", {{"output_dir", "out"},
                                     {"datasets", {{"synthetic", "ds/manifest.json"}}},
                                     {"main", "synthetic"},
                                     {"resize", {{"policy", "same_width"}, {"width", 24}}}});
  CommandResult r = run("resize", tmp.path() / "c.json");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("synthetic/s1000\t16x16\t24x24"), std::string::npos) << r.out;
  const LabelMap label = png::read_label(tmp.str("out/resized/synthetic/s1001_label.png"));
  EXPECT_EQ(label.height(), 24u);
  EXPECT_EQ(png::read_rgb(tmp.str("out/resized/synthetic/s1001_rgb.png")).width(), 24u);
  EXPECT_EQ(png::read_depth(tmp.str("out/resized/synthetic/s1001_depth.png")).height(), 24u);
}

TEST(Resize, MismatchedModalitiesNameTheSample) {
  TempDir tmp("resize_bad");
  write_synthetic_dataset(tmp.path() / "ds", 4, 2, 16);
  png::write_label(tmp.str("ds/images/s1001_label.png"), LabelMap(8, 16, 1, 0));
  write_json(tmp.path() / "c.json",
             {{"output_dir", "out"}, {"datasets", {{"synthetic", "ds/manifest.json"}}}, {"main", "synthetic"}});
  try {
    run("resize", tmp.path() / "c.json");
    ADD_FAILURE() << "no error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("synthetic/s1001"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// evaluate

TEST(Evaluate, PredictionsEqualToGroundTruthScoreOneHundred) {
  TempDir tmp("eval_gt");
  write_synthetic_dataset(tmp.path() / "ds", 5, 4, 16);
  write_json(tmp.path() / "c.json", {{"output_dir", "out"},
                                     {"datasets", {{"synthetic", "ds/manifest.json"}}},
                                     {"main", "synthetic"},
                                     {"evaluate", {{"predictions", "preds"}}}});
  for (int i = 0; i < 4; ++i) {
    const std::string id = "s" + std::to_string(1000 + i);
    fs::create_directories(tmp.path() / "preds");
    fs::copy_file(tmp.path() / "ds" / "images" / (id + "_label.png"), tmp.path() / "preds" / (id + ".png"));
  }
  CommandResult r = run("evaluate", tmp.path() / "c.json");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(read_file(tmp.path() / "out" / "eval.csv").find("mIoU,100.00\n"), std::string::npos);
  EXPECT_EQ(read_file(tmp.path() / "out" / "eval.md"), r.out);
}

TEST(Evaluate, HandCaseEndToEnd) {
  TempDir tmp("eval_hand");
  const fs::path cfg = write_pair_dataset(
      tmp.path(), {{LabelMap(1, 2, 1, std::vector<std::uint8_t>{0, 0}), LabelMap(1, 2, 1, std::vector<std::uint8_t>{0, 1})},
                   {LabelMap(1, 2, 1, std::vector<std::uint8_t>{1, 1}), LabelMap(1, 2, 1, std::vector<std::uint8_t>{1, 1})}});
  run("evaluate", cfg);
  EXPECT_EQ(read_file(tmp.path() / "out" / "eval.csv"), "class,iou\nroad,50.00\nsmall obstacle,66.67\nmIoU,58.33\n");
  const auto report = metrics::report_from_json(json::parse(read_file(tmp.path() / "out" / "eval.json")));
  EXPECT_DOUBLE_EQ(*report.miou, 7.0 / 12.0);
}

TEST(Evaluate, ExclusionRemovesClassFromMean) {
  TempDir tmp("eval_excl");
  const fs::path cfg = write_pair_dataset(
      tmp.path(), {{LabelMap(1, 4, 1, std::vector<std::uint8_t>{0, 0, 1, 1}), LabelMap(1, 4, 1, std::vector<std::uint8_t>{0, 1, 1, 1})}});
  run("evaluate", cfg);
  const auto all = metrics::report_from_json(json::parse(read_file(tmp.path() / "out" / "eval.json")));
  json j = json::parse(read_file(cfg));
  j["evaluate"]["exclude"] = {"Small Obstacle"};
  write_json(cfg, j);
  run("evaluate", cfg);
  const auto ex = metrics::report_from_json(json::parse(read_file(tmp.path() / "out" / "eval.json")));
  EXPECT_EQ(ex.status[1], metrics::ClassStatus::excluded);
  EXPECT_EQ(*ex.miou, *all.iou[0]);
  EXPECT_NE(*ex.miou, *all.miou);
  EXPECT_NE(read_file(tmp.path() / "out" / "eval.csv").find("small obstacle,excluded"), std::string::npos);
  j["evaluate"]["exclude"] = {"sky"};
  write_json(cfg, j);
  EXPECT_THROW(run("evaluate", cfg), UsageError);
}

TEST(Evaluate, SizeMismatchNamesTheSample) {
  TempDir tmp("eval_size");
  const fs::path cfg = write_pair_dataset(
      tmp.path(), {{LabelMap(2, 2, 1, 0), LabelMap(2, 2, 1, 0)}, {LabelMap(2, 2, 1, 0), LabelMap(2, 3, 1, 0)}});
  try {
    run("evaluate", cfg, Options{2, std::nullopt, std::nullopt});
    ADD_FAILURE() << "no error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("pairs/p1"), std::string::npos) << e.what();
  }
  fs::remove(tmp.path() / "preds" / "p1.png");
  EXPECT_THROW(run("evaluate", cfg), DataError);
}

TEST(Evaluate, WorkerCountsAgreeByteForByte) {
  TempDir tmp("eval_workers");
  auto scenes = write_synthetic_dataset(tmp.path() / "ds", 6, 12, 16);
  Rng rng(6);
  fs::create_directories(tmp.path() / "preds");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    LabelMap pred = scenes[i].label;
    for (auto& v : pred.data()) {
      if (rng.uniform() < 0.2) v = static_cast<std::uint8_t>(rng.index(3));
    }
    png::write_label(tmp.str("preds/s" + std::to_string(1000 + i) + ".png"), pred);
  }
  for (std::size_t w : {1, 2, 5}) {
    write_json(tmp.path() / "c.json", {{"output_dir", "out" + std::to_string(w)},
                                       {"datasets", {{"synthetic", "ds/manifest.json"}}},
                                       {"main", "synthetic"},
                                       {"evaluate", {{"predictions", "preds"}, {"split", "val"}}}});
    run("evaluate", tmp.path() / "c.json", Options{w, std::nullopt, std::nullopt});
  }
  for (const char* f : {"eval.csv", "eval.json", "eval.md"}) {
    const std::string one = read_file(tmp.path() / "out1" / f);
    EXPECT_FALSE(one.empty());
    EXPECT_EQ(read_file(tmp.path() / "out2" / f), one) << f;
    EXPECT_EQ(read_file(tmp.path() / "out5" / f), one) << f;
  }
}

// ---------------------------------------------------------------------------
// train-toy and report

namespace {

json tiny_train(const std::string& out, double lr = 0.1) {
  return {{"output_dir", out},
          {"train",
           {{"variants", {"fusion_add", "single_rgb"}},
            {"seed", 3},
            {"steps", 4},
            {"batch_size", 2},
            {"learning_rate", lr},
            {"stage_channels", {4, 4, 4}},
            {"input_h", 16},
            {"input_w", 16},
            {"spp_heights", {2, 1}},
            {"train_samples", 6},
            {"val_samples", 3}}}};
}

}  // namespace

TEST(TrainToy, WritesArtifactsDeterministically) {
  TempDir tmp("train");
  write_json(tmp.path() / "a.json", tiny_train("a"));
  write_json(tmp.path() / "b.json", tiny_train("b"));
  CommandResult ra = run("train-toy", tmp.path() / "a.json");
  run("train-toy", tmp.path() / "b.json");
  EXPECT_EQ(ra.status, 0);
  for (const char* f : {"fusion_add/loss.csv", "fusion_add/checkpoint.sgf", "fusion_add/eval.json",
                        "single_rgb/loss.csv", "single_rgb/checkpoint.sgf", "comparison.md", "comparison.csv"}) {
    const std::string a = read_file(tmp.path() / "a" / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(read_file(tmp.path() / "b" / f), a) << f;
  }
  const std::string log = read_file(tmp.path() / "a" / "fusion_add" / "loss.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
  const nn::Checkpoint ck = nn::load_checkpoint(tmp.str("a/fusion_add/checkpoint.sgf"));
  EXPECT_EQ(ck.config.variant, nn::Variant::fusion_add);
  EXPECT_EQ(ck.config.input_h, 16u);

  // A different seed changes the run.
  run("train-toy", tmp.path() / "b.json", Options{std::nullopt, 4, std::nullopt});
  EXPECT_NE(read_file(tmp.path() / "b" / "fusion_add" / "loss.csv"), log);
}

TEST(TrainToy, DivergenceKeepsLastGoodCheckpoint) {
  TempDir tmp("train_nan");
  write_json(tmp.path() / "c.json", tiny_train("out", 1e300));
  EXPECT_THROW(run("train-toy", tmp.path() / "c.json"), NumericalError);
  const nn::Checkpoint ck = nn::load_checkpoint(tmp.str("out/fusion_add/checkpoint.sgf"));
  ck.params.for_each([](const std::string& name, const Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) ASSERT_TRUE(std::isfinite(t[i])) << name;
  });
  const std::string log = read_file(tmp.path() / "out" / "fusion_add" / "loss.csv");
  EXPECT_EQ(log.rfind("step,loss\n0,", 0), 0u) << log;
}

TEST(Report, ComparesRunsAndRejectsMixedTaxonomies) {
  TempDir tmp("report");
  write_json(tmp.path() / "t.json", tiny_train("train"));
  run("train-toy", tmp.path() / "t.json");

  write_json(tmp.path() / "one.json", {{"output_dir", "one"}, {"report", {{"runs", {"train/fusion_add"}}}}});
  CommandResult one = run("report", tmp.path() / "one.json");
  EXPECT_EQ(read_file(tmp.path() / "one" / "report.md"),
            metrics::format_markdown(
                metrics::report_from_json(json::parse(read_file(tmp.path() / "train" / "fusion_add" / "eval.json"))),
                synthetic_class_names(), "fusion_add"));

  write_json(tmp.path() / "two.json",
             {{"output_dir", "two"}, {"report", {{"runs", {"train/fusion_add", "train/single_rgb/"}}}}});
  run("report", tmp.path() / "two.json");
  EXPECT_EQ(read_file(tmp.path() / "two" / "report.csv"), read_file(tmp.path() / "train" / "comparison.csv"));

  const fs::path cfg = write_pair_dataset(tmp.path() / "pairs", {{LabelMap(1, 1, 1, 0), LabelMap(1, 1, 1, 0)}});
  run("evaluate", cfg);
  write_json(tmp.path() / "mixed.json",
             {{"output_dir", "mixed"}, {"report", {{"runs", {"train/fusion_add", "pairs/out"}}}}});
  EXPECT_THROW(run("report", tmp.path() / "mixed.json"), DataError);

  write_json(tmp.path() / "missing.json",
             {{"output_dir", "m"}, {"report", {{"runs", {"nope1", "train/fusion_add", "nope2"}}}}});
  try {
    run("report", tmp.path() / "missing.json");
    ADD_FAILURE() << "no error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("nope1"), std::string::npos);
    EXPECT_NE(msg.find("nope2"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// The installed binary

TEST(Cli, ExitCodes) {
  TempDir tmp("cli");
  const std::string cli = SEGFUSE_CLI;
  auto status = [&](const std::string& args) {
    const int raw = std::system((cli + " " + args + " > " + tmp.str("log.txt") + " 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  write_json(tmp.path() / "ok.json", four_dataset_config("standard"));
  EXPECT_EQ(status("harmonize --config " + tmp.str("ok.json")), 0);
  EXPECT_NE(read_file(tmp.path() / "log.txt").find("rellis3d\t18\t+6"), std::string::npos);
  EXPECT_EQ(status(""), 1);
  EXPECT_EQ(status("harmonize"), 1);
  EXPECT_EQ(status("frobnicate --config " + tmp.str("ok.json")), 1);
  EXPECT_EQ(status("harmonize --config " + tmp.str("ok.json") + " --workers 0"), 1);
  EXPECT_EQ(status("evaluate --config " + tmp.str("ok.json")), 1);  // no evaluate section

  json missing = four_dataset_config("standard");
  missing["datasets"]["kitti"] = "nowhere.json";
  write_json(tmp.path() / "missing.json", missing);
  EXPECT_EQ(status("harmonize --config " + tmp.str("missing.json")), 2);
  EXPECT_EQ(status("harmonize --config " + tmp.str("absent.json")), 1);

  write_json(tmp.path() / "nan.json", tiny_train(tmp.str("nan"), 1e300));
  EXPECT_EQ(status("train-toy --config " + tmp.str("nan.json")), 3);
}
