#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "segfuse/image.hpp"
#include "segfuse/png_io.hpp"
#include "segfuse/random.hpp"
#include "segfuse/synthetic.hpp"
#include "segfuse/tensor.hpp"

namespace segfuse::testing {

// Values in [-1, 1] kept at least `gap` away from 0 so relu kinks stay out of
// reach of finite-difference steps.
inline Tensor random_tensor(Rng& rng, Shape shape, double gap = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::abs(v) < gap);
  }
  return t;
}

inline LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t n, double ignore_fraction = 0.0) {
  LabelMap m(h, w, 1);
  for (auto& v : m.data()) {
    v = rng.uniform() < ignore_fraction ? kIgnoreId : static_cast<std::uint8_t>(rng.index(n));
  }
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("segfuse_" + tag + "_" + std::to_string(rng.bits() % 1000000));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel = "") const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path, std::ios::binary) << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_file(path, j.dump(2)); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// A "synthetic" dataset on disk: classes.tsv, PNGs under images/ and a
// manifest.json listing every scene as a val sample.
inline std::vector<synthetic::Scene> write_synthetic_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                                                             std::size_t count, std::size_t size = 16) {
  synthetic::SceneOptions o;
  o.height = o.width = size;
  auto scenes = synthetic::make_scenes(seed, count, o);
  write_file(dir / "classes.tsv", "0\tbackground\n1\tmarker\n2\tghost\n");
  nlohmann::json samples = nlohmann::json::array();
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string id = "s" + std::to_string(1000 + i);
    png::write_rgb((dir / "images" / (id + "_rgb.png")).string(), scenes[i].rgb);
    png::write_depth((dir / "images" / (id + "_depth.png")).string(), scenes[i].depth);
    png::write_label((dir / "images" / (id + "_label.png")).string(), scenes[i].label);
    samples.push_back({{"id", id},
                       {"rgb", "images/" + id + "_rgb.png"},
                       {"depth", "images/" + id + "_depth.png"},
                       {"label", "images/" + id + "_label.png"},
                       {"split", "val"}});
  }
  write_json(dir / "manifest.json", {{"dataset", "synthetic"}, {"classes", "classes.tsv"}, {"samples", samples}});
  return scenes;
}

}  // namespace segfuse::testing
