#pragma once

// The commands behind the segfuse CLI. A pipeline config (JSON) points at one
// manifest per dataset; relative paths are resolved against the directory of
// the file that contains them, so fixture trees can be moved around freely.
//
// Every command writes under the config's output_dir, plus a run-<command>.json
// holding the config hash and versions. Nothing time- or host-dependent is
// written, so reruns overwrite outputs with identical bytes.

#include <png.h>

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "segfuse/error.hpp"
#include "segfuse/geometry.hpp"
#include "segfuse/metrics.hpp"
#include "segfuse/nn.hpp"
#include "segfuse/png_io.hpp"
#include "segfuse/resize.hpp"
#include "segfuse/synthetic.hpp"
#include "segfuse/taxonomy.hpp"

namespace segfuse::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Manifests

struct SampleRecord {
  std::string id;
  std::optional<fs::path> rgb, depth, cloud, calibration, label;
  std::string split;  // free-form; evaluate can filter on it
};

struct DatasetManifest {
  fs::path path;
  std::string dataset;
  fs::path classes;
  std::vector<SampleRecord> samples;
};

namespace detail {

inline std::string read_text(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(std::string("cannot open ") + what + " " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

// Creates the parent directory and returns the path as a string for the PNG writers.
inline std::string output_file(const fs::path& path) {
  fs::create_directories(path.parent_path());
  return path.string();
}

inline fs::path resolve(const fs::path& base_dir, const std::string& p) {
  const fs::path q(p);
  return (q.is_absolute() ? q : base_dir / q).lexically_normal();
}

inline void require_file(const fs::path& p, const std::string& context) {
  if (!fs::is_regular_file(p)) throw DataError(context + ": file not found: " + p.string());
}

// Re-throws data problems with the sample (or other) context prepended.
template <typename Fn>
auto with_context(const std::string& context, Fn&& fn) {
  try {
    return fn();
  } catch (const DataError& e) {
    throw DataError(context + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(context + ": " + e.what());
  }
}

}  // namespace detail

inline DatasetManifest parse_manifest(const nlohmann::json& j, const fs::path& path) {
  const fs::path dir = path.parent_path();
  DatasetManifest m;
  m.path = path;
  try {
    m.dataset = j.at("dataset").get<std::string>();
    m.classes = detail::resolve(dir, j.at("classes").get<std::string>());
    detail::require_file(m.classes, path.string() + ": class set");
    std::set<std::string> ids;
    const nlohmann::json samples = j.value("samples", nlohmann::json::array());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& sj = samples[i];
      SampleRecord s;
      auto field = [&](const char* key) -> std::optional<fs::path> {
        if (!sj.contains(key)) return std::nullopt;
        return detail::resolve(dir, sj.at(key).get<std::string>());
      };
      s.rgb = field("rgb");
      s.depth = field("depth");
      s.cloud = field("cloud");
      s.calibration = field("calibration");
      s.label = field("label");
      s.split = sj.value("split", "");
      if (sj.contains("id")) {
        s.id = sj.at("id").get<std::string>();
      } else {
        for (const auto* p : {&s.label, &s.rgb, &s.depth, &s.cloud}) {
          if (*p) {
            s.id = (*p)->stem().string();
            break;
          }
        }
      }
      const std::string where = path.string() + ": sample " + (s.id.empty() ? "#" + std::to_string(i) : s.id);
      if (s.id.empty() || s.id.find_first_of("/\\") != std::string::npos || s.id == "." || s.id == "..") {
        throw DataError(where + ": sample id must be a non-empty file name");
      }
      if (!ids.insert(s.id).second) throw DataError(where + ": duplicate sample id");
      if (s.depth.has_value() == s.cloud.has_value()) {
        throw DataError(where + ": needs exactly one depth source (\"depth\" or \"cloud\" + \"calibration\")");
      }
      if (s.cloud.has_value() != s.calibration.has_value()) {
        throw DataError(where + ": \"cloud\" and \"calibration\" go together");
      }
      for (const auto* p : {&s.rgb, &s.depth, &s.cloud, &s.calibration, &s.label}) {
        if (*p) detail::require_file(**p, where);
      }
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

inline DatasetManifest load_manifest(const fs::path& path) {
  const std::string text = detail::read_text(path, "manifest");
  try {
    return parse_manifest(nlohmann::json::parse(text), path);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pipeline config

struct TrainSettings {
  std::vector<nn::Variant> variants{nn::Variant::fusion_add};
  std::uint64_t seed = 1;
  std::size_t steps = 600;
  std::size_t batch_size = 4;
  double learning_rate = 0.1;
  std::vector<std::size_t> stage_channels{8, 16, 32};
  std::size_t input_h = 32, input_w = 32;
  std::vector<std::size_t> spp_heights{4, 2, 1};
  double depth_scale = 0.1;
  std::size_t train_samples = 200, val_samples = 50;

  nn::FusionNetConfig network(nn::Variant v) const {
    nn::FusionNetConfig c;
    c.variant = v;
    c.num_classes = synthetic::kClasses;
    c.stage_channels = stage_channels;
    c.input_h = input_h;
    c.input_w = input_w;
    c.spp_heights = spp_heights;
    c.depth_scale = depth_scale;
    return c;
  }

  void validate() const {
    if (variants.empty()) throw UsageError("train: no variants configured");
    if (steps == 0 || batch_size == 0) throw UsageError("train: steps and batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw UsageError("train: learning_rate must be positive");
    if (train_samples == 0 || val_samples == 0) throw UsageError("train: sample counts must be positive");
    for (auto v : variants) network(v).validate();
  }
};

struct EvaluateSettings {
  std::string dataset;  // empty: the main dataset
  fs::path predictions;
  std::string split;  // empty: every sample with a label
  std::vector<std::string> exclude;
};

struct PipelineConfig {
  fs::path path;
  std::string text;  // raw bytes, hashed into the run metadata
  fs::path output_dir;
  std::map<std::string, fs::path> manifests;  // normalized dataset name -> manifest
  std::string main;                           // normalized
  std::vector<std::string> supplements;       // normalized, merge order
  std::optional<fs::path> relations;
  taxonomy::Method method = taxonomy::Method::standard;
  resize::ResizePolicy resize;
  std::size_t depth_window = 7;
  std::optional<EvaluateSettings> evaluate;
  TrainSettings train;
  std::vector<fs::path> report_runs;

  // Main first, then supplements, then any other configured dataset by name.
  std::vector<std::string> dataset_order() const {
    std::vector<std::string> out;
    if (!main.empty()) out.push_back(main);
    out.insert(out.end(), supplements.begin(), supplements.end());
    for (const auto& [name, p] : manifests) {
      if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
    }
    return out;
  }
};

inline void validate_window(std::size_t window) {
  if (window == 0 || window % 2 == 0) throw UsageError("depth window must be odd and positive, got " + std::to_string(window));
}

inline PipelineConfig parse_config(const std::string& text, const fs::path& path) {
  PipelineConfig c;
  c.path = path;
  c.text = text;
  const fs::path dir = path.parent_path();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
  try {
    c.output_dir = detail::resolve(dir, j.at("output_dir").get<std::string>());
    const nlohmann::json datasets = j.value("datasets", nlohmann::json::object());
    for (const auto& [name, p] : datasets.items()) {
      const std::string key = taxonomy::normalize_name(name);
      if (!c.manifests.emplace(key, detail::resolve(dir, p.get<std::string>())).second) {
        throw UsageError("dataset '" + name + "' listed twice");
      }
    }
    if (j.contains("main")) c.main = taxonomy::normalize_name(j.at("main").get<std::string>());
    for (const auto& s : j.value("supplements", std::vector<std::string>{})) {
      c.supplements.push_back(taxonomy::normalize_name(s));
    }
    if (j.contains("relations")) c.relations = detail::resolve(dir, j.at("relations").get<std::string>());
    c.method = taxonomy::parse_method(j.value("method", "standard"));
    if (j.contains("resize")) c.resize = resize::policy_from_json(j.at("resize"));
    if (j.contains("depth")) c.depth_window = j.at("depth").value("window", std::size_t{7});

    if (j.contains("evaluate")) {
      const auto& e = j.at("evaluate");
      EvaluateSettings s;
      s.dataset = taxonomy::normalize_name(e.value("dataset", ""));
      s.predictions = detail::resolve(dir, e.at("predictions").get<std::string>());
      s.split = e.value("split", "");
      s.exclude = e.value("exclude", std::vector<std::string>{});
      c.evaluate = s;
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      TrainSettings& s = c.train;
      if (t.contains("variants")) {
        s.variants.clear();
        for (const auto& v : t.at("variants")) s.variants.push_back(nn::parse_variant(v.get<std::string>()));
      } else if (t.contains("variant")) {
        s.variants = {nn::parse_variant(t.at("variant").get<std::string>())};
      }
      s.seed = t.value("seed", s.seed);
      s.steps = t.value("steps", s.steps);
      s.batch_size = t.value("batch_size", s.batch_size);
      s.learning_rate = t.value("learning_rate", s.learning_rate);
      s.stage_channels = t.value("stage_channels", s.stage_channels);
      s.input_h = t.value("input_h", s.input_h);
      s.input_w = t.value("input_w", s.input_w);
      s.spp_heights = t.value("spp_heights", s.spp_heights);
      s.depth_scale = t.value("depth_scale", s.depth_scale);
      s.train_samples = t.value("train_samples", s.train_samples);
      s.val_samples = t.value("val_samples", s.val_samples);
    }
    if (j.contains("report")) {
      for (const auto& r : j.at("report").at("runs")) c.report_runs.push_back(detail::resolve(dir, r.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }

  if (!c.manifests.empty() && c.main.empty()) throw UsageError("config lists datasets but no \"main\" dataset");
  std::set<std::string> seen;
  for (const auto& name : c.dataset_order()) {
    if (!c.manifests.count(name)) throw UsageError("dataset '" + name + "' has no manifest under \"datasets\"");
    if (!seen.insert(name).second) throw UsageError("dataset '" + name + "' appears twice in main/supplements");
  }
  validate_window(c.depth_window);
  c.train.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  return parse_config(detail::read_text(path, "config"), path);
}

struct Options {
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> window;
};

// ---------------------------------------------------------------------------
// Shared plumbing

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline void write_run_metadata(const PipelineConfig& cfg, const std::string& command, const Options& opts) {
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(cfg.text)));
  nlohmann::json overrides = nlohmann::json::object();
  if (opts.workers) overrides["workers"] = *opts.workers;
  if (opts.seed) overrides["seed"] = *opts.seed;
  if (opts.window) overrides["window"] = *opts.window;
  const std::string json_version = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  const nlohmann::json meta{{"command", command},
                            {"config", cfg.path.filename().string()},
                            {"config_hash", std::string("fnv1a64:") + hash},
                            {"overrides", overrides},
                            {"versions", {{"segfuse", kVersion}, {"nlohmann_json", json_version},
                                          {"libpng", PNG_LIBPNG_VER_STRING}}}};
  detail::write_text(cfg.output_dir / ("run-" + command + ".json"), meta.dump(2) + "\n");
}

// Runs fn(index, worker) for every index on up to `workers` threads. Errors are
// collected per index and the first one in index order is re-thrown after all
// work has finished, so failures are reported deterministically.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&](std::size_t w) {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i, w);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::size_t worker_count(const Options& opts) {
  const std::size_t w = opts.workers.value_or(1);
  if (w == 0) throw UsageError("--workers must be positive");
  return w;
}

inline std::vector<DatasetManifest> load_manifests(const PipelineConfig& cfg) {
  if (cfg.manifests.empty()) throw UsageError(cfg.path.string() + ": no \"datasets\" configured");
  std::vector<DatasetManifest> out;
  for (const auto& name : cfg.dataset_order()) {
    DatasetManifest m = load_manifest(cfg.manifests.at(name));
    if (taxonomy::normalize_name(m.dataset) != name) {
      throw DataError(m.path.string() + ": manifest is for dataset '" + m.dataset + "', config expects '" + name + "'");
    }
    out.push_back(std::move(m));
  }
  return out;
}

struct Harmonized {
  std::vector<DatasetManifest> manifests;  // main, supplements, others
  taxonomy::MergeResult merge;
};

inline Harmonized harmonize_datasets(const PipelineConfig& cfg) {
  Harmonized h{load_manifests(cfg), {}};
  std::map<std::string, taxonomy::RelationDecl> relations;
  if (cfg.relations) {
    for (auto& [name, decl] : taxonomy::load_relations(cfg.relations->string())) {
      relations[taxonomy::normalize_name(name)] = std::move(decl);
    }
  }
  const taxonomy::ClassSet main = taxonomy::load_class_set(h.manifests[0].classes.string(), h.manifests[0].dataset);
  std::vector<taxonomy::Supplement> sups;
  for (std::size_t i = 1; i <= cfg.supplements.size(); ++i) {
    const auto& m = h.manifests[i];
    auto it = relations.find(cfg.supplements[i - 1]);
    sups.push_back({taxonomy::load_class_set(m.classes.string(), m.dataset),
                    it == relations.end() ? taxonomy::RelationDecl{} : it->second});
  }
  h.merge = taxonomy::merge(main, sups, cfg.method);
  return h;
}

inline std::string sample_name(const DatasetManifest& m, const SampleRecord& s) {
  return taxonomy::normalize_name(m.dataset) + "/" + s.id;
}

inline void write_eval_files(const fs::path& dir, const metrics::EvalReport& r, std::span<const std::string> names) {
  detail::write_text(dir / "eval.csv", metrics::format_csv(r, names));
  detail::write_text(dir / "eval.json", metrics::format_json(r, names));
  detail::write_text(dir / "eval.md", metrics::format_markdown(r, names));
}

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit status for conditions that are not
// exceptions (currently: skipped samples in depth-from-cloud).

// taxonomy.tsv, relabel_maps.tsv, growth.tsv and labels/<dataset>/<id>.png.
// A single-dataset config only echoes its taxonomy: the relabel map is the
// dataset's own id assignment and no label files are rewritten.
inline int cmd_harmonize(const PipelineConfig& cfg, const Options& opts, std::ostream& out, std::ostream&) {
  const Harmonized h = harmonize_datasets(cfg);
  std::ostringstream tax, maps;
  taxonomy::write_taxonomy(tax, h.merge.taxonomy);
  taxonomy::write_relabel_maps(maps, h.merge.maps);
  const std::string growth = taxonomy::class_count_report(h.merge);
  detail::write_text(cfg.output_dir / "taxonomy.tsv", tax.str());
  detail::write_text(cfg.output_dir / "relabel_maps.tsv", maps.str());
  detail::write_text(cfg.output_dir / "growth.tsv", growth);
  out << growth;

  struct Job {
    const DatasetManifest* manifest;
    const SampleRecord* sample;
  };
  std::vector<Job> jobs;
  if (!cfg.supplements.empty()) {
    for (std::size_t i = 0; i <= cfg.supplements.size(); ++i) {
      for (const auto& s : h.manifests[i].samples) {
        if (s.label) jobs.push_back({&h.manifests[i], &s});
      }
    }
  }
  parallel_for(jobs.size(), worker_count(opts), [&](std::size_t i, std::size_t) {
    const Job& job = jobs[i];
    const std::string name = sample_name(*job.manifest, *job.sample);
    detail::with_context(name, [&] {
      const LabelMap label = png::read_label(job.sample->label->string());
      png::write_label(detail::output_file(cfg.output_dir / "labels" / (name + ".png")),
                       taxonomy::relabel_image(label, h.merge.map_for(job.manifest->dataset)));
      return 0;
    });
  });
  out << "unified classes: " << h.merge.taxonomy.size() << " (" << taxonomy::to_string(cfg.method) << ")\n";
  out << "relabeled label maps: " << jobs.size() << "\n";
  write_run_metadata(cfg, "harmonize", opts);
  return 0;
}

// depth/<dataset>/<id>.png (16-bit millimeters) and coverage.tsv for every
// point-cloud sample. Samples that fail are skipped and reported; the exit
// status is 2 if any failed.
inline int cmd_depth_from_cloud(const PipelineConfig& cfg, const Options& opts, std::ostream& out,
                                std::ostream& err) {
  const std::size_t window = opts.window.value_or(cfg.depth_window);
  validate_window(window);
  const auto manifests = load_manifests(cfg);
  struct Job {
    const DatasetManifest* manifest;
    const SampleRecord* sample;
    std::string line, warning, failure;
  };
  std::vector<Job> jobs;
  for (const auto& m : manifests) {
    for (const auto& s : m.samples) {
      if (s.cloud) jobs.push_back({&m, &s, {}, {}, {}});
    }
  }
  if (jobs.empty()) err << "warning: no point-cloud samples in the configured datasets\n";
  parallel_for(jobs.size(), worker_count(opts), [&](std::size_t i, std::size_t) {
    Job& job = jobs[i];
    const std::string name = sample_name(*job.manifest, *job.sample);
    try {
      const geometry::PointCloud cloud = geometry::load_point_cloud(job.sample->cloud->string());
      const geometry::CameraModel cam = geometry::load_calibration(job.sample->calibration->string());
      const DepthMap sparse = geometry::project_cloud(cloud, cam);
      const DepthMap dense = geometry::densify_maxpool(sparse, window);
      const std::size_t dropped = png::write_depth(detail::output_file(cfg.output_dir / "depth" / (name + ".png")), dense);
      char buf[64];
      std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f", geometry::coverage(sparse), geometry::coverage(dense));
      job.line = name + buf;
      if (cloud.empty()) job.warning = "empty point cloud, wrote an all-zero depth map";
      if (dropped) job.warning = std::to_string(dropped) + " pixels beyond the 16-bit millimeter range were zeroed";
    } catch (const std::exception& e) {
      job.failure = e.what();
    }
  });
  std::string table = "sample\tprojected_coverage\tdense_coverage\n";
  std::size_t failed = 0;
  for (const auto& job : jobs) {
    const std::string name = sample_name(*job.manifest, *job.sample);
    if (!job.failure.empty()) {
      ++failed;
      err << "error: " << name << " skipped: " << job.failure << "\n";
      continue;
    }
    if (!job.warning.empty()) err << "warning: " << name << ": " << job.warning << "\n";
    table += job.line + "\n";
  }
  detail::write_text(cfg.output_dir / "coverage.tsv", table);
  out << table;
  if (failed) err << failed << " of " << jobs.size() << " samples failed\n";
  write_run_metadata(cfg, "depth-from-cloud", opts);
  return failed ? 2 : 0;
}

// resized/<dataset>/<id>_{rgb,label,depth}.png under the configured policy.
// Point-cloud samples use the depth written by depth-from-cloud when present.
inline int cmd_resize(const PipelineConfig& cfg, const Options& opts, std::ostream& out, std::ostream& err) {
  const auto manifests = load_manifests(cfg);
  struct Job {
    const DatasetManifest* manifest;
    const SampleRecord* sample;
    std::string line, note;
  };
  std::vector<Job> jobs;
  for (const auto& m : manifests) {
    for (const auto& s : m.samples) jobs.push_back({&m, &s, {}, {}});
  }
  parallel_for(jobs.size(), worker_count(opts), [&](std::size_t i, std::size_t) {
    Job& job = jobs[i];
    const SampleRecord& s = *job.sample;
    const std::string name = sample_name(*job.manifest, s);
    detail::with_context(name, [&] {
      std::optional<RgbImage> rgb;
      std::optional<LabelMap> label;
      std::optional<DepthMap> depth;
      if (s.rgb) rgb = png::read_rgb(s.rgb->string());
      if (s.label) label = png::read_label(s.label->string());
      fs::path depth_path = s.depth ? *s.depth : cfg.output_dir / "depth" / (name + ".png");
      if (fs::is_regular_file(depth_path)) {
        depth = png::read_depth(depth_path.string());
      } else {
        job.note = "no densified depth yet; run depth-from-cloud first";
      }
      std::optional<resize::Size> in;
      auto check = [&](const char* what, std::size_t h, std::size_t w) {
        if (!in) {
          in = resize::Size{h, w};
        } else if (in->height != h || in->width != w) {
          throw DataError(std::string(what) + " is " + std::to_string(h) + "x" + std::to_string(w) + ", expected " +
                          std::to_string(in->height) + "x" + std::to_string(in->width));
        }
      };
      if (rgb) check("rgb", rgb->height(), rgb->width());
      if (label) check("label", label->height(), label->width());
      if (depth) check("depth", depth->height(), depth->width());
      if (!in) throw DataError("nothing to resize");
      const resize::Size to = resize::plan_size(cfg.resize, in->height, in->width, job.manifest->dataset);
      const fs::path base = cfg.output_dir / "resized" / name;
      fs::create_directories(base.parent_path());
      if (rgb) png::write_rgb(base.string() + "_rgb.png", resize::resize_rgb(*rgb, to));
      if (label) png::write_label(base.string() + "_label.png", resize::resize_label(*label, to));
      if (depth) png::write_depth(base.string() + "_depth.png", resize::resize_depth(*depth, to));
      job.line = name + "\t" + std::to_string(in->height) + "x" + std::to_string(in->width) + "\t" +
                 std::to_string(to.height) + "x" + std::to_string(to.width);
      return 0;
    });
  });
  std::string table = "sample\tinput\toutput\n";
  for (const auto& job : jobs) {
    if (!job.note.empty()) err << "note: " << sample_name(*job.manifest, *job.sample) << ": " << job.note << "\n";
    table += job.line + "\n";
  }
  detail::write_text(cfg.output_dir / "resize.tsv", table);
  out << "policy " << resize::to_string(cfg.resize.kind) << "\n" << table;
  write_run_metadata(cfg, "resize", opts);
  return 0;
}

// eval.{csv,json,md}: ground truth is the manifest label relabeled into the
// unified taxonomy; predictions are <predictions>/<sample id>.png in unified ids.
// Each worker owns a confusion matrix; the matrices are merged at the end,
// which makes the result independent of the worker count.
inline int cmd_evaluate(const PipelineConfig& cfg, const Options& opts, std::ostream& out, std::ostream&) {
  if (!cfg.evaluate) throw UsageError(cfg.path.string() + ": no \"evaluate\" section");
  const EvaluateSettings& es = *cfg.evaluate;
  const Harmonized h = harmonize_datasets(cfg);
  const std::string dataset = es.dataset.empty() ? cfg.main : es.dataset;
  const DatasetManifest* manifest = nullptr;
  for (const auto& m : h.manifests) {
    if (taxonomy::normalize_name(m.dataset) == dataset) manifest = &m;
  }
  if (!manifest) throw UsageError("evaluate: dataset '" + dataset + "' is not configured");
  const std::size_t merged = 1 + cfg.supplements.size();
  if (manifest < h.manifests.data() || manifest >= h.manifests.data() + merged) {
    throw UsageError("evaluate: dataset '" + dataset + "' is not part of the harmonized taxonomy");
  }
  const taxonomy::RelabelMap& map = h.merge.map_for(manifest->dataset);
  const auto& tax = h.merge.taxonomy;

  std::set<std::size_t> excluded;
  for (const auto& name : es.exclude) {
    auto id = tax.find(name);
    if (!id) throw UsageError("evaluate: excluded class '" + name + "' is not in the taxonomy");
    excluded.insert(*id);
  }
  std::vector<const SampleRecord*> samples;
  for (const auto& s : manifest->samples) {
    if (s.label && (es.split.empty() || s.split == es.split)) samples.push_back(&s);
  }
  if (samples.empty()) throw DataError("evaluate: no labeled samples in " + manifest->path.string());

  const std::size_t workers = worker_count(opts);
  std::vector<metrics::ConfusionMatrix> partial(workers, metrics::ConfusionMatrix(tax.size()));
  parallel_for(samples.size(), workers, [&](std::size_t i, std::size_t w) {
    const SampleRecord& s = *samples[i];
    detail::with_context("sample " + sample_name(*manifest, s), [&] {
      const LabelMap gt = taxonomy::relabel_image(png::read_label(s.label->string()), map);
      const fs::path pred_path = es.predictions / (s.id + ".png");
      detail::require_file(pred_path, "prediction");
      metrics::accumulate(partial[w], png::read_label(pred_path.string()), gt);
      return 0;
    });
  });
  metrics::ConfusionMatrix total(tax.size());
  for (const auto& p : partial) total = metrics::merge_confusion(total, p);

  const metrics::EvalReport report = metrics::iou_scores(total, excluded);
  const auto names = tax.names();
  write_eval_files(cfg.output_dir, report, names);
  out << metrics::format_markdown(report, names);
  write_run_metadata(cfg, "evaluate", opts);
  return 0;
}

inline std::vector<std::string> synthetic_class_names() { return {"background", "marker", "ghost"}; }

inline metrics::EvalReport evaluate_network(const nn::FusionNetConfig& cfg, const nn::NetworkParams& params,
                                            std::span<const nn::Sample> samples) {
  NoTapeScope no_tape;
  metrics::ConfusionMatrix conf(cfg.num_classes);
  for (const auto& s : samples) {
    metrics::accumulate(conf, nn::predict(nn::forward(cfg, params, s.rgb, s.depth), cfg.conflict_indices, nn::Mode::test),
                        s.label);
  }
  return metrics::iou_scores(conf);
}

// Per variant: <variant>/checkpoint.sgf, loss.csv and eval.{csv,json,md} on
// held-out scenes; with several variants also comparison.{md,csv}. Every
// variant sees the same scenes, initialization seed and batch order.
inline int cmd_train_toy(const PipelineConfig& cfg, const Options& opts, std::ostream& out, std::ostream& err) {
  const TrainSettings& ts = cfg.train;
  const std::uint64_t seed = opts.seed.value_or(ts.seed);
  synthetic::SceneOptions scene;
  scene.height = ts.input_h;
  scene.width = ts.input_w;
  const auto train_scenes = synthetic::make_scenes(seed, ts.train_samples, scene);
  const auto val_scenes = synthetic::make_scenes(seed + 1, ts.val_samples, scene);
  const auto names = synthetic_class_names();

  std::vector<metrics::NamedReport> rows;
  for (const nn::Variant variant : ts.variants) {
    const nn::FusionNetConfig net = ts.network(variant);
    std::vector<nn::Sample> train, val;
    for (const auto& s : train_scenes) train.push_back(nn::make_sample(s.rgb, s.depth, s.label, net.depth_scale));
    for (const auto& s : val_scenes) val.push_back(nn::make_sample(s.rgb, s.depth, s.label, net.depth_scale));

    const fs::path dir = cfg.output_dir / nn::to_string(variant);
    fs::create_directories(dir);
    nn::NetworkParams params = nn::init_params(net, seed + 2);
    Rng batches(seed + 3);
    std::string log = "step,loss\n";
    double loss = 0.0;
    for (std::size_t step = 0; step < ts.steps; ++step) {
      std::vector<nn::Sample> batch;
      for (std::size_t b = 0; b < ts.batch_size; ++b) batch.push_back(train[batches.index(train.size())]);
      try {
        loss = nn::train_step(net, params, batch, ts.learning_rate);
      } catch (const NumericalError& e) {
        // train_step leaves params untouched on failure: they are the last good state.
        nn::save_checkpoint((dir / "checkpoint.sgf").string(), net, params);
        detail::write_text(dir / "loss.csv", log);
        err << "error: " << nn::to_string(variant) << " diverged at step " << step
            << "; kept the last good checkpoint\n";
        throw NumericalError(nn::to_string(variant) + ", step " + std::to_string(step) + ": " + e.what());
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", step, loss);
      log += buf;
    }
    nn::save_checkpoint((dir / "checkpoint.sgf").string(), net, params);
    detail::write_text(dir / "loss.csv", log);
    const metrics::EvalReport report = evaluate_network(net, params, val);
    write_eval_files(dir, report, names);
    out << nn::to_string(variant) << ": final loss " << loss << ", validation mIoU " << metrics::miou_cell(report)
        << "\n";
    rows.push_back({nn::to_string(variant), report});
  }
  if (rows.size() > 1) {
    detail::write_text(cfg.output_dir / "comparison.md", metrics::format_markdown(rows, names));
    detail::write_text(cfg.output_dir / "comparison.csv", metrics::format_csv(rows, names));
  }
  out << metrics::format_markdown(rows, names);
  write_run_metadata(cfg, "train-toy", opts);
  return 0;
}

// report.{md,csv}: one row per run directory (each holding an eval.json), all
// of which must share one taxonomy.
inline int cmd_report(const PipelineConfig& cfg, const Options& opts, std::ostream& out, std::ostream&) {
  if (cfg.report_runs.empty()) throw UsageError(cfg.path.string() + ": no \"report\" runs configured");
  std::vector<std::string> missing;
  for (const auto& dir : cfg.report_runs) {
    if (!fs::is_regular_file(dir / "eval.json")) missing.push_back(dir.string());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("report: missing run directories (no eval.json): " + list);
  }
  std::vector<metrics::NamedReport> rows;
  std::vector<std::string> names;
  for (const auto& dir : cfg.report_runs) {
    const fs::path file = dir / "eval.json";
    std::vector<std::string> run_names;
    metrics::EvalReport r;
    try {
      r = metrics::report_from_json(nlohmann::json::parse(detail::read_text(file, "report")), &run_names);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(file.string() + ": " + e.what());
    }
    if (rows.empty()) {
      names = run_names;
    } else if (run_names != names) {
      throw DataError("report: " + dir.string() + " uses a different taxonomy than " + cfg.report_runs[0].string());
    }
    const fs::path clean = dir.lexically_normal();
    std::string label = (clean.has_filename() ? clean : clean.parent_path()).filename().string();
    rows.push_back({label, std::move(r)});
  }
  detail::write_text(cfg.output_dir / "report.md", metrics::format_markdown(rows, names));
  detail::write_text(cfg.output_dir / "report.csv", metrics::format_csv(rows, names));
  out << metrics::format_markdown(rows, names);
  write_run_metadata(cfg, "report", opts);
  return 0;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"harmonize", "depth-from-cloud", "resize", "evaluate", "train-toy", "report"};
  return names;
}

inline int run_command(const std::string& command, const PipelineConfig& cfg, const Options& opts, std::ostream& out,
                       std::ostream& err) {
  if (command == "harmonize") return cmd_harmonize(cfg, opts, out, err);
  if (command == "depth-from-cloud") return cmd_depth_from_cloud(cfg, opts, out, err);
  if (command == "resize") return cmd_resize(cfg, opts, out, err);
  if (command == "evaluate") return cmd_evaluate(cfg, opts, out, err);
  if (command == "train-toy") return cmd_train_toy(cfg, opts, out, err);
  if (command == "report") return cmd_report(cfg, opts, out, err);
  throw UsageError("unknown command '" + command + "'");
}

}  // namespace segfuse::pipeline
