#pragma once

// Multi-dataset resizing policies. RGB is resampled bilinearly; labels and
// depth use nearest neighbour so class ids and depth edges never blend.

#include <map>
#include <string>
#include <string_view>

#include "json.hpp"
#include "segfuse/error.hpp"
#include "segfuse/image.hpp"
#include "segfuse/taxonomy.hpp"

namespace segfuse::resize {

struct Size {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Size&) const = default;
};

enum class PolicyKind { original_size, same_width, size_warping };

struct ResizePolicy {
  PolicyKind kind = PolicyKind::original_size;
  Size target;  // same_width uses target.width only
  // Explicit sizes keyed by normalized dataset name; consulted by same_width
  // when the entry's width equals the policy width.
  std::map<std::string, Size> overrides;

  void validate() const {
    if (kind == PolicyKind::same_width && target.width == 0) throw UsageError("same_width needs a positive width");
    if (kind == PolicyKind::size_warping && (target.width == 0 || target.height == 0)) {
      throw UsageError("size_warping needs a positive height and width");
    }
    for (const auto& [name, s] : overrides) {
      if (s.height == 0 || s.width == 0) throw UsageError("size override for " + name + " must be positive");
    }
  }

  static ResizePolicy original_size() { return ResizePolicy{}; }
  static ResizePolicy same_width(std::size_t width, std::map<std::string, Size> overrides = {}) {
    return ResizePolicy{PolicyKind::same_width, Size{0, width}, std::move(overrides)};
  }
  static ResizePolicy size_warping(std::size_t height, std::size_t width) {
    return ResizePolicy{PolicyKind::size_warping, Size{height, width}, {}};
  }
};

// Published per-dataset sizes for the same-width policy at width 2048.
inline std::map<std::string, Size> default_overrides() {
  return {{"cityscapes", {1024, 2048}},
          {"lostandfound", {1024, 2048}},
          {"kitti", {622, 2048}},
          {"rellis3d", {1280, 2048}}};
}

inline Size plan_size(const ResizePolicy& policy, std::size_t in_h, std::size_t in_w, std::string_view dataset = {}) {
  if (in_h == 0 || in_w == 0) throw std::invalid_argument("plan_size: input size must be positive");
  switch (policy.kind) {
    case PolicyKind::original_size:
      return {in_h, in_w};
    case PolicyKind::size_warping:
      return policy.target;
    case PolicyKind::same_width: {
      const std::size_t w = policy.target.width;
      if (!dataset.empty()) {
        auto it = policy.overrides.find(taxonomy::normalize_name(dataset));
        if (it != policy.overrides.end() && it->second.width == w) return it->second;
      }
      // Nearest even height to in_h * w / in_w (ties round up), at least 2.
      const std::size_t half = (in_h * w + in_w) / (2 * in_w);
      return {std::max<std::size_t>(2, 2 * half), w};
    }
  }
  return {in_h, in_w};
}

inline std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::original_size: return "original_size";
    case PolicyKind::same_width: return "same_width";
    case PolicyKind::size_warping: return "size_warping";
  }
  return "?";
}

// {"policy": "original_size" | "same_width" | "size_warping", "height": H, "width": W,
//  "overrides": {"<dataset>": [H, W]}}. same_width without "overrides" gets the defaults.
inline ResizePolicy policy_from_json(const nlohmann::json& j) {
  ResizePolicy p;
  try {
    const std::string kind = j.at("policy").get<std::string>();
    if (kind == "original_size") {
      p.kind = PolicyKind::original_size;
    } else if (kind == "same_width") {
      p = ResizePolicy::same_width(j.at("width").get<std::size_t>(), default_overrides());
    } else if (kind == "size_warping") {
      p = ResizePolicy::size_warping(j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>());
    } else {
      throw UsageError("unknown resize policy '" + kind + "'");
    }
    if (j.contains("overrides")) {
      p.overrides.clear();
      for (const auto& [name, hw] : j.at("overrides").items()) {
        const auto v = hw.get<std::vector<std::size_t>>();
        if (v.size() != 2) throw UsageError("size override for " + name + " must be [height, width]");
        p.overrides[taxonomy::normalize_name(name)] = Size{v[0], v[1]};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("resize policy: ") + e.what());
  }
  p.validate();
  return p;
}

inline LabelMap resize_label(const LabelMap& label, Size s) { return resize_nearest(label, s.height, s.width); }
inline DepthMap resize_depth(const DepthMap& depth, Size s) { return resize_nearest(depth, s.height, s.width); }
inline RgbImage resize_rgb(const RgbImage& rgb, Size s) { return resize_bilinear(rgb, s.height, s.width); }

struct ImageSample {
  RgbImage rgb;
  DepthMap depth;
  LabelMap label;
};

inline ImageSample resize_sample(const ImageSample& in, Size out) {
  if (!in.rgb.same_size(in.depth) || !in.rgb.same_size(in.label)) {
    throw std::invalid_argument("resize_sample: rgb " + std::to_string(in.rgb.height()) + "x" +
                                std::to_string(in.rgb.width()) + ", depth " + std::to_string(in.depth.height()) +
                                "x" + std::to_string(in.depth.width()) + " and label " +
                                std::to_string(in.label.height()) + "x" + std::to_string(in.label.width()) +
                                " differ in size");
  }
  return ImageSample{resize_rgb(in.rgb, out), resize_depth(in.depth, out), resize_label(in.label, out)};
}

}  // namespace segfuse::resize
