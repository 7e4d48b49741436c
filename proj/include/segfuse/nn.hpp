#pragma once

// Two-branch RGB-D fusion segmentation network at toy scale.
//
//   encoder: per stage, 3x3 stride-2 conv + relu in each branch, an SE block
//            per branch, then fusion (add, or concat + 1x1 reduce)
//   SPP:     average pooling to a few heights, bilinear back, concat, 1x1 conv
//   decoder: per stage, bilinear x2, add a 1x1-projected skip, 3x3 conv + relu
//   head:    1x1 classifier to n logits, (masked) softmax per pixel
//
// The fused output of each stage feeds the next RGB-branch stage; the depth
// branch runs on its own features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "segfuse/bytes.hpp"
#include "segfuse/error.hpp"
#include "segfuse/image.hpp"
#include "segfuse/random.hpp"
#include "segfuse/tensor.hpp"

namespace segfuse::nn {

enum class Variant { single_rgb, rgbd_stack, fusion_concat, fusion_add, rgb_rgb_add };

inline constexpr Variant kAllVariants[] = {Variant::single_rgb, Variant::rgbd_stack, Variant::fusion_concat,
                                           Variant::fusion_add, Variant::rgb_rgb_add};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::single_rgb: return "single_rgb";
    case Variant::rgbd_stack: return "rgbd_stack";
    case Variant::fusion_concat: return "fusion_concat";
    case Variant::fusion_add: return "fusion_add";
    case Variant::rgb_rgb_add: return "rgb_rgb_add";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  throw UsageError("unknown network variant '" + std::string(s) + "'");
}

inline bool has_depth_branch(Variant v) {
  return v == Variant::fusion_add || v == Variant::fusion_concat || v == Variant::rgb_rgb_add;
}

struct FusionNetConfig {
  Variant variant = Variant::fusion_add;
  std::size_t num_classes = 3;
  std::vector<std::size_t> stage_channels{8, 16, 32};
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::vector<std::size_t> conflict_indices;  // sorted, unique
  int eta = 1;                                // applied by train_step
  std::vector<std::size_t> spp_heights{4, 2, 1};
  double depth_scale = 0.01;  // meters -> network input

  std::size_t stages() const { return stage_channels.size(); }
  std::size_t spp_h() const { return input_h >> stages(); }
  std::size_t spp_w() const { return input_w >> stages(); }

  std::size_t rgb_in_channels() const { return variant == Variant::rgbd_stack ? 4 : 3; }
  std::size_t depth_in_channels() const { return variant == Variant::rgb_rgb_add ? 3 : 1; }

  void validate() const {
    if (num_classes == 0 || num_classes >= kIgnoreId) throw UsageError("num_classes must lie in [1, 254]");
    if (stage_channels.size() < 2) throw UsageError("at least two encoder stages are required");
    for (auto c : stage_channels) {
      if (c == 0) throw UsageError("stage channel counts must be positive");
    }
    const std::size_t stride = std::size_t{1} << stages();
    if (input_h == 0 || input_w == 0 || input_h % stride != 0 || input_w % stride != 0) {
      throw UsageError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                       " is not divisible by the total stride " + std::to_string(stride));
    }
    for (std::size_t i = 0; i < conflict_indices.size(); ++i) {
      if (conflict_indices[i] >= num_classes) throw UsageError("conflict index out of range");
      if (i > 0 && conflict_indices[i] <= conflict_indices[i - 1]) {
        throw UsageError("conflict indices must be sorted and unique");
      }
    }
    if (eta != 0 && eta != 1) throw UsageError("eta must be 0 or 1");
    if (spp_heights.empty()) throw UsageError("at least one SPP pooling height is required");
    for (auto h : spp_heights) {
      if (h == 0 || h > spp_h()) {
        throw UsageError("SPP pooling height " + std::to_string(h) + " exceeds SPP input height " +
                         std::to_string(spp_h()));
      }
    }
    if (!(depth_scale > 0.0) || !std::isfinite(depth_scale)) throw UsageError("depth_scale must be positive");
  }
};

inline nlohmann::json to_json(const FusionNetConfig& c) {
  return nlohmann::json{{"variant", to_string(c.variant)},   {"num_classes", c.num_classes},
                        {"stage_channels", c.stage_channels}, {"input_h", c.input_h},
                        {"input_w", c.input_w},               {"conflict_indices", c.conflict_indices},
                        {"eta", c.eta},                       {"spp_heights", c.spp_heights},
                        {"depth_scale", c.depth_scale}};
}

inline FusionNetConfig config_from_json(const nlohmann::json& j) {
  FusionNetConfig c;
  try {
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
    c.input_h = j.at("input_h").get<std::size_t>();
    c.input_w = j.at("input_w").get<std::size_t>();
    c.conflict_indices = j.at("conflict_indices").get<std::vector<std::size_t>>();
    c.eta = j.at("eta").get<int>();
    c.spp_heights = j.at("spp_heights").get<std::vector<std::size_t>>();
    c.depth_scale = j.at("depth_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

struct ConvParams {
  Tensor weight;  // C_out x C_in x k x k
  Tensor bias;    // C_out
};

// Channel gate: global mean pool -> 1x1 conv -> sigmoid -> per-channel scale.
struct SEBlockParams {
  Tensor conv_weights;  // C x C x 1 x 1
  Tensor conv_bias;     // C
};

struct NetworkParams {
  std::vector<ConvParams> rgb_stages;
  std::vector<ConvParams> depth_stages;
  std::vector<SEBlockParams> rgb_se;
  std::vector<SEBlockParams> depth_se;
  std::vector<ConvParams> fusion_reduce;  // fusion_concat only
  ConvParams spp_fuse;
  std::vector<ConvParams> skip_proj;  // decoder order
  std::vector<ConvParams> decoder;
  ConvParams classifier;

  // f(name, tensor) over every parameter in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t tensor_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor&) { ++n; });
    return n;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    auto convs = [&](auto& list, const std::string& name) {
      for (std::size_t i = 0; i < list.size(); ++i) {
        f(name + "." + std::to_string(i) + ".weight", list[i].weight);
        f(name + "." + std::to_string(i) + ".bias", list[i].bias);
      }
    };
    auto ses = [&](auto& list, const std::string& name) {
      for (std::size_t i = 0; i < list.size(); ++i) {
        f(name + "." + std::to_string(i) + ".weight", list[i].conv_weights);
        f(name + "." + std::to_string(i) + ".bias", list[i].conv_bias);
      }
    };
    convs(self.rgb_stages, "rgb_stages");
    convs(self.depth_stages, "depth_stages");
    ses(self.rgb_se, "rgb_se");
    ses(self.depth_se, "depth_se");
    convs(self.fusion_reduce, "fusion_reduce");
    f(std::string("spp_fuse.weight"), self.spp_fuse.weight);
    f(std::string("spp_fuse.bias"), self.spp_fuse.bias);
    convs(self.skip_proj, "skip_proj");
    convs(self.decoder, "decoder");
    f(std::string("classifier.weight"), self.classifier.weight);
    f(std::string("classifier.bias"), self.classifier.bias);
  }
};

namespace detail {

inline ConvParams zero_conv(std::size_t cout, std::size_t cin, std::size_t k) {
  return ConvParams{Tensor::zeros(Shape{cout, cin, k, k}), Tensor::zeros(Shape{cout})};
}

inline SEBlockParams zero_se(std::size_t c) {
  return SEBlockParams{Tensor::zeros(Shape{c, c, 1, 1}), Tensor::zeros(Shape{c})};
}

// Decoder stage j maps decoder_in(j) channels to decoder_out(j).
inline std::size_t decoder_out(const FusionNetConfig& cfg, std::size_t j) {
  const auto& sc = cfg.stage_channels;
  return j + 2 <= sc.size() ? sc[sc.size() - 2 - j] : sc[0];
}

inline std::size_t decoder_in(const FusionNetConfig& cfg, std::size_t j) {
  return j == 0 ? cfg.stage_channels.back() : decoder_out(cfg, j - 1);
}

// Channels of the skip feature consumed by decoder stage j.
inline std::size_t skip_channels(const FusionNetConfig& cfg, std::size_t j) {
  const std::size_t s = cfg.stages();
  return j + 1 < s ? cfg.stage_channels[s - 2 - j] : cfg.rgb_in_channels();
}

}  // namespace detail

// All-zero parameters with the shapes implied by cfg.
inline NetworkParams zero_params(const FusionNetConfig& cfg) {
  cfg.validate();
  NetworkParams p;
  const auto& sc = cfg.stage_channels;
  std::size_t rgb_in = cfg.rgb_in_channels();
  std::size_t depth_in = cfg.depth_in_channels();
  for (std::size_t s = 0; s < sc.size(); ++s) {
    p.rgb_stages.push_back(detail::zero_conv(sc[s], rgb_in, 3));
    p.rgb_se.push_back(detail::zero_se(sc[s]));
    if (has_depth_branch(cfg.variant)) {
      p.depth_stages.push_back(detail::zero_conv(sc[s], depth_in, 3));
      p.depth_se.push_back(detail::zero_se(sc[s]));
    }
    if (cfg.variant == Variant::fusion_concat) p.fusion_reduce.push_back(detail::zero_conv(sc[s], 2 * sc[s], 1));
    rgb_in = sc[s];
    depth_in = sc[s];
  }
  const std::size_t c = sc.back();
  p.spp_fuse = detail::zero_conv(c, c * (1 + cfg.spp_heights.size()), 1);
  for (std::size_t j = 0; j < sc.size(); ++j) {
    p.skip_proj.push_back(detail::zero_conv(detail::decoder_in(cfg, j), detail::skip_channels(cfg, j), 1));
    p.decoder.push_back(detail::zero_conv(detail::decoder_out(cfg, j), detail::decoder_in(cfg, j), 3));
  }
  p.classifier = detail::zero_conv(cfg.num_classes, sc[0], 1);
  return p;
}

// Uniform in +-1/sqrt(fan_in) for weights and biases alike.
inline NetworkParams init_params(const FusionNetConfig& cfg, std::uint64_t seed) {
  NetworkParams p = zero_params(cfg);
  Rng rng(seed);
  std::size_t fan_in = 1;
  // Each bias follows its weight, so it reuses that weight's fan-in.
  p.for_each([&](const std::string&, Tensor& t) {
    if (t.rank() == 4) fan_in = t.dim(1) * t.dim(2) * t.dim(3);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  });
  return p;
}

inline Tensor conv(const Tensor& x, const ConvParams& p, std::size_t stride = 1) {
  const std::size_t pad = p.weight.dim(2) == 3 ? 1 : 0;
  return conv2d(x, p.weight, p.bias, stride, pad);
}

inline Tensor se_block(const Tensor& x, const SEBlockParams& p) {
  if (x.rank() != 3 || p.conv_weights.rank() != 4 || x.dim(0) != p.conv_weights.dim(0) ||
      p.conv_weights.dim(0) != p.conv_weights.dim(1)) {
    throw std::invalid_argument("se_block: input " + shape_string(x.shape()) + " does not match SE weights " +
                                shape_string(p.conv_weights.shape()));
  }
  const Tensor gate = sigmoid(conv2d(reduce_mean_spatial(x), p.conv_weights, p.conv_bias));
  return mul(x, gate);
}

struct EncoderOutput {
  Tensor fused;               // SPP input
  std::vector<Tensor> skips;  // shallow to deep: branch input, then stages 1..S-1
};

inline EncoderOutput encoder_forward(const Tensor& rgb, const Tensor& depth, const FusionNetConfig& cfg,
                                     const NetworkParams& params) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3 || rgb.dim(1) != cfg.input_h || rgb.dim(2) != cfg.input_w) {
    throw std::invalid_argument("encoder: RGB input " + shape_string(rgb.shape()) + " does not match 3x" +
                                std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));
  }
  const std::size_t stride = std::size_t{1} << cfg.stages();
  if (rgb.dim(1) % stride != 0 || rgb.dim(2) % stride != 0) {
    throw std::invalid_argument("encoder: input size not divisible by total stride");
  }
  const bool needs_depth = cfg.variant != Variant::single_rgb && cfg.variant != Variant::rgb_rgb_add;
  if (needs_depth && (depth.rank() != 3 || depth.dim(0) != 1 || depth.dim(1) != rgb.dim(1) ||
                      depth.dim(2) != rgb.dim(2))) {
    throw std::invalid_argument("encoder: depth input " + shape_string(depth.shape()) + " does not match RGB size");
  }

  Tensor x = cfg.variant == Variant::rgbd_stack ? concat_channels({rgb, depth}) : rgb;
  Tensor d;
  if (cfg.variant == Variant::rgb_rgb_add) {
    d = rgb;
  } else if (has_depth_branch(cfg.variant)) {
    d = depth;
  }

  EncoderOutput out;
  out.skips.push_back(x);
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    Tensor r = se_block(relu(conv(x, params.rgb_stages[s], 2)), params.rgb_se[s]);
    if (has_depth_branch(cfg.variant)) {
      d = relu(conv(d, params.depth_stages[s], 2));
      Tensor dse = se_block(d, params.depth_se[s]);
      if (cfg.variant == Variant::fusion_concat) {
        x = conv(concat_channels({r, dse}), params.fusion_reduce[s]);
      } else {
        x = add(r, dse);
      }
    } else {
      x = std::move(r);
    }
    if (s + 1 < cfg.stages()) out.skips.push_back(x);
  }
  out.fused = std::move(x);
  return out;
}

struct SppPyramid {
  std::vector<Tensor> pooled;  // one per configured height
  Tensor concat;               // input followed by each upsampled branch
};

inline SppPyramid spp_pyramid(const Tensor& input, std::span<const std::size_t> heights) {
  if (input.rank() != 3) throw std::invalid_argument("spp: expected C x H x W input");
  const std::size_t h = input.dim(1), w = input.dim(2);
  SppPyramid out;
  std::vector<Tensor> parts{input};
  for (auto ph : heights) {
    if (ph == 0 || ph > h) {
      throw std::invalid_argument("spp: pooling height " + std::to_string(ph) + " exceeds input height " +
                                  std::to_string(h));
    }
    out.pooled.push_back(avg_pool_to_grid(input, ph));
    parts.push_back(bilinear_resize(out.pooled.back(), h, w));
  }
  out.concat = concat_channels(parts);
  return out;
}

inline Tensor spp_forward(const Tensor& input, std::span<const std::size_t> heights, const ConvParams& fuse) {
  return conv(spp_pyramid(input, heights).concat, fuse);
}

inline Tensor decoder_forward(const Tensor& spp_out, std::span<const Tensor> skips, const NetworkParams& params) {
  if (skips.size() != params.decoder.size() || params.skip_proj.size() != params.decoder.size()) {
    throw std::invalid_argument("decoder: " + std::to_string(skips.size()) + " skips for " +
                                std::to_string(params.decoder.size()) + " decoder stages");
  }
  Tensor x = spp_out;
  for (std::size_t j = 0; j < params.decoder.size(); ++j) {
    const Tensor& skip = skips[skips.size() - 1 - j];
    x = bilinear_resize(x, x.dim(1) * 2, x.dim(2) * 2);
    if (skip.rank() != 3 || skip.dim(1) != x.dim(1) || skip.dim(2) != x.dim(2)) {
      throw std::invalid_argument("decoder: skip " + shape_string(skip.shape()) + " does not match upsampled " +
                                  shape_string(x.shape()));
    }
    x = add(x, conv(skip, params.skip_proj[j]));
    x = relu(conv(x, params.decoder[j]));
  }
  return conv(x, params.classifier);
}

// Logits n x H x W at the input resolution.
inline Tensor forward(const FusionNetConfig& cfg, const NetworkParams& params, const Tensor& rgb,
                      const Tensor& depth) {
  EncoderOutput enc = encoder_forward(rgb, depth, cfg, params);
  Tensor spp = spp_forward(enc.fused, cfg.spp_heights, params.spp_fuse);
  return decoder_forward(spp, enc.skips, params);
}

// ---------------------------------------------------------------------------
// Softmax heads

// Per pixel a_L = m_L e^{z_L} / sum_i e^{z_i}, m_L = eta for L in conflict and
// 1 otherwise. The denominator always spans every class.
inline Tensor masked_softmax(const Tensor& logits, std::span<const std::size_t> conflict, int eta) {
  if (logits.rank() != 3) throw std::invalid_argument("softmax: expected n x H x W logits");
  if (eta != 0 && eta != 1) throw std::invalid_argument("softmax: eta must be 0 or 1");
  const std::size_t n = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  std::vector<double> mask(n, 1.0);
  for (auto c : conflict) {
    if (c >= n) throw std::invalid_argument("softmax: conflict index out of range");
    mask[c] = static_cast<double>(eta);
  }
  Tensor out(logits.shape());
  std::vector<double> soft(logits.numel());
  for (std::size_t p = 0; p < plane; ++p) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) m = std::max(m, logits[c * plane + p]);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      soft[c * plane + p] = std::exp(logits[c * plane + p] - m);
      total += soft[c * plane + p];
    }
    for (std::size_t c = 0; c < n; ++c) {
      soft[c * plane + p] /= total;
      out[c * plane + p] = mask[c] * soft[c * plane + p];
    }
  }
  Tape* tape = active_tape();
  if (tape && tape->tracks(logits)) {
    const Tensor* ins[] = {&logits};
    tape->record(out, ins,
                 [soft = std::move(soft), mask, n, plane](std::span<const double> g, std::span<std::span<double>> gin) {
                   for (std::size_t p = 0; p < plane; ++p) {
                     double dot = 0.0;
                     for (std::size_t c = 0; c < n; ++c) dot += soft[c * plane + p] * mask[c] * g[c * plane + p];
                     for (std::size_t c = 0; c < n; ++c) {
                       const std::size_t i = c * plane + p;
                       gin[0][i] += soft[i] * (mask[c] * g[i] - dot);
                     }
                   }
                 });
  }
  return out;
}

inline Tensor softmax_pixelwise(const Tensor& logits) { return masked_softmax(logits, {}, 1); }

// Keeps -ln p finite when a probability underflows to 0.
inline constexpr double kProbabilityFloor = std::numeric_limits<double>::min();

// loss = (1/I) sum_i lambda_i * mean_{pixels p of i, label != ignore} -ln a_{y_p}(p).
// lambda_i = 0 exactly when every pixel of sample i is ignored.
inline Tensor loss_gated_ce(std::span<const Tensor> probabilities, std::span<const LabelMap> labels) {
  if (probabilities.size() != labels.size() || probabilities.empty()) {
    throw std::invalid_argument("loss: need one label map per probability map");
  }
  const double inv_batch = 1.0 / static_cast<double>(probabilities.size());
  std::vector<double> weights(probabilities.size(), 0.0);  // lambda_i / (I * N_i)
  double loss = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const Tensor& p = probabilities[i];
    const LabelMap& y = labels[i];
    if (p.rank() != 3 || p.dim(1) != y.height() || p.dim(2) != y.width()) {
      throw std::invalid_argument("loss: probability map " + shape_string(p.shape()) + " does not match labels");
    }
    const std::size_t n = p.dim(0), plane = y.height() * y.width();
    std::size_t valid = 0;
    double s = 0.0;
    for (std::size_t px = 0; px < plane; ++px) {
      const std::uint8_t id = y.data()[px];
      if (id == kIgnoreId) continue;
      if (id >= n) {
        throw DataError("loss: label id " + std::to_string(id) + " >= class count " + std::to_string(n));
      }
      ++valid;
      s -= std::log(std::max(p[id * plane + px], kProbabilityFloor));
    }
    if (valid == 0) continue;
    weights[i] = inv_batch / static_cast<double>(valid);
    loss += weights[i] * s;
  }
  Tensor out = Tensor::scalar(loss);

  std::vector<const Tensor*> ptrs;
  for (const auto& p : probabilities) ptrs.push_back(&p);
  if (Tape* tape = segfuse::detail::recording_tape(ptrs)) {
    std::vector<std::vector<double>> probs;
    std::vector<LabelMap> ys(labels.begin(), labels.end());
    for (const auto& p : probabilities) probs.push_back(p.values());
    tape->record(out, ptrs,
                 [probs = std::move(probs), ys = std::move(ys), weights](std::span<const double> g,
                                                                         std::span<std::span<double>> gin) {
                   for (std::size_t i = 0; i < gin.size(); ++i) {
                     if (gin[i].empty() || weights[i] == 0.0) continue;
                     const std::size_t plane = ys[i].height() * ys[i].width();
                     for (std::size_t px = 0; px < plane; ++px) {
                       const std::uint8_t id = ys[i].data()[px];
                       if (id == kIgnoreId) continue;
                       const std::size_t k = id * plane + px;
                       gin[i][k] -= g[0] * weights[i] / std::max(probs[i][k], kProbabilityFloor);
                     }
                   }
                 });
  }
  return out;
}

enum class Mode { train, test };

// Per-pixel argmax of the masked softmax (eta = 0 in test mode); ties go to the
// lowest class index. In test mode conflict classes are never returned unless
// every class is a conflict class, in which case all outputs are 0 and the tie
// rule yields class 0.
inline LabelMap predict(const Tensor& logits, std::span<const std::size_t> conflict, Mode mode) {
  NoTapeScope no_tape;
  const int eta = mode == Mode::test ? 0 : 1;
  const Tensor probs = masked_softmax(logits, conflict, eta);
  const std::size_t n = logits.dim(0), h = logits.dim(1), w = logits.dim(2), plane = h * w;
  std::vector<bool> allowed(n, true);
  if (eta == 0 && conflict.size() < n) {
    for (auto c : conflict) allowed[c] = false;
  }
  LabelMap out(h, w, 1);
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = n;
    double best_v = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!allowed[c]) continue;
      const double v = probs[c * plane + p];
      if (best == n || v > best_v) {
        best = c;
        best_v = v;
      }
    }
    out.data()[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct Sample {
  Tensor rgb;    // 3 x H x W
  Tensor depth;  // 1 x H x W, already scaled
  LabelMap label;
};

// RGB to [-0.5, 0.5] per channel, depth in meters times depth_scale.
inline Sample make_sample(const RgbImage& rgb, const DepthMap& depth, const LabelMap& label, double depth_scale) {
  if (!rgb.same_size(depth) || !rgb.same_size(label) || rgb.channels() != 3) {
    throw std::invalid_argument("make_sample: rgb, depth and label sizes differ");
  }
  const std::size_t h = rgb.height(), w = rgb.width(), plane = h * w;
  Tensor r = Tensor::zeros({3, h, w}), d = Tensor::zeros({1, h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) r[c * plane + p] = rgb.data()[p * 3 + c] / 255.0 - 0.5;
    d[p] = depth.data()[p] * depth_scale;
  }
  return Sample{std::move(r), std::move(d), label};
}

// Forward, gated cross-entropy and plain SGD on one batch. Parameters are left
// untouched when the loss or any gradient is non-finite.
inline double train_step(const FusionNetConfig& cfg, NetworkParams& params, std::span<const Sample> batch,
                         double learning_rate) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("train_step: learning rate must be finite and non-negative");
  }
  Tape tape;
  TapeScope scope(tape);
  NetworkParams tracked = params;
  tracked.for_each([&](const std::string&, Tensor& t) { tape.watch(t); });

  std::vector<Tensor> probs;
  std::vector<LabelMap> labels;
  probs.reserve(batch.size());
  for (const auto& s : batch) {
    probs.push_back(masked_softmax(forward(cfg, tracked, s.rgb, s.depth), cfg.conflict_indices, cfg.eta));
    labels.push_back(s.label);
  }
  const Tensor loss = loss_gated_ce(probs, labels);
  if (!std::isfinite(loss.item())) throw NumericalError("train_step: non-finite loss");
  tape.backward(loss);

  std::vector<Tensor> grads;
  tracked.for_each([&](const std::string& name, const Tensor& t) {
    grads.push_back(tape.grad(t));
    for (double g : grads.back().data()) {
      if (!std::isfinite(g)) throw NumericalError("train_step: non-finite gradient in " + name);
    }
  });
  std::size_t k = 0;
  params.for_each([&](const std::string&, Tensor& t) {
    const Tensor& g = grads[k++];
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] -= learning_rate * g[i];
  });
  return loss.item();
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, u32 version, u32 length + config JSON, u32 tensor count,
// then per tensor u32 length + name and the tensor dump.

inline constexpr std::string_view kCheckpointMagic = "SGFCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& out, const FusionNetConfig& cfg, const NetworkParams& params) {
  bytes::write_magic(out, kCheckpointMagic);
  bytes::write_u32(out, kCheckpointVersion);
  const std::string echo = to_json(cfg).dump();
  bytes::write_u32(out, static_cast<std::uint32_t>(echo.size()));
  out.write(echo.data(), static_cast<std::streamsize>(echo.size()));
  bytes::write_u32(out, static_cast<std::uint32_t>(params.tensor_count()));
  params.for_each([&](const std::string& name, const Tensor& t) {
    bytes::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  });
}

struct Checkpoint {
  FusionNetConfig config;
  NetworkParams params;
};

inline Checkpoint read_checkpoint(std::istream& in) {
  bytes::expect_magic(in, kCheckpointMagic, "checkpoint");
  const auto version = bytes::read_u32(in);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  auto read_string = [&](std::uint32_t limit) {
    const auto len = bytes::read_u32(in);
    if (len > limit) throw DataError("checkpoint: string field too long");
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw DataError("checkpoint: truncated");
    return s;
  };
  Checkpoint ck;
  try {
    ck.config = config_from_json(nlohmann::json::parse(read_string(1u << 20)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  ck.params = zero_params(ck.config);
  const auto count = bytes::read_u32(in);
  if (count != ck.params.tensor_count()) throw DataError("checkpoint: tensor count does not match config");
  ck.params.for_each([&](const std::string& name, Tensor& t) {
    const std::string stored = read_string(4096);
    if (stored != name) throw DataError("checkpoint: expected tensor " + name + ", found " + stored);
    Tensor loaded = read_tensor(in);
    if (loaded.shape() != t.shape()) throw DataError("checkpoint: shape mismatch for " + name);
    t = std::move(loaded);
  });
  return ck;
}

inline void save_checkpoint(const std::string& path, const FusionNetConfig& cfg, const NetworkParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  write_checkpoint(out, cfg, params);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace segfuse::nn
