#pragma once

// Dense float64 tensors with a tape-based reverse-mode gradient engine.
//
// Feature maps are C x H x W. Forward primitives are pure functions; when a
// Tape is active on the calling thread (see TapeScope) and at least one input
// is tracked by it, the primitive appends a node holding its backward rule.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "segfuse/bytes.hpp"
#include "segfuse/error.hpp"
#include "segfuse/sampling.hpp"

namespace segfuse {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

struct NodeRef {
  std::uint64_t tape = 0;
  std::size_t index = 0;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // C x H x W indexing.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  double item() const {
    if (data_.size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }
  const std::optional<NodeRef>& node() const { return node_; }

  // Drops any tape association; value only.
  Tensor detached() const {
    Tensor t(shape_, data_);
    t.requires_grad_ = requires_grad_;
    return t;
  }

  bool same_values(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  friend class Tape;

  void validate_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<NodeRef> node_;
};

// Ordered record of primitive applications. One training step owns one tape;
// nodes are appended in execution order, which is a topological order.
class Tape {
 public:
  // grad_in[k] is empty when input k is not tracked.
  using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<std::span<double>> grad_in)>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  bool tracks(const Tensor& t) const { return t.node_ && t.node_->tape == id_; }

  // Registers a leaf parameter.
  void watch(Tensor& t) {
    t.requires_grad_ = true;
    t.node_ = NodeRef{id_, nodes_.size()};
    nodes_.push_back(Node{t.numel(), {}, {}});
  }

  void record(Tensor& out, std::span<const Tensor* const> inputs, BackwardFn fn) {
    Node node{out.numel(), {}, std::move(fn)};
    node.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) {
      if (tracks(*in)) {
        node.inputs.emplace_back(in->node_->index);
      } else {
        node.inputs.emplace_back(std::nullopt);
      }
    }
    out.requires_grad_ = true;
    out.node_ = NodeRef{id_, nodes_.size()};
    nodes_.push_back(std::move(node));
  }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    if (!tracks(loss)) throw std::invalid_argument("backward() on a tensor not recorded by this tape");
    grads_.assign(nodes_.size(), {});
    const std::size_t root = loss.node_->index;
    grads_[root].assign(1, 1.0);
    std::vector<std::span<double>> grad_in;
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (grads_[i].empty() || !node.fn) continue;
      grad_in.clear();
      for (const auto& in : node.inputs) {
        if (!in) {
          grad_in.emplace_back();
          continue;
        }
        auto& g = grads_[*in];
        if (g.empty()) g.assign(nodes_[*in].numel, 0.0);
        grad_in.emplace_back(g);
      }
      node.fn(grads_[i], grad_in);
    }
  }

  // Gradient of the last backward() loss with respect to t; zeros when t did
  // not influence the loss.
  Tensor grad(const Tensor& t) const {
    if (!tracks(t)) throw std::invalid_argument("grad() of a tensor not recorded by this tape");
    const std::size_t i = t.node_->index;
    if (i < grads_.size() && !grads_[i].empty()) return Tensor(t.shape(), grads_[i]);
    return Tensor::zeros(t.shape());
  }

 private:
  struct Node {
    std::size_t numel = 0;
    std::vector<std::optional<std::size_t>> inputs;
    BackwardFn fn;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

namespace detail {

inline Tape*& active_tape_slot() {
  thread_local Tape* active = nullptr;
  return active;
}

// Tape to record on, or null when no input is tracked by the active tape.
inline Tape* recording_tape(std::span<const Tensor* const> inputs) {
  Tape* tape = active_tape_slot();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (tape->tracks(*t)) return tape;
  }
  return nullptr;
}

inline void record_if_needed(Tensor& out, std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn) {
  std::span<const Tensor* const> ins(inputs.begin(), inputs.size());
  if (Tape* tape = recording_tape(ins)) tape->record(out, ins, std::move(fn));
}

inline void require_rank3(const Tensor& t, const char* op) {
  if (t.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected C x H x W tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace detail

// Makes `tape` the active record for the current thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the scope's lifetime.
class NoTapeScope {
 public:
  NoTapeScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  ~NoTapeScope() { detail::active_tape_slot() = previous_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

inline Tape* active_tape() { return detail::active_tape_slot(); }

inline void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw std::invalid_argument("backward() called without an active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Forward primitives

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::record_if_needed(out, {&a}, [](std::span<const double> g, std::span<std::span<double>> gin) {
    if (gin[0].empty()) return;
    for (double& v : gin[0]) v += g[0];
  });
  return out;
}

enum class ElementwiseKind { add, mul, sigmoid, relu };

namespace detail {

// True when b is C x 1 x 1 against a C x H x W.
inline bool is_channel_broadcast(const Tensor& a, const Tensor& b) {
  return a.rank() == 3 && b.rank() == 3 && b.dim(0) == a.dim(0) && b.dim(1) == 1 && b.dim(2) == 1 &&
         (a.dim(1) != 1 || a.dim(2) != 1);
}

inline void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || is_channel_broadcast(a, b)) return;
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                              shape_string(b.shape()) + " are not broadcastable");
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_binary(a, b, "add");
  Tensor out(a.shape());
  const bool bc = detail::is_channel_broadcast(a, b);
  const std::size_t plane = bc ? a.dim(1) * a.dim(2) : 1;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + (bc ? b[i / plane] : b[i]);
  detail::record_if_needed(out, {&a, &b}, [bc, plane](std::span<const double> g, std::span<std::span<double>> gin) {
    if (!gin[0].empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    }
    if (!gin[1].empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[1][bc ? i / plane : i] += g[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_binary(a, b, "mul");
  Tensor out(a.shape());
  const bool bc = detail::is_channel_broadcast(a, b);
  const std::size_t plane = bc ? a.dim(1) * a.dim(2) : 1;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * (bc ? b[i / plane] : b[i]);
  Tape* tape = detail::active_tape_slot();
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    std::vector<double> av(a.values()), bv(b.values());
    const Tensor* ins[] = {&a, &b};
    tape->record(out, ins, [av = std::move(av), bv = std::move(bv), bc, plane](std::span<const double> g,
                                                                                std::span<std::span<double>> gin) {
      if (!gin[0].empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * (bc ? bv[i / plane] : bv[i]);
      }
      if (!gin[1].empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[1][bc ? i / plane : i] += g[i] * av[i];
      }
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
  Tape* tape = detail::active_tape_slot();
  if (tape && tape->tracks(a)) {
    const Tensor* ins[] = {&a};
    tape->record(out, ins, [y = out.values()](std::span<const double> g, std::span<std::span<double>> gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  Tape* tape = detail::active_tape_slot();
  if (tape && tape->tracks(a)) {
    std::vector<bool> active(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) active[i] = a[i] > 0.0;
    const Tensor* ins[] = {&a};
    tape->record(out, ins, [active = std::move(active)](std::span<const double> g, std::span<std::span<double>> gin) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (active[i]) gin[0][i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b = nullptr) {
  switch (kind) {
    case ElementwiseKind::add:
    case ElementwiseKind::mul:
      if (!b) throw std::invalid_argument("elementwise add/mul needs a second operand");
      return kind == ElementwiseKind::add ? add(a, *b) : mul(a, *b);
    case ElementwiseKind::sigmoid:
      return sigmoid(a);
    case ElementwiseKind::relu:
      return relu(a);
  }
  throw std::invalid_argument("unknown elementwise kind");
}

// Cross-correlation. weights: C_out x C_in x k x k, bias: C_out.
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride = 1,
                     std::size_t padding = 0) {
  detail::require_rank3(input, "conv2d");
  if (weights.rank() != 4 || weights.dim(2) != weights.dim(3)) {
    throw std::invalid_argument("conv2d: weights must be C_out x C_in x k x k, got " + shape_string(weights.shape()));
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weights.dim(0), k = weights.dim(2);
  if (weights.dim(1) != cin) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(cin) + " channels but weights expect " +
                                std::to_string(weights.dim(1)));
  }
  if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel size must be 1 or 3");
  if (bias.numel() != cout) {
    throw std::invalid_argument("conv2d: bias has " + std::to_string(bias.numel()) + " entries, expected " +
                                std::to_string(cout));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw std::invalid_argument("conv2d: input " + shape_string(input.shape()) + " smaller than kernel");
  }
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;

  // Valid output range along one axis for kernel offset t.
  struct Range {
    std::size_t begin, end;
  };
  auto valid = [stride, padding](std::size_t t, std::size_t in_size, std::size_t out_size) {
    // in = o*stride + t - padding must lie in [0, in_size)
    std::size_t begin = 0;
    if (padding > t) begin = (padding - t + stride - 1) / stride;
    std::size_t end = 0;
    if (in_size + padding > t) end = std::min(out_size, (in_size + padding - t - 1) / stride + 1);
    return Range{begin, std::max(begin, end)};
  };

  Tensor out(Shape{cout, oh, ow});
  const double* in = input.data().data();
  const double* wt = weights.data().data();
  double* o = out.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    double* oplane = o + co * oh * ow;
    std::fill(oplane, oplane + oh * ow, bias[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* iplane = in + ci * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const Range ry = valid(ky, h, oh);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const Range rx = valid(kx, w, ow);
          const double wv = wt[((co * cin + ci) * k + ky) * k + kx];
          for (std::size_t oy = ry.begin; oy < ry.end; ++oy) {
            const double* irow = iplane + (oy * stride + ky - padding) * w;
            double* orow = oplane + oy * ow;
            for (std::size_t ox = rx.begin; ox < rx.end; ++ox) {
              orow[ox] += wv * irow[ox * stride + kx - padding];
            }
          }
        }
      }
    }
  }

  Tape* tape = detail::active_tape_slot();
  if (tape && (tape->tracks(input) || tape->tracks(weights) || tape->tracks(bias))) {
    const Tensor* ins[] = {&input, &weights, &bias};
    tape->record(out, ins,
                 [iv = input.values(), wv_all = weights.values(), cin, h, w, cout, k, oh, ow, stride, padding,
                  valid](std::span<const double> g, std::span<std::span<double>> gin) {
                   const bool need_in = !gin[0].empty(), need_w = !gin[1].empty(), need_b = !gin[2].empty();
                   for (std::size_t co = 0; co < cout; ++co) {
                     const double* gplane = g.data() + co * oh * ow;
                     if (need_b) {
                       double s = 0.0;
                       for (std::size_t i = 0; i < oh * ow; ++i) s += gplane[i];
                       gin[2][co] += s;
                     }
                     if (!need_in && !need_w) continue;
                     for (std::size_t ci = 0; ci < cin; ++ci) {
                       const double* iplane = iv.data() + ci * h * w;
                       for (std::size_t ky = 0; ky < k; ++ky) {
                         const Range ry = valid(ky, h, oh);
                         for (std::size_t kx = 0; kx < k; ++kx) {
                           const Range rx = valid(kx, w, ow);
                           const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                           const double wv = wv_all[widx];
                           double gw = 0.0;
                           for (std::size_t oy = ry.begin; oy < ry.end; ++oy) {
                             const std::size_t irow = (oy * stride + ky - padding) * w;
                             const double* grow = gplane + oy * ow;
                             for (std::size_t ox = rx.begin; ox < rx.end; ++ox) {
                               const std::size_t ii = irow + ox * stride + kx - padding;
                               if (need_w) gw += grow[ox] * iplane[ii];
                               if (need_in) gin[0][ci * h * w + ii] += grow[ox] * wv;
                             }
                           }
                           if (need_w) gin[1][widx] += gw;
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

inline Tensor reduce_mean_spatial(const Tensor& input) {
  detail::require_rank3(input, "reduce_mean_spatial");
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  Tensor out(Shape{c, 1, 1});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += input[ch * plane + i];
    out[ch] = s / static_cast<double>(plane);
  }
  detail::record_if_needed(out, {&input}, [plane](std::span<const double> g, std::span<std::span<double>> gin) {
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i / plane] * inv;
  });
  return out;
}

// Output width for a pooled height, scaling the width in proportion.
inline std::size_t pooled_width(std::size_t h, std::size_t w, std::size_t out_h) {
  const std::size_t ow = (2 * w * out_h + h) / (2 * h);
  return std::max<std::size_t>(ow, 1);
}

// Adaptive average pooling to out_h rows; region i covers
// [floor(i*H/out_h), ceil((i+1)*H/out_h)), columns likewise.
inline Tensor avg_pool_to_grid(const Tensor& input, std::size_t out_h) {
  detail::require_rank3(input, "avg_pool_to_grid");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (out_h == 0) throw std::invalid_argument("avg_pool_to_grid: out_h must be positive");
  if (out_h > h) {
    throw std::invalid_argument("avg_pool_to_grid: out_h " + std::to_string(out_h) + " exceeds input height " +
                                std::to_string(h));
  }
  const std::size_t out_w = pooled_width(h, w, out_h);
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };

  Tensor out(Shape{c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t y0 = lo(i, h, out_h), y1 = hi(i, h, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t x0 = lo(j, w, out_w), x1 = hi(j, w, out_w);
        double s = 0.0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) s += input.at(ch, y, x);
        }
        out.at(ch, i, j) = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  detail::record_if_needed(out, {&input},
                           [c, h, w, out_h, out_w, lo, hi](std::span<const double> g, std::span<std::span<double>> gin) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               for (std::size_t i = 0; i < out_h; ++i) {
                                 const std::size_t y0 = lo(i, h, out_h), y1 = hi(i, h, out_h);
                                 for (std::size_t j = 0; j < out_w; ++j) {
                                   const std::size_t x0 = lo(j, w, out_w), x1 = hi(j, w, out_w);
                                   const double share = g[(ch * out_h + i) * out_w + j] /
                                                        static_cast<double>((y1 - y0) * (x1 - x0));
                                   for (std::size_t y = y0; y < y1; ++y) {
                                     for (std::size_t x = x0; x < x1; ++x) gin[0][(ch * h + y) * w + x] += share;
                                   }
                                 }
                               }
                             }
                           });
  return out;
}

inline Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  detail::require_rank3(input, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("bilinear_resize: output size must be positive");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto ty = sampling::linear_taps(h, out_h);
  const auto tx = sampling::linear_taps(w, out_w);
  Tensor out(Shape{c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& ry = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& rx = tx[j];
        const double top = (1.0 - rx.weight) * input.at(ch, ry.lo, rx.lo) + rx.weight * input.at(ch, ry.lo, rx.hi);
        const double bottom =
            (1.0 - rx.weight) * input.at(ch, ry.hi, rx.lo) + rx.weight * input.at(ch, ry.hi, rx.hi);
        out.at(ch, i, j) = (1.0 - ry.weight) * top + ry.weight * bottom;
      }
    }
  }
  detail::record_if_needed(out, {&input},
                           [c, h, w, out_h, out_w, ty, tx](std::span<const double> g, std::span<std::span<double>> gin) {
                             auto& gi = gin[0];
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               for (std::size_t i = 0; i < out_h; ++i) {
                                 const auto& ry = ty[i];
                                 for (std::size_t j = 0; j < out_w; ++j) {
                                   const auto& rx = tx[j];
                                   const double gv = g[(ch * out_h + i) * out_w + j];
                                   const double gt = gv * (1.0 - ry.weight), gb = gv * ry.weight;
                                   gi[(ch * h + ry.lo) * w + rx.lo] += gt * (1.0 - rx.weight);
                                   gi[(ch * h + ry.lo) * w + rx.hi] += gt * rx.weight;
                                   gi[(ch * h + ry.hi) * w + rx.lo] += gb * (1.0 - rx.weight);
                                   gi[(ch * h + ry.hi) * w + rx.hi] += gb * rx.weight;
                                 }
                               }
                             }
                           });
  return out;
}

inline Tensor concat_channels(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  for (const auto& t : inputs) detail::require_rank3(t, "concat_channels");
  const std::size_t h = inputs[0].dim(1), w = inputs[0].dim(2);
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : inputs) {
    if (t.dim(1) != h || t.dim(2) != w) {
      throw std::invalid_argument("concat_channels: spatial size " + shape_string(t.shape()) + " does not match " +
                                  shape_string(inputs[0].shape()));
    }
    offsets.push_back(total);
    total += t.numel();
  }
  std::vector<double> data;
  data.reserve(total);
  std::size_t channels = 0;
  for (const auto& t : inputs) {
    data.insert(data.end(), t.data().begin(), t.data().end());
    channels += t.dim(0);
  }
  Tensor out(Shape{channels, h, w}, std::move(data));

  std::vector<const Tensor*> ptrs;
  for (const auto& t : inputs) ptrs.push_back(&t);
  if (Tape* tape = detail::recording_tape(ptrs)) {
    tape->record(out, ptrs, [offsets](std::span<const double> g, std::span<std::span<double>> gin) {
      for (std::size_t k = 0; k < gin.size(); ++k) {
        if (gin[k].empty()) continue;
        for (std::size_t i = 0; i < gin[k].size(); ++i) gin[k][i] += g[offsets[k] + i];
      }
    });
  }
  return out;
}

inline Tensor concat_channels(std::initializer_list<Tensor> inputs) {
  return concat_channels(std::span<const Tensor>(inputs.begin(), inputs.size()));
}

inline Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t count) {
  detail::require_rank3(input, "slice_channels");
  if (count == 0 || begin + count > input.dim(0)) {
    throw std::invalid_argument("slice_channels: range out of bounds for " + shape_string(input.shape()));
  }
  const std::size_t plane = input.dim(1) * input.dim(2);
  std::vector<double> data(input.data().begin() + static_cast<std::ptrdiff_t>(begin * plane),
                           input.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * plane));
  Tensor out(Shape{count, input.dim(1), input.dim(2)}, std::move(data));
  const std::size_t offset = begin * plane;
  detail::record_if_needed(out, {&input}, [offset](std::span<const double> g, std::span<std::span<double>> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][offset + i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification of backward rules.

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t param = 0;  // which tensor holds the worst coordinate
  std::size_t index = 0;  // flat coordinate within it
};

using TensorProgram = std::function<Tensor(std::span<const Tensor>)>;

// Central differences per coordinate against the tape gradient. Error per
// coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradientCheckResult gradient_check(const TensorProgram& f, std::vector<Tensor> params, double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-4)) throw std::invalid_argument("gradient_check: step must lie in [1e-7, 1e-4]");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    std::vector<Tensor> watched;
    watched.reserve(params.size());
    for (const auto& p : params) {
      watched.push_back(p.detached());
      tape.watch(watched.back());
    }
    Tensor loss = f(watched);
    if (!std::isfinite(loss.item())) throw NumericalError("gradient_check: non-finite loss at the base point");
    if (tape.tracks(loss)) {
      tape.backward(loss);
      for (const auto& w : watched) analytic.push_back(tape.grad(w));
    } else {
      // Loss does not depend on any parameter.
      for (const auto& w : watched) analytic.push_back(Tensor::zeros(w.shape()));
    }
  }

  NoTapeScope no_tape;
  GradientCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double original = params[p][i];
      params[p][i] = original + h;
      const double plus = f(params).item();
      params[p][i] = original - h;
      const double minus = f(params).item();
      params[p][i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericalError("gradient_check: non-finite value perturbing tensor " + std::to_string(p) +
                             " coordinate " + std::to_string(i));
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_relative_error) result = GradientCheckResult{err, p, i};
    }
  }
  return result;
}

inline GradientCheckResult gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& params,
                                          double h = 1e-5) {
  return gradient_check([&f](std::span<const Tensor> ps) { return f(ps[0]); }, std::vector<Tensor>{params}, h);
}

// ---------------------------------------------------------------------------
// Binary dump: 8-byte magic, u32 rank, u32 dims, little-endian f64 data.

inline constexpr std::string_view kTensorMagic = "SGFTNSR1";

inline void write_tensor(std::ostream& out, const Tensor& t) {
  bytes::write_magic(out, kTensorMagic);
  bytes::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) bytes::write_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) bytes::write_f64(out, v);
}

inline Tensor read_tensor(std::istream& in) {
  bytes::expect_magic(in, kTensorMagic, "tensor dump");
  const std::uint32_t rank = bytes::read_u32(in);
  if (rank == 0 || rank > 8) throw DataError("tensor dump: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = bytes::read_u32(in);
    if (d == 0) throw DataError("tensor dump: zero dimension");
  }
  const std::size_t n = shape_numel(shape);
  if (n > (std::size_t{1} << 32)) throw DataError("tensor dump: tensor too large");
  std::vector<double> data(n);
  for (auto& v : data) v = bytes::read_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  write_tensor(out, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_tensor(in);
}

}  // namespace segfuse
