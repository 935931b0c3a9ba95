/* Copyright 2026 The HQOD Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Single-scale dense detector: a strided conv trunk feeding two parallel
// heads, one predicting per-class sigmoid scores and one predicting
// (l, t, r, b) distances from each cell center.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "hqod/box.hpp"
#include "hqod/harmony_losses.hpp"
#include "hqod/quantization.hpp"
#include "hqod/random.hpp"
#include "hqod/tensor.hpp"

namespace hqod {

struct DetectorConfig {
  std::size_t image_size = 64;
  std::size_t stride = 8;
  std::size_t num_classes = 3;
  std::size_t grid() const { return image_size / stride; }
  std::size_t cells() const { return grid() * grid(); }
};

struct ConvLayer {
  std::string name;
  Tensor weight;  // [K, C, 3, 3]
  Tensor bias;    // [K]
  std::size_t stride = 1;
  bool relu = true;
  bool boundary = false;
  bool input_nonnegative = true;
  LayerQuantizers quant;

  Tensor forward(const Tensor& x) const {
    Tensor xin = quant.activation ? fake_quantize(x, *quant.activation) : x;
    Tensor w = quant.weight ? fake_quantize(weight, *quant.weight) : weight;
    auto y = conv2d(xin, w, {stride, 1});
    y = bias_add(y, bias);
    return relu ? hqod::relu(y) : y;
  }
};

struct HeadOutputs {
  Tensor logits;   // [N, C, G, G]
  Tensor scores;   // sigmoid(logits)
  Tensor offsets;  // [N, 4, G, G], positive pixel distances (l, t, r, b)
};

class DetectorNet {
 public:
  static constexpr double kPriorProb = 0.01;
  static constexpr double kOffsetLogMin = -6.0;
  static constexpr double kOffsetLogMax = 4.0;

  explicit DetectorNet(DetectorConfig cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg_.image_size % cfg_.stride != 0) throw std::invalid_argument("image size must be a multiple of stride");
    Rng rng(Rng::mix(seed, 0xD37EC7));
    const std::size_t C = cfg_.num_classes;
    add("stem", 1, 8, 2, true, true, rng);
    add("block1", 8, 16, 2, true, false, rng);
    add("block2", 16, 32, 2, true, false, rng);
    add("block3", 32, 32, 1, true, false, rng);
    add("cls_head", 32, C, 1, false, true, rng);
    add("reg_head", 32, 4, 1, false, true, rng);
    layers_[0].input_nonnegative = true;  // images live in [0, 1]
    std::fill(layer("cls_head").bias.mutable_values().begin(), layer("cls_head").bias.mutable_values().end(),
              -std::log((1.0 - kPriorProb) / kPriorProb));
  }

  const DetectorConfig& config() const { return cfg_; }
  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }

  ConvLayer& layer(const std::string& name) {
    for (auto& l : layers_)
      if (l.name == name) return l;
    throw std::invalid_argument("no layer named '" + name + "'");
  }
  const ConvLayer& layer(const std::string& name) const { return const_cast<DetectorNet*>(this)->layer(name); }

  std::vector<Tensor*> weights() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::vector<Tensor*> quant_parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      if (l.quant.weight && l.quant.weight->learnable()) out.push_back(&l.quant.weight->parameter());
      if (l.quant.activation && l.quant.activation->learnable()) out.push_back(&l.quant.activation->parameter());
    }
    return out;
  }

  std::vector<QuantizableLayer> quantizable_layers() {
    std::vector<QuantizableLayer> out;
    for (auto& l : layers_) out.push_back({l.name, l.boundary, l.input_nonnegative, &l.quant, &l.weight});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  // images: [N, 1, S, S] in [0, 1]. When `captured` is given, the input of
  // every layer is recorded (used to calibrate activation steps).
  HeadOutputs forward(const Tensor& images, std::map<std::string, Tensor>* captured = nullptr) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size) {
      throw std::invalid_argument("detector expects images of shape [N,1," + std::to_string(cfg_.image_size) + "," +
                                  std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
    }
    auto run = [&](const ConvLayer& l, const Tensor& x) {
      if (captured) (*captured)[l.name] = x;
      return l.forward(x);
    };
    Tensor x = images;
    for (std::size_t i = 0; i < 4; ++i) x = run(layers_[i], x);
    Tensor logits = run(layers_[4], x);
    Tensor raw = run(layers_[5], x);
    Tensor offsets = static_cast<double>(cfg_.stride) * exp(clamp(raw, kOffsetLogMin, kOffsetLogMax));
    return {logits, sigmoid(logits), offsets};
  }

  // Sets every activation step from data: s0 = 2 mean|x| / sqrt(n_max).
  void calibrate_activations(const Tensor& images) {
    std::map<std::string, Tensor> captured;
    forward(images, &captured);
    for (auto& l : layers_) {
      if (!l.quant.activation) continue;
      const auto& v = captured.at(l.name).values();
      l.quant.activation->set_step(init_step(v, *l.quant.activation));
    }
  }

  bool quantized() const {
    return std::any_of(layers_.begin(), layers_.end(), [](const ConvLayer& l) { return l.quant.weight.has_value(); });
  }

  // Deep copy; tensors are shared handles, so plain copies alias weights.
  DetectorNet clone() const {
    DetectorNet out = *this;
    for (auto& l : out.layers_) {
      l.weight = l.weight.clone(true);
      l.bias = l.bias.clone(true);
      for (auto* q : {&l.quant.weight, &l.quant.activation})
        if (*q) (*q)->parameter() = (*q)->parameter().clone((*q)->learnable());
    }
    return out;
  }

  // Drops all quantizers, returning to the plain network.
  void clear_quantizers() {
    for (auto& l : layers_) l.quant = {};
  }

 private:
  void add(const std::string& name, std::size_t in, std::size_t out, std::size_t stride, bool relu, bool boundary,
           Rng& rng) {
    ConvLayer l;
    l.name = name;
    l.stride = stride;
    l.relu = relu;
    l.boundary = boundary;
    const std::size_t fan_in = in * 9;
    const double bound = relu ? std::sqrt(6.0 / static_cast<double>(fan_in)) : 0.01 * std::sqrt(3.0);
    std::vector<double> w(out * fan_in);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    l.weight = Tensor({out, in, 3, 3}, std::move(w), true);
    l.bias = Tensor::zeros({out}, true);
    layers_.push_back(std::move(l));
  }

  DetectorConfig cfg_;
  std::vector<ConvLayer> layers_;
};

// ---------------------------------------------------------------------------
// Geometry on the grid

inline std::pair<double, double> cell_center(std::size_t cell, const DetectorConfig& cfg) {
  std::size_t g = cfg.grid();
  double s = static_cast<double>(cfg.stride);
  return {(static_cast<double>(cell % g) + 0.5) * s, (static_cast<double>(cell / g) + 0.5) * s};
}

struct Offsets {
  double l = 0, t = 0, r = 0, b = 0;
};

inline Box decode(std::size_t cell, const Offsets& o, const DetectorConfig& cfg) {
  auto [cx, cy] = cell_center(cell, cfg);
  return {cx - o.l, cy - o.t, cx + o.r, cy + o.b};
}

inline Offsets encode(std::size_t cell, const Box& b, const DetectorConfig& cfg) {
  auto [cx, cy] = cell_center(cell, cfg);
  return {cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy};
}

// Differentiable form: one box per entry of the (l, t, r, b) tensors.
inline BoxTensors decode(const std::vector<std::size_t>& cells, const Tensor& l, const Tensor& t, const Tensor& r,
                         const Tensor& b, const DetectorConfig& cfg) {
  std::vector<double> cx(cells.size()), cy(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) std::tie(cx[i], cy[i]) = cell_center(cells[i], cfg);
  auto X = Tensor::vector(cx), Y = Tensor::vector(cy);
  return {X - l, Y - t, X + r, Y + b};
}

// Per-cell ground-truth index for one image, -1 for background. A cell is
// positive when its center lies inside a box; overlapping boxes resolve to
// the smallest area, then the lowest index.
struct Assignment {
  std::vector<int> cell_gt;
  std::size_t num_pos() const {
    return static_cast<std::size_t>(std::count_if(cell_gt.begin(), cell_gt.end(), [](int g) { return g >= 0; }));
  }
  std::size_t num_neg() const { return cell_gt.size() - num_pos(); }
};

inline Assignment assign_targets(const std::vector<GroundTruth>& gts, const DetectorConfig& cfg) {
  Assignment a;
  a.cell_gt.assign(cfg.cells(), -1);
  for (std::size_t c = 0; c < cfg.cells(); ++c) {
    auto [cx, cy] = cell_center(c, cfg);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (!gts[g].box.contains(cx, cy)) continue;
      double area = gts[g].box.area();
      if (area < best) {
        best = area;
        a.cell_gt[c] = static_cast<int>(g);
      }
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Post-processing

struct NmsConfig {
  double iou_threshold = 0.5;
  double score_threshold = 0.05;
  std::size_t max_detections = 100;
};

inline bool detection_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.cell != b.cell) return a.cell < b.cell;
  return a.class_id < b.class_id;
}

// Greedy per-class suppression. Output is sorted by score, ties by cell.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, double score_threshold) {
  std::erase_if(dets, [&](const Detection& d) { return d.score < score_threshold; });
  std::stable_sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Turns head outputs for image n into final detections.
inline std::vector<Detection> postprocess(const HeadOutputs& out, std::size_t n, const DetectorConfig& cfg,
                                          const NmsConfig& nc = {}) {
  const std::size_t C = cfg.num_classes, G = cfg.cells();
  const auto& s = out.scores.values();
  const auto& o = out.offsets.values();
  std::vector<Detection> dets;
  for (std::size_t cell = 0; cell < G; ++cell) {
    Offsets off{o[(n * 4 + 0) * G + cell], o[(n * 4 + 1) * G + cell], o[(n * 4 + 2) * G + cell],
                o[(n * 4 + 3) * G + cell]};
    Box box = decode(cell, off, cfg);
    for (std::size_t c = 0; c < C; ++c) {
      double score = s[(n * C + c) * G + cell];
      if (score >= nc.score_threshold) dets.push_back({box, static_cast<int>(c), score, cell});
    }
  }
  auto kept = nms(std::move(dets), nc.iou_threshold, nc.score_threshold);
  if (kept.size() > nc.max_detections) kept.resize(nc.max_detections);
  return kept;
}

// ---------------------------------------------------------------------------
// Training loss for a batch

struct PositiveSamples {
  std::vector<double> p, u;  // values, for diagnostics
  std::size_t count = 0;
};

struct BatchLoss {
  HqodLoss loss;
  PositiveSamples positives;
};

inline BatchLoss detection_loss(const HeadOutputs& out, const std::vector<std::vector<GroundTruth>>& gts,
                                const DetectorConfig& cfg, const LossConfig& lc) {
  const std::size_t N = gts.size(), C = cfg.num_classes, G = cfg.cells();
  if (out.scores.size() != N * C * G) throw std::invalid_argument("detection_loss: batch size mismatch");
  std::vector<double> targets(N * C * G, 0.0);
  std::vector<std::size_t> pos_cells, neg_cells, pos_local, pos_score_idx;
  std::vector<Box> pos_gt;
  for (std::size_t n = 0; n < N; ++n) {
    auto a = assign_targets(gts[n], cfg);
    for (std::size_t cell = 0; cell < G; ++cell) {
      int g = a.cell_gt[cell];
      if (g < 0) {
        neg_cells.push_back(n * G + cell);
        continue;
      }
      const auto& gt = gts[n][static_cast<std::size_t>(g)];
      std::size_t idx = (n * C + static_cast<std::size_t>(gt.class_id)) * G + cell;
      targets[idx] = 1.0;
      pos_cells.push_back(n * G + cell);
      pos_local.push_back(cell);
      pos_score_idx.push_back(idx);
      pos_gt.push_back(gt.box);
    }
  }
  Tensor target_t(out.scores.shape(), std::move(targets));
  auto focal = focal_elementwise(out.scores, target_t, lc.focal_alpha, lc.focal_gamma);
  auto per_cell = sum(focal, {1});  // [N, G, G] -> flat index n*G + cell

  LossBatch batch;
  batch.num_pos = pos_cells.size();
  batch.num_neg = neg_cells.size();
  if (!neg_cells.empty()) batch.cls_neg = gather(per_cell, neg_cells);
  BatchLoss result;
  if (!pos_cells.empty()) {
    batch.cls_pos = gather(per_cell, pos_cells);
    auto p = gather(out.scores, pos_score_idx);
    std::array<Tensor, 4> side;
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<std::size_t> idx(pos_cells.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::size_t n = pos_cells[i] / G, cell = pos_cells[i] % G;
        idx[i] = (n * 4 + k) * G + cell;
      }
      side[k] = gather(out.offsets, idx);
    }
    auto pred = decode(pos_local, side[0], side[1], side[2], side[3], cfg);
    auto gt = BoxTensors::constant(pos_gt);
    batch.reg = reg_loss(pred, gt);
    auto u = iou(pred, gt);
    attach_harmony_terms(batch, p, u, lc);
    result.positives = {p.values(), u.values(), pos_cells.size()};
  }
  result.loss = hqod_total(batch, lc);
  return result;
}

// ---------------------------------------------------------------------------
// Weight container
//
// Little-endian layout:
//   magic "HQODWTS1"
//   u32 tensor_count, then per tensor:
//     u32 name_len, name bytes, u8 dtype (1 = float64), u32 rank, u64 dims[rank],
//     float64 values[prod(dims)]
//   u32 quantizer_count, then per quantizer:
//     u32 name_len, name bytes ("<layer>.weight_q" / "<layer>.act_q"),
//     u32 bits, u8 signed, u8 mode (0 FIXED, 1 LSQ, 2 TQT), float64 raw parameter
//     (the step, or the exponent under TQT)

namespace detail {
inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    int c = is.get();
    if (c == EOF) throw std::runtime_error("weight file truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
inline double get_f64(std::istream& is) {
  std::uint64_t v = get_uint(is, 8);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}
inline std::string get_str(std::istream& is) {
  auto n = static_cast<std::size_t>(get_uint(is, 4));
  if (n > 4096) throw std::runtime_error("weight file: implausible name length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("weight file truncated");
  return s;
}
}  // namespace detail

inline constexpr char kWeightMagic[8] = {'H', 'Q', 'O', 'D', 'W', 'T', 'S', '1'};

inline void save_weights(const DetectorNet& net, std::ostream& os) {
  os.write(kWeightMagic, 8);
  detail::put_u32(os, static_cast<std::uint32_t>(net.layers().size() * 2));
  auto put_tensor = [&](const std::string& name, const Tensor& t) {
    detail::put_str(os, name);
    detail::put_u8(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u64(os, d);
    for (double v : t.values()) detail::put_f64(os, v);
  };
  for (const auto& l : net.layers()) {
    put_tensor(l.name + ".weight", l.weight);
    put_tensor(l.name + ".bias", l.bias);
  }
  std::vector<std::pair<std::string, const QuantParams*>> qs;
  for (const auto& l : net.layers()) {
    if (l.quant.weight) qs.emplace_back(l.name + ".weight_q", &*l.quant.weight);
    if (l.quant.activation) qs.emplace_back(l.name + ".act_q", &*l.quant.activation);
  }
  detail::put_u32(os, static_cast<std::uint32_t>(qs.size()));
  for (const auto& [name, q] : qs) {
    detail::put_str(os, name);
    detail::put_u32(os, static_cast<std::uint32_t>(q->bits()));
    detail::put_u8(os, q->is_signed() ? 1 : 0);
    detail::put_u8(os, static_cast<std::uint8_t>(q->mode()));
    detail::put_f64(os, q->parameter().item());
  }
}

inline void save_weights(const DetectorNet& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_weights(net, os);
  if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

// Loads into an already constructed network of the same architecture.
inline void load_weights(DetectorNet& net, std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kWeightMagic, 8) != 0) throw std::runtime_error("not a weight file");
  auto count = detail::get_uint(is, 4);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = detail::get_str(is);
    auto dtype = detail::get_uint(is, 1);
    if (dtype != 1) throw std::runtime_error("unsupported dtype tag in '" + name + "'");
    auto rank = detail::get_uint(is, 4);
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(detail::get_uint(is, 8)));
    auto dot = name.rfind('.');
    if (dot == std::string::npos) throw std::runtime_error("bad tensor name '" + name + "'");
    auto& layer = net.layer(name.substr(0, dot));
    Tensor& dst = name.substr(dot + 1) == "weight" ? layer.weight : layer.bias;
    if (dst.shape() != shape) throw std::runtime_error("shape mismatch for '" + name + "'");
    for (auto& v : dst.mutable_values()) v = detail::get_f64(is);
  }
  net.clear_quantizers();
  auto qcount = detail::get_uint(is, 4);
  for (std::uint64_t i = 0; i < qcount; ++i) {
    auto name = detail::get_str(is);
    int bits = static_cast<int>(detail::get_uint(is, 4));
    bool is_signed = detail::get_uint(is, 1) != 0;
    auto mode_tag = detail::get_uint(is, 1);
    if (mode_tag > 2) throw std::runtime_error("bad quantizer mode in '" + name + "'");
    double raw = detail::get_f64(is);
    QuantParams q(bits, is_signed, static_cast<QuantMode>(mode_tag));
    q.parameter() = Tensor::scalar(raw, q.learnable());
    auto dot = name.rfind('.');
    auto& layer = net.layer(name.substr(0, dot));
    if (name.substr(dot + 1) == "weight_q") layer.quant.weight = std::move(q);
    else if (name.substr(dot + 1) == "act_q") layer.quant.activation = std::move(q);
    else throw std::runtime_error("bad quantizer name '" + name + "'");
  }
}

inline void load_weights(DetectorNet& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open weight file '" + path + "'");
  load_weights(net, is);
}

}  // namespace hqod
