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

// Simulated per-tensor symmetric quantization with straight-through
// gradients. Three step-size regimes are supported:
//   FIXED  the step is a constant,
//   LSQ    the step is learned with a scaled gradient,
//   TQT    a real exponent is learned and the step is 2^round(exponent).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hqod/tensor.hpp"

namespace hqod {

enum class QuantMode { Fixed, Lsq, Tqt };

inline std::string_view to_string(QuantMode m) {
  switch (m) {
    case QuantMode::Fixed: return "FIXED";
    case QuantMode::Lsq: return "LSQ";
    case QuantMode::Tqt: return "TQT";
  }
  return "?";
}

inline QuantMode parse_quant_mode(std::string_view s) {
  if (s == "FIXED") return QuantMode::Fixed;
  if (s == "LSQ") return QuantMode::Lsq;
  if (s == "TQT") return QuantMode::Tqt;
  throw std::invalid_argument("unknown quantizer mode '" + std::string(s) + "'");
}

struct IntRange {
  std::int64_t n_min = 0;
  std::int64_t n_max = 0;
  bool operator==(const IntRange&) const = default;
};

inline IntRange int_range(int bits, bool is_signed) {
  if (bits < 2 || bits > 31) throw std::invalid_argument("bit width must lie in [2, 31]");
  if (is_signed) return {-(std::int64_t{1} << (bits - 1)), (std::int64_t{1} << (bits - 1)) - 1};
  return {0, (std::int64_t{1} << bits) - 1};
}

// Round half to even, independent of the ambient floating-point mode.
inline double round_half_even(double x) {
  double r = std::round(x);  // half away from zero
  if (std::fabs(x - std::trunc(x)) == 0.5) r = 2.0 * std::round(x / 2.0);
  return r;
}

inline constexpr double kMinStep = 1e-9;

class QuantParams {
 public:
  QuantParams(int bits, bool is_signed, QuantMode mode, double step = 1.0)
      : bits_(bits), signed_(is_signed), mode_(mode), range_(int_range(bits, is_signed)) {
    set_step(step);
  }

  int bits() const { return bits_; }
  bool is_signed() const { return signed_; }
  QuantMode mode() const { return mode_; }
  std::int64_t n_min() const { return range_.n_min; }
  std::int64_t n_max() const { return range_.n_max; }
  IntRange range() const { return range_; }

  // The learnable leaf: the step itself, or the exponent under TQT.
  Tensor& parameter() { return param_; }
  const Tensor& parameter() const { return param_; }
  bool learnable() const { return mode_ != QuantMode::Fixed; }

  double step_value() const {
    return mode_ == QuantMode::Tqt ? std::ldexp(1.0, static_cast<int>(round_half_even(param_.item())))
                                   : param_.item();
  }

  void set_step(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("quantization step must be positive");
    double raw = mode_ == QuantMode::Tqt ? std::log2(s) : s;
    param_ = Tensor::scalar(raw, learnable());
  }

  // Restores positivity after an optimizer update. Returns true when the
  // step had collapsed below the floor.
  bool clamp_step() {
    if (mode_ == QuantMode::Tqt) return false;
    auto& v = param_.mutable_values()[0];
    if (v < kMinStep) {
      v = kMinStep;
      return true;
    }
    return false;
  }

 private:
  int bits_;
  bool signed_;
  QuantMode mode_;
  IntRange range_;
  Tensor param_;
};

// Clipped straight-through estimator: pass the gradient where
// n_min <= v/s <= n_max, block it elsewhere.
inline std::vector<double> ste_backward(std::span<const double> upstream, std::span<const double> v,
                                        const QuantParams& qp) {
  double s = qp.step_value();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double q = v[i] / s;
    bool in = q >= static_cast<double>(qp.n_min()) && q <= static_cast<double>(qp.n_max());
    g[i] = in ? upstream[i] : 0.0;
  }
  return g;
}

// Per-element d(v_hat)/ds: round(v/s) - v/s in range, the clipping level
// outside.
inline double step_sensitivity(double v, double s, IntRange r) {
  double q = v / s;
  if (q < static_cast<double>(r.n_min)) return static_cast<double>(r.n_min);
  if (q > static_cast<double>(r.n_max)) return static_cast<double>(r.n_max);
  return round_half_even(q) - q;
}

inline double lsq_grad_scale(std::size_t count, const QuantParams& qp) {
  return 1.0 / std::sqrt(static_cast<double>(count) * static_cast<double>(qp.n_max()));
}

// LSQ step gradient: sum(upstream * g * d) with g = 1/sqrt(count * n_max).
inline double lsq_step_gradient(std::span<const double> upstream, std::span<const double> v,
                                const QuantParams& qp) {
  double s = qp.step_value();
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += upstream[i] * step_sensitivity(v[i], s, qp.range());
  return acc * lsq_grad_scale(v.size(), qp);
}

// s = 2^round(theta); the round is straight-through, so ds/dtheta = s ln 2.
inline Tensor tqt_pot_step(const QuantParams& qp) {
  if (qp.mode() != QuantMode::Tqt) throw std::logic_error("tqt_pot_step on a non-TQT quantizer");
  return custom_grad(
      [](std::span<const Tensor> in) {
        return Tensor::scalar(std::ldexp(1.0, static_cast<int>(round_half_even(in[0].item()))));
      },
      [](const Tensor& out, std::span<const Tensor>) {
        return std::vector<std::vector<double>>{{out.grad()[0] * out.item() * std::log(2.0)}};
      },
      {qp.parameter()}, "pot_step");
}

// The step as a graph value: connected to the learnable leaf under LSQ/TQT,
// a constant under FIXED.
inline Tensor step_tensor(const QuantParams& qp) {
  switch (qp.mode()) {
    case QuantMode::Fixed: return Tensor::scalar(qp.step_value());
    case QuantMode::Lsq: return qp.parameter();
    case QuantMode::Tqt: return tqt_pot_step(qp);
  }
  throw std::logic_error("unreachable");
}

// v_hat = s * clip(round(v/s), n_min, n_max). Gradient to v is the clipped
// STE; gradient to the step uses the LSQ sensitivity (scaled by g under
// LSQ, unscaled under TQT, absent under FIXED).
inline Tensor fake_quantize(const Tensor& v, const QuantParams& qp) {
  double s = qp.step_value();
  if (!(s > 0.0)) throw std::invalid_argument("fake_quantize: non-positive step");
  const IntRange r = qp.range();
  const double lo = static_cast<double>(r.n_min), hi = static_cast<double>(r.n_max);
  Tensor step = step_tensor(qp);
  const QuantMode mode = qp.mode();
  const double g_scale = mode == QuantMode::Lsq ? lsq_grad_scale(v.size(), qp) : 1.0;
  return custom_grad(
      [lo, hi](std::span<const Tensor> in) {
        double s = in[1].item();
        const auto& x = in[0].values();
        std::vector<double> o(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) o[i] = s * std::clamp(round_half_even(x[i] / s), lo, hi);
        return Tensor(in[0].shape(), std::move(o));
      },
      [r, lo, hi, g_scale](const Tensor& out, std::span<const Tensor> in) {
        const auto& g = out.grad();
        const auto& x = in[0].values();
        double s = in[1].item();
        std::vector<double> gv, gs;
        if (in[0].requires_grad()) {
          gv.resize(x.size());
          for (std::size_t i = 0; i < x.size(); ++i) {
            double q = x[i] / s;
            gv[i] = (q >= lo && q <= hi) ? g[i] : 0.0;
          }
        }
        if (in[1].requires_grad()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) acc += g[i] * step_sensitivity(x[i], s, r);
          gs.push_back(acc * g_scale);
        }
        return std::vector<std::vector<double>>{std::move(gv), std::move(gs)};
      },
      {v, step}, "fake_quantize");
}

// s0 = 2 mean|v| / sqrt(n_max), falling back to 1 for an all-zero tensor.
inline double init_step(std::span<const double> v, const QuantParams& qp) {
  double acc = 0.0;
  for (double x : v) acc += std::fabs(x);
  if (v.empty() || acc == 0.0) return 1.0;
  double mean_abs = acc / static_cast<double>(v.size());
  return 2.0 * mean_abs / std::sqrt(static_cast<double>(qp.n_max()));
}

// ---------------------------------------------------------------------------
// Network-wide bit policy

struct BitPolicy {
  static constexpr int kFullPrecision = 32;
  static constexpr int kBoundaryBits = 8;

  int bits = kFullPrecision;
  std::map<std::string, int> overrides;

  bool quantized() const { return bits != kFullPrecision; }

  // Boundary layers (the stem and the head output layers) stay at 8 bits
  // whenever the network is quantized at all.
  int bits_for(const std::string& layer, bool boundary) const {
    if (!quantized()) return kFullPrecision;
    if (auto it = overrides.find(layer); it != overrides.end()) return it->second;
    return boundary ? kBoundaryBits : bits;
  }

  void validate() const {
    auto ok = [](int b) { return b == kFullPrecision || (b >= 2 && b <= 16); };
    if (!ok(bits)) throw std::invalid_argument("bit width " + std::to_string(bits) + " not supported");
    for (const auto& [k, b] : overrides)
      if (!ok(b) || b == kFullPrecision) throw std::invalid_argument("override for '" + k + "' is invalid");
  }

  // Flat key/value form: "bits" plus one "bits.<layer>" per override.
  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv{{"bits", std::to_string(bits)}};
    for (const auto& [k, b] : overrides) kv["bits." + k] = std::to_string(b);
    return kv;
  }

  static BitPolicy from_kv(const std::map<std::string, std::string>& kv) {
    BitPolicy p;
    for (const auto& [k, v] : kv) {
      if (k == "bits") p.bits = std::stoi(v);
      else if (k.rfind("bits.", 0) == 0) p.overrides[k.substr(5)] = std::stoi(v);
    }
    p.validate();
    return p;
  }

  bool operator==(const BitPolicy&) const = default;
};

// A conv/affine layer's quantization hooks, filled in by apply_bit_policy.
struct LayerQuantizers {
  std::optional<QuantParams> weight;
  std::optional<QuantParams> activation;
};

// What a network must expose per quantizable layer.
struct QuantizableLayer {
  std::string name;
  bool boundary = false;        // first layer or a head output layer
  bool input_nonnegative = false;  // input comes from a ReLU (or a [0,1] image)
  LayerQuantizers* quantizers = nullptr;
  const Tensor* weight = nullptr;
};

template <typename Network>
concept Quantizable = requires(Network& n) {
  { n.quantizable_layers() } -> std::same_as<std::vector<QuantizableLayer>>;
};

// Wraps every layer with a weight quantizer (signed) and an input activation
// quantizer (unsigned when the input is non-negative). Weight steps are
// initialized from the weights; activation steps start at 1 and are
// expected to be calibrated on data by the caller.
template <Quantizable Network>
void apply_bit_policy(Network& net, const BitPolicy& policy, QuantMode mode) {
  policy.validate();
  auto layers = net.quantizable_layers();
  for (const auto& [name, b] : policy.overrides) {
    bool known = std::any_of(layers.begin(), layers.end(), [&](const auto& l) { return l.name == name; });
    if (!known) throw std::invalid_argument("bit policy names unknown layer '" + name + "'");
  }
  for (auto& layer : layers) {
    int b = policy.bits_for(layer.name, layer.boundary);
    if (b == BitPolicy::kFullPrecision) {
      *layer.quantizers = {};
      continue;
    }
    QuantParams wq(b, true, mode);
    wq.set_step(init_step(layer.weight->values(), wq));
    layer.quantizers->weight = std::move(wq);
    layer.quantizers->activation = QuantParams(b, !layer.input_nonnegative, mode);
  }
}

}  // namespace hqod
