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

// Detection objectives. Per-positive quantities are 1-d tensors indexed by
// positive sample; p is the score of the matched ground-truth class and u the
// IoU of the decoded box against its ground truth.
//
//   c       = p^u * u^p                      (exponents detached)
//   L_tcorr = (1 + |p - u|) (e^-c - e^-1)    (weight detached)
//   L_hiou  = (1 + u)^gamma (1 - u)
//   L       = L_od + (1/P) sum(L_tcorr + sigma L_hiou)

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "hqod/box.hpp"
#include "hqod/tensor.hpp"

namespace hqod {

enum class LossMode { Baseline, TCorr, Hqod };

inline std::string_view to_string(LossMode m) {
  switch (m) {
    case LossMode::Baseline: return "BASELINE";
    case LossMode::TCorr: return "TCORR";
    case LossMode::Hqod: return "HQOD";
  }
  return "?";
}

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "BASELINE") return LossMode::Baseline;
  if (s == "TCORR") return LossMode::TCorr;
  if (s == "HQOD") return LossMode::Hqod;
  throw std::invalid_argument("unknown loss mode '" + std::string(s) + "'");
}

struct LossConfig {
  double gamma = 0.8;  // HIoU exponent
  double sigma = 1.5;  // HIoU weight
  LossMode mode = LossMode::Baseline;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double eps = 1e-6;  // floor for p and u

  void validate() const {
    if (!(gamma > 0)) throw std::invalid_argument("gamma must be positive");
    if (!(sigma >= 0)) throw std::invalid_argument("sigma must be non-negative");
    if (!(eps > 0 && eps < 1e-2)) throw std::invalid_argument("eps must lie in (0, 0.01)");
    if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw std::invalid_argument("focal alpha must lie in [0, 1]");
    if (!(focal_gamma >= 0)) throw std::invalid_argument("focal gamma must be non-negative");
  }
};

struct LossBreakdown {
  double total = 0;
  double cls_component = 0;   // (sum over positives and negatives) / max(P, 1)
  double reg_component = 0;   // sum over positives / max(P, 1)
  double tcorr_component = 0; // mean over positives, reported in every mode
  double hiou_component = 0;  // mean over positives, unweighted by sigma
  std::size_t num_pos = 0;
  std::size_t num_neg = 0;
};

inline Tensor task_correlation(const Tensor& p, const Tensor& u, double eps = 1e-6) {
  auto pc = clamp(p, eps, 1.0);
  auto uc = clamp(u, eps, 1.0);
  return pow(pc, detach(uc)) * pow(uc, detach(pc));
}

inline Tensor tcorr_loss(const Tensor& p, const Tensor& u, double eps = 1e-6) {
  auto c = task_correlation(p, u, eps);
  auto alpha = 1.0 + abs(detach(clamp(p, eps, 1.0)) - detach(clamp(u, eps, 1.0)));
  return alpha * (exp(-c) - std::exp(-1.0));
}

inline Tensor hiou_loss(const Tensor& u, double gamma = 0.8) {
  return pow(1.0 + u, Tensor::scalar(gamma)) * (1.0 - u);
}

// Per-element sigmoid focal loss on probabilities; targets are 0/1.
inline Tensor focal_elementwise(const Tensor& scores, const Tensor& targets, double alpha = 0.25,
                                double gamma = 2.0) {
  auto pt = scores * targets + (1.0 - scores) * (1.0 - targets);
  auto alpha_t = targets * alpha + (1.0 - targets) * (1.0 - alpha);
  auto ce = -ln(clamp(pt, 1e-12, 1.0));
  return alpha_t * pow(1.0 - pt, Tensor::scalar(gamma)) * ce;
}

inline Tensor focal_cls_loss(const Tensor& scores, const Tensor& targets, double alpha = 0.25,
                             double gamma = 2.0) {
  return sum(focal_elementwise(scores, targets, alpha, gamma));
}

// 1 - GIoU per box pair, in [0, 2].
inline Tensor reg_loss(const BoxTensors& pred, const BoxTensors& gt) { return 1.0 - giou(pred, gt); }

// Per-sample loss terms for one batch. Positive-indexed tensors are absent
// when the batch has no positives; cls_neg is absent when it has no
// negatives.
struct LossBatch {
  std::optional<Tensor> cls_pos;  // classification loss per positive (summed over classes)
  std::optional<Tensor> cls_neg;  // classification loss per negative
  std::optional<Tensor> reg;
  std::optional<Tensor> tcorr;
  std::optional<Tensor> hiou;
  std::size_t num_pos = 0;
  std::size_t num_neg = 0;
};

struct HqodLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// Standard detection loss plus the mode's harmony terms. With P = 0 the
// divisor is 1 and the harmony terms are skipped.
inline HqodLoss hqod_total(const LossBatch& batch, const LossConfig& cfg) {
  const double P = static_cast<double>(std::max<std::size_t>(batch.num_pos, 1));
  Tensor od = Tensor::scalar(0.0);
  LossBreakdown b;
  b.num_pos = batch.num_pos;
  b.num_neg = batch.num_neg;
  Tensor cls = Tensor::scalar(0.0);
  if (batch.num_pos > 0 && batch.cls_pos) cls = cls + sum(*batch.cls_pos);
  if (batch.num_neg > 0 && batch.cls_neg) cls = cls + sum(*batch.cls_neg);
  cls = cls / P;
  od = cls;
  b.cls_component = cls.item();
  if (batch.num_pos > 0 && batch.reg) {
    auto reg = sum(*batch.reg) / P;
    b.reg_component = reg.item();
    od = od + reg;
  }
  Tensor total = od;
  if (batch.num_pos > 0) {
    if (batch.tcorr) {
      auto t = sum(*batch.tcorr) / P;
      b.tcorr_component = t.item();
      if (cfg.mode != LossMode::Baseline) total = total + t;
    }
    if (batch.hiou) {
      auto h = sum(*batch.hiou) / P;
      b.hiou_component = h.item();
      if (cfg.mode == LossMode::Hqod) total = total + cfg.sigma * h;
    }
  }
  b.total = total.item();
  return {total, b};
}

// Fills the tcorr and hiou terms of a batch from per-positive p and u.
inline void attach_harmony_terms(LossBatch& batch, const Tensor& p, const Tensor& u, const LossConfig& cfg) {
  batch.tcorr = tcorr_loss(p, u, cfg.eps);
  batch.hiou = hiou_loss(clamp(u, cfg.eps, 1.0), cfg.gamma);
}

}  // namespace hqod
