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

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "hqod/tensor.hpp"

namespace hqod {

// Axis-aligned box in pixel coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
  bool operator==(const Box&) const = default;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
  bool operator==(const GroundTruth&) const = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  std::size_t cell = 0;  // originating grid cell, used for deterministic tie-breaks
  bool operator==(const Detection&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return w > 0 && h > 0 ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline std::vector<std::vector<double>> iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b) {
  std::vector<std::vector<double>> m(a.size(), std::vector<double>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m[i][j] = iou(a[i], b[j]);
  return m;
}

// Differentiable batch of boxes: four same-shape coordinate tensors.
struct BoxTensors {
  Tensor x1, y1, x2, y2;

  static BoxTensors constant(const std::vector<Box>& boxes) {
    std::vector<double> a, b, c, d;
    for (const auto& bx : boxes) {
      a.push_back(bx.x1);
      b.push_back(bx.y1);
      c.push_back(bx.x2);
      d.push_back(bx.y2);
    }
    return {Tensor::vector(a), Tensor::vector(b), Tensor::vector(c), Tensor::vector(d)};
  }
  std::size_t size() const { return x1.size(); }
  Box at(std::size_t i) const { return {x1[i], y1[i], x2[i], y2[i]}; }
};

struct OverlapTensors {
  Tensor inter, uni, enclose;
};

// Degenerate predictions have their extents clamped at zero.
inline OverlapTensors overlap(const BoxTensors& a, const BoxTensors& b) {
  auto zero = Tensor::scalar(0.0);
  auto area_a = maximum(a.x2 - a.x1, zero) * maximum(a.y2 - a.y1, zero);
  auto area_b = maximum(b.x2 - b.x1, zero) * maximum(b.y2 - b.y1, zero);
  auto iw = maximum(minimum(a.x2, b.x2) - maximum(a.x1, b.x1), zero);
  auto ih = maximum(minimum(a.y2, b.y2) - maximum(a.y1, b.y1), zero);
  auto inter = iw * ih;
  auto uni = area_a + area_b - inter;
  auto ew = maximum(a.x2, b.x2) - minimum(a.x1, b.x1);
  auto eh = maximum(a.y2, b.y2) - minimum(a.y1, b.y1);
  return {inter, uni, ew * eh};
}

inline Tensor iou(const BoxTensors& a, const BoxTensors& b) {
  auto o = overlap(a, b);
  return o.inter / maximum(o.uni, Tensor::scalar(1e-12));
}

inline Tensor giou(const BoxTensors& a, const BoxTensors& b) {
  auto o = overlap(a, b);
  auto uni = maximum(o.uni, Tensor::scalar(1e-12));
  auto enclose = maximum(o.enclose, Tensor::scalar(1e-12));
  return o.inter / uni - (enclose - uni) / enclose;
}

}  // namespace hqod
