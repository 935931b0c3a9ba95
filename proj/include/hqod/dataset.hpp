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

// Synthetic grayscale scenes of filled rectangles (class 0), circles
// (class 1) and triangles (class 2) with additive Gaussian pixel noise.
// Every scene is a pure function of (seed, index).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hqod/box.hpp"
#include "hqod/detector.hpp"
#include "hqod/evaluation.hpp"
#include "hqod/random.hpp"
#include "hqod/tensor.hpp"

namespace hqod {

enum ShapeClass : int { kRectangle = 0, kCircle = 1, kTriangle = 2 };

struct DatasetOptions {
  std::size_t image_size = 64;
  std::size_t max_objects = 4;
  double min_extent = 10.0;
  double max_extent = 30.0;
  double noise_sigma = 0.05;
  double max_overlap_iou = 0.3;
};

struct ShapeScene {
  std::vector<double> image;  // image_size^2, row-major, values in [0, 1]
  std::vector<GroundTruth> gts;
  std::uint64_t seed = 0;
  std::size_t index = 0;
};

namespace detail {

inline bool inside_triangle(double px, double py, const std::array<std::pair<double, double>, 3>& v) {
  auto cross = [](std::pair<double, double> a, std::pair<double, double> b, double x, double y) {
    return (b.first - a.first) * (y - a.second) - (b.second - a.second) * (x - a.first);
  };
  double d0 = cross(v[0], v[1], px, py), d1 = cross(v[1], v[2], px, py), d2 = cross(v[2], v[0], px, py);
  bool neg = d0 < 0 || d1 < 0 || d2 < 0;
  bool pos = d0 > 0 || d1 > 0 || d2 > 0;
  return !(neg && pos);
}

}  // namespace detail

inline ShapeScene generate_scene(std::uint64_t seed, std::size_t index, const DatasetOptions& opt = {}) {
  Rng rng(Rng::mix(seed, index));
  const std::size_t S = opt.image_size;
  const double Sd = static_cast<double>(S);
  ShapeScene scene;
  scene.seed = seed;
  scene.index = index;
  scene.image.assign(S * S, 0.0);

  const std::size_t wanted = 1 + rng.below(opt.max_objects);
  for (std::size_t k = 0; k < wanted; ++k) {
    const int cls = static_cast<int>(rng.below(3));
    const double intensity = rng.uniform(0.4, 1.0);
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      double w = rng.uniform(opt.min_extent, opt.max_extent);
      double h = cls == kCircle ? w : rng.uniform(opt.min_extent, opt.max_extent);
      double x1 = rng.uniform(0.0, Sd - w), y1 = rng.uniform(0.0, Sd - h);
      box = {x1, y1, x1 + w, y1 + h};
      placed = std::none_of(scene.gts.begin(), scene.gts.end(),
                            [&](const GroundTruth& g) { return iou(g.box, box) > opt.max_overlap_iou; });
    }
    if (!placed) break;
    const double apex = rng.uniform(box.x1, box.x2);
    const std::array<std::pair<double, double>, 3> tri{
        {{apex, box.y1}, {box.x1, box.y2}, {box.x2, box.y2}}};
    const double cx = 0.5 * (box.x1 + box.x2), cy = 0.5 * (box.y1 + box.y2), r = 0.5 * box.width();
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        if (!box.contains(px, py)) continue;
        bool in = false;
        switch (cls) {
          case kRectangle: in = true; break;
          case kCircle: in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r; break;
          case kTriangle: in = detail::inside_triangle(px, py, tri); break;
        }
        if (in) scene.image[y * S + x] = intensity;
      }
    }
    scene.gts.push_back({box, cls});
  }
  for (auto& v : scene.image) v = std::clamp(v + opt.noise_sigma * rng.normal(), 0.0, 1.0);
  return scene;
}

inline std::vector<ShapeScene> generate_dataset(std::uint64_t seed, std::size_t n, const DatasetOptions& opt = {}) {
  if (n == 0) throw std::invalid_argument("dataset size must be positive");
  std::vector<ShapeScene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(seed, i, opt));
  return out;
}

inline std::string dataset_id(std::uint64_t seed, std::size_t n) {
  return "shapes-s" + std::to_string(seed) + "-n" + std::to_string(n);
}

inline std::string scene_id(const ShapeScene& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img-%06zu", s.index);
  return buf;
}

// [B, 1, S, S] batch of the selected scenes.
inline Tensor batch_images(const std::vector<ShapeScene>& scenes, std::span<const std::size_t> idx) {
  if (idx.empty()) throw std::invalid_argument("empty batch");
  const std::size_t px = scenes[idx[0]].image.size();
  const auto S = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(px))));
  std::vector<double> v;
  v.reserve(idx.size() * px);
  for (auto i : idx) v.insert(v.end(), scenes[i].image.begin(), scenes[i].image.end());
  return Tensor({idx.size(), 1, S, S}, std::move(v));
}

inline std::vector<ImageRecord> ground_truth_records(const std::vector<ShapeScene>& scenes) {
  std::vector<ImageRecord> out;
  for (const auto& s : scenes) out.push_back({scene_id(s), {}, s.gts});
  return out;
}

// On disk: <dir>/images.bin ("HQODIMG1", u32 n, u32 h, u32 w, float64 pixels),
// <dir>/gt.json (ground-truth schema) and <dir>/meta.json.
inline void save_dataset(const std::vector<ShapeScene>& scenes, std::uint64_t seed, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "images.bin", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write images to '" + dir + "'");
    os.write("HQODIMG1", 8);
    const auto S = static_cast<std::uint32_t>(std::lround(std::sqrt(static_cast<double>(scenes.at(0).image.size()))));
    detail::put_u32(os, static_cast<std::uint32_t>(scenes.size()));
    detail::put_u32(os, S);
    detail::put_u32(os, S);
    for (const auto& s : scenes)
      for (double v : s.image) detail::put_f64(os, v);
  }
  {
    std::ofstream os(fs::path(dir) / "gt.json");
    os << records_to_json(ground_truth_records(scenes), false).dump(1) << "\n";
  }
  {
    std::ofstream os(fs::path(dir) / "meta.json");
    nlohmann::json meta = {{"seed", seed}, {"n", scenes.size()}, {"dataset_id", dataset_id(seed, scenes.size())}};
    os << meta.dump(2) << "\n";
  }
}

struct LoadedDataset {
  std::vector<ShapeScene> scenes;
  std::string id;
};

inline LoadedDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  LoadedDataset out;
  std::ifstream is(fs::path(dir) / "images.bin", std::ios::binary);
  if (!is) throw std::runtime_error("no images.bin under '" + dir + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "HQODIMG1") throw std::runtime_error("bad image file in '" + dir + "'");
  auto n = detail::get_uint(is, 4), h = detail::get_uint(is, 4), w = detail::get_uint(is, 4);
  auto gts = ingest_ground_truth((fs::path(dir) / "gt.json").string());
  if (gts.size() != n) throw std::runtime_error("gt.json and images.bin disagree on the image count");
  auto meta = nlohmann::json::parse(detail::read_file((fs::path(dir) / "meta.json").string()));
  out.id = meta.at("dataset_id").get<std::string>();
  auto seed = meta.at("seed").get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    ShapeScene s;
    s.seed = seed;
    s.index = static_cast<std::size_t>(i);
    s.image.resize(h * w);
    for (auto& v : s.image) v = detail::get_f64(is);
    s.gts = gts[i].gts;
    out.scenes.push_back(std::move(s));
  }
  return out;
}

}  // namespace hqod
