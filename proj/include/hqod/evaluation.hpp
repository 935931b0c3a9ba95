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

// COCO-style AP and the task-harmony diagnostics computed on true positives
// after NMS.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hqod/box.hpp"

namespace hqod {

// Per-image detections and ground truths, keyed by image id.
struct ImageRecord {
  std::string image_id;
  std::vector<Detection> detections;
  std::vector<GroundTruth> gts;
};

struct MatchResult {
  std::vector<bool> tp;          // per detection, in input order
  std::vector<int> matched_gt;   // -1 when unmatched
  std::vector<double> match_iou; // IoU with the matched ground truth, 0 otherwise
};

// Greedy COCO matching of score-sorted detections: each takes the unmatched
// same-class ground truth with the highest IoU >= threshold.
inline MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                    double iou_threshold) {
  MatchResult m;
  m.tp.assign(dets.size(), false);
  m.matched_gt.assign(dets.size(), -1);
  m.match_iou.assign(dets.size(), 0.0);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = iou_threshold;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != dets[d].class_id) continue;
      double v = iou(dets[d].box, gts[g].box);
      if (v >= best && (best_g < 0 || v > best)) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      taken[static_cast<std::size_t>(best_g)] = true;
      m.tp[d] = true;
      m.matched_gt[d] = best_g;
      m.match_iou[d] = best;
    }
  }
  return m;
}

struct ScoredOutcome {
  double score = 0;
  bool tp = false;
};

// 101-point interpolated AP. Returns nullopt when there are no ground
// truths (the class is excluded from means).
inline std::optional<double> average_precision(std::vector<ScoredOutcome> outcomes, std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  std::stable_sort(outcomes.begin(), outcomes.end(),
                   [](const ScoredOutcome& a, const ScoredOutcome& b) { return a.score > b.score; });
  const std::size_t n = outcomes.size();
  std::vector<double> precision(n), recall(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (outcomes[i].tp ? tp : fp) += 1;
    recall[i] = tp / static_cast<double>(num_gt);
    precision[i] = tp / (tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double acc = 0;
  for (int k = 0; k <= 100; ++k) {
    double r = static_cast<double>(k) / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) acc += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return acc / 101.0;
}

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct APResult {
  std::vector<double> thresholds;
  // per_class[c][t]; nullopt for classes without ground truth
  std::vector<std::vector<std::optional<double>>> per_class;
  double map = 0;
  double ap50 = 0;
  double ap75 = 0;
};

// COCO protocol: per class and threshold, detections from all images are
// ranked together; mAP is the mean over classes then thresholds.
inline APResult map_coco(const std::vector<ImageRecord>& images, std::size_t num_classes) {
  APResult r;
  r.thresholds = coco_iou_thresholds();
  const std::size_t T = r.thresholds.size();
  r.per_class.assign(num_classes, std::vector<std::optional<double>>(T));
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t num_gt = 0;
    for (const auto& im : images)
      num_gt += static_cast<std::size_t>(
          std::count_if(im.gts.begin(), im.gts.end(), [&](const GroundTruth& g) { return g.class_id == int(c); }));
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<ScoredOutcome> outcomes;
      for (const auto& im : images) {
        std::vector<Detection> dets;
        for (const auto& d : im.detections)
          if (d.class_id == int(c)) dets.push_back(d);
        std::stable_sort(dets.begin(), dets.end(),
                         [](const Detection& a, const Detection& b) { return a.score > b.score; });
        std::vector<GroundTruth> gts;
        for (const auto& g : im.gts)
          if (g.class_id == int(c)) gts.push_back(g);
        auto m = match_detections(dets, gts, r.thresholds[t]);
        for (std::size_t i = 0; i < dets.size(); ++i) outcomes.push_back({dets[i].score, m.tp[i]});
      }
      r.per_class[c][t] = average_precision(std::move(outcomes), num_gt);
    }
  }
  auto mean_at = [&](std::size_t t) {
    double s = 0;
    std::size_t k = 0;
    for (const auto& pc : r.per_class)
      if (pc[t]) {
        s += *pc[t];
        ++k;
      }
    return k ? s / static_cast<double>(k) : 0.0;
  };
  double s = 0;
  for (std::size_t t = 0; t < T; ++t) s += mean_at(t);
  r.map = s / static_cast<double>(T);
  r.ap50 = mean_at(0);
  r.ap75 = mean_at(5);
  return r;
}

// ---------------------------------------------------------------------------
// Harmony diagnostics

inline constexpr std::size_t kGapBins = 10;
inline constexpr std::size_t kIouIntervals = 5;  // [0.5,0.6) ... [0.9,1.0]
inline constexpr double kHarmonyMatchIou = 0.5;

struct HarmonyReport {
  std::string dataset_id;
  bool empty = true;
  std::array<std::size_t, kGapBins> gap_counts{};
  std::array<double, kGapBins> gap_histogram{};  // proportions; all zero when empty
  std::array<std::size_t, kIouIntervals> iou_interval_counts{};
  std::vector<std::pair<double, double>> joint_samples;  // (p, u) per TP
  double mean_gap = 0;

  std::size_t tp_count() const { return joint_samples.size(); }
  bool operator==(const HarmonyReport&) const = default;
};

inline std::size_t gap_bin(double gap) {
  auto b = static_cast<std::size_t>(std::floor(gap * 10.0));
  return std::min(b, kGapBins - 1);
}

// IoU interval index for a TP (u >= 0.5); the last interval is closed.
inline std::size_t iou_interval(double u) {
  auto b = static_cast<long long>(std::floor(u * 10.0)) - 5;
  return std::min(static_cast<std::size_t>(std::max(b, 0LL)), kIouIntervals - 1);
}

// Builds the report from (p, u) pairs of true positives.
inline HarmonyReport harmony_report_from_pairs(std::vector<std::pair<double, double>> pairs,
                                               std::string dataset_id = {}) {
  HarmonyReport r;
  r.dataset_id = std::move(dataset_id);
  std::sort(pairs.begin(), pairs.end());
  for (const auto& [p, u] : pairs) {
    if (!(p >= 0 && p <= 1 && u >= 0 && u <= 1)) throw std::invalid_argument("harmony pair outside [0,1]");
    double gap = std::fabs(p - u);
    ++r.gap_counts[gap_bin(gap)];
    if (u >= kHarmonyMatchIou) ++r.iou_interval_counts[iou_interval(u)];
    r.mean_gap += gap;
  }
  r.joint_samples = std::move(pairs);
  r.empty = r.joint_samples.empty();
  if (!r.empty) {
    double n = static_cast<double>(r.joint_samples.size());
    r.mean_gap /= n;
    for (std::size_t b = 0; b < kGapBins; ++b) r.gap_histogram[b] = static_cast<double>(r.gap_counts[b]) / n;
  }
  return r;
}

// TPs are post-NMS detections matched at IoU >= 0.5; p is the detection
// score and u its match IoU.
inline HarmonyReport harmony_report(const std::vector<ImageRecord>& images, std::string dataset_id = {}) {
  std::vector<std::pair<double, double>> pairs;
  for (const auto& im : images) {
    auto dets = im.detections;
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    auto m = match_detections(dets, im.gts, kHarmonyMatchIou);
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (m.tp[i]) pairs.emplace_back(std::clamp(dets[i].score, 0.0, 1.0), std::min(m.match_iou[i], 1.0));
  }
  return harmony_report_from_pairs(std::move(pairs), std::move(dataset_id));
}

struct ReportDelta {
  std::array<long long, kIouIntervals> interval_count_delta{};
  std::array<double, kGapBins> gap_proportion_delta{};
  double mean_gap_delta = 0;
};

// b - a, bin by bin.
inline ReportDelta compare_reports(const HarmonyReport& a, const HarmonyReport& b) {
  if (a.dataset_id != b.dataset_id) {
    throw std::invalid_argument("reports come from different evaluation sets ('" + a.dataset_id + "' vs '" +
                                b.dataset_id + "')");
  }
  ReportDelta d;
  for (std::size_t i = 0; i < kIouIntervals; ++i)
    d.interval_count_delta[i] =
        static_cast<long long>(b.iou_interval_counts[i]) - static_cast<long long>(a.iou_interval_counts[i]);
  for (std::size_t i = 0; i < kGapBins; ++i) d.gap_proportion_delta[i] = b.gap_histogram[i] - a.gap_histogram[i];
  d.mean_gap_delta = b.mean_gap - a.mean_gap;
  return d;
}

// ---------------------------------------------------------------------------
// JSON interchange
//
// Predictions: [{"image_id": str, "detections": [{"box": [x1,y1,x2,y2],
//               "class_id": int, "score": float}, ...]}, ...]
// Ground truth: same, without "score".

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string record_name(std::size_t i, const nlohmann::json& rec) {
  std::string id = rec.is_object() && rec.contains("image_id") && rec["image_id"].is_string()
                       ? rec["image_id"].get<std::string>()
                       : "?";
  return "record " + std::to_string(i) + " (image_id '" + id + "')";
}

inline Box parse_box(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4)
    throw SchemaError(where + ": 'box' must be an array of 4 numbers");
  for (const auto& v : j)
    if (!v.is_number()) throw SchemaError(where + ": 'box' must be an array of 4 numbers");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw SchemaError(where + ": inverted or empty box");
  return b;
}

// Shared reader; `with_score` selects the prediction schema.
inline std::vector<ImageRecord> parse_records(const std::string& text, bool with_score, const std::string& source) {
  std::vector<ImageRecord> out;
  if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) return out;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(source + ": " + e.what());
  }
  if (!doc.is_array()) throw SchemaError(source + ": top level must be a list");
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& rec = doc[i];
    std::string where = source + ": " + record_name(i, rec);
    if (!rec.is_object() || !rec.contains("image_id") || !rec["image_id"].is_string())
      throw SchemaError(where + ": missing string 'image_id'");
    if (!rec.contains("detections") || !rec["detections"].is_array())
      throw SchemaError(where + ": missing list 'detections'");
    ImageRecord im;
    im.image_id = rec["image_id"].get<std::string>();
    if (seen.count(im.image_id)) throw SchemaError(where + ": duplicate image_id");
    seen[im.image_id] = i;
    for (std::size_t k = 0; k < rec["detections"].size(); ++k) {
      const auto& d = rec["detections"][k];
      std::string dw = where + " detection " + std::to_string(k);
      if (!d.is_object() || !d.contains("box")) throw SchemaError(dw + ": missing 'box'");
      if (!d.contains("class_id") || !d["class_id"].is_number_integer() || d["class_id"].get<long long>() < 0)
        throw SchemaError(dw + ": 'class_id' must be a non-negative integer");
      Box b = parse_box(d["box"], dw);
      int cls = d["class_id"].get<int>();
      if (with_score) {
        if (!d.contains("score") || !d["score"].is_number()) throw SchemaError(dw + ": missing numeric 'score'");
        double s = d["score"].get<double>();
        if (!(s >= 0.0 && s <= 1.0)) throw SchemaError(dw + ": score " + d["score"].dump() + " outside [0,1]");
        im.detections.push_back({b, cls, s, k});
      } else {
        im.gts.push_back({b, cls});
      }
    }
    out.push_back(std::move(im));
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::vector<ImageRecord> parse_predictions(const std::string& text, const std::string& source = "<input>") {
  return detail::parse_records(text, true, source);
}
inline std::vector<ImageRecord> parse_ground_truth(const std::string& text, const std::string& source = "<input>") {
  return detail::parse_records(text, false, source);
}
inline std::vector<ImageRecord> ingest_predictions(const std::string& path) {
  return parse_predictions(detail::read_file(path), path);
}
inline std::vector<ImageRecord> ingest_ground_truth(const std::string& path) {
  return parse_ground_truth(detail::read_file(path), path);
}

inline nlohmann::json records_to_json(const std::vector<ImageRecord>& images, bool predictions) {
  auto out = nlohmann::json::array();
  for (const auto& im : images) {
    auto dets = nlohmann::json::array();
    if (predictions) {
      for (const auto& d : im.detections)
        dets.push_back({{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"class_id", d.class_id}, {"score", d.score}});
    } else {
      for (const auto& g : im.gts)
        dets.push_back({{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}}, {"class_id", g.class_id}});
    }
    out.push_back({{"image_id", im.image_id}, {"detections", dets}});
  }
  return out;
}

// Joins predictions with ground truth by image id. Images present in only
// one file take an empty list for the other.
inline std::vector<ImageRecord> join_records(const std::vector<ImageRecord>& preds,
                                             const std::vector<ImageRecord>& gts) {
  std::map<std::string, ImageRecord> by_id;
  for (const auto& g : gts) by_id[g.image_id] = {g.image_id, {}, g.gts};
  for (const auto& p : preds) {
    auto& rec = by_id[p.image_id];
    rec.image_id = p.image_id;
    rec.detections = p.detections;
  }
  std::vector<ImageRecord> out;
  for (auto& [id, rec] : by_id) out.push_back(std::move(rec));
  return out;
}

inline nlohmann::json to_json(const APResult& r) {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    auto row = nlohmann::json::array();
    for (const auto& v : c) row.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    pc.push_back(row);
  }
  return {{"mAP", r.map}, {"AP50", r.ap50}, {"AP75", r.ap75}, {"thresholds", r.thresholds}, {"per_class", pc}};
}

inline APResult ap_result_from_json(const nlohmann::json& j) {
  APResult r;
  r.map = j.at("mAP").get<double>();
  r.ap50 = j.at("AP50").get<double>();
  r.ap75 = j.at("AP75").get<double>();
  r.thresholds = j.at("thresholds").get<std::vector<double>>();
  for (const auto& c : j.at("per_class")) {
    std::vector<std::optional<double>> row;
    for (const auto& v : c) row.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    r.per_class.push_back(row);
  }
  return r;
}

inline nlohmann::json to_json(const HarmonyReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [p, u] : r.joint_samples) pairs.push_back({p, u});
  return {{"dataset_id", r.dataset_id},
          {"empty", r.empty},
          {"gap_counts", r.gap_counts},
          {"gap_histogram", r.gap_histogram},
          {"iou_interval_counts", r.iou_interval_counts},
          {"mean_gap", r.mean_gap},
          {"tp_count", r.tp_count()},
          {"joint_samples", pairs}};
}

inline HarmonyReport harmony_report_from_json(const nlohmann::json& j) {
  HarmonyReport r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.empty = j.at("empty").get<bool>();
  r.gap_counts = j.at("gap_counts").get<std::array<std::size_t, kGapBins>>();
  r.gap_histogram = j.at("gap_histogram").get<std::array<double, kGapBins>>();
  r.iou_interval_counts = j.at("iou_interval_counts").get<std::array<std::size_t, kIouIntervals>>();
  r.mean_gap = j.at("mean_gap").get<double>();
  for (const auto& pr : j.at("joint_samples")) r.joint_samples.emplace_back(pr[0].get<double>(), pr[1].get<double>());
  return r;
}

}  // namespace hqod
