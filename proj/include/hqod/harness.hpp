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

// Experiment orchestration: run configuration, FP32 pretraining, QAT
// fine-tuning, evaluation, sweeps and CSV export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hqod/dataset.hpp"
#include "hqod/detector.hpp"
#include "hqod/evaluation.hpp"
#include "hqod/harmony_losses.hpp"
#include "hqod/optim.hpp"
#include "hqod/quantization.hpp"

namespace hqod {

using LogFn = std::function<void(const std::string&)>;

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
  return x;
}

inline double parse_f64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(x))
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
  return x;
}

inline std::string hex64(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Write to a sibling temp file, then rename over the target.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    os << content;
    if (!os) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 2024;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t batch_size = 16;
  std::size_t pretrain_epochs = 30;
  double pretrain_lr = 1e-3;
  std::size_t qat_epochs = 20;
  double qat_lr = 1e-4;
  double step_lr_scale = 0.1;
  std::string optimizer = "adam";
  BitPolicy policy;
  QuantMode quant_mode = QuantMode::Lsq;
  LossConfig loss;
  std::string output_dir;

  // Sweep axes; empty means "use the scalar value above".
  std::vector<int> sweep_bits;
  std::vector<QuantMode> sweep_quant_modes;
  std::vector<LossMode> sweep_loss_modes;
  std::vector<std::uint64_t> sweep_seeds;
  std::size_t jobs = 1;

  bool fp32() const { return !policy.quantized(); }

  void validate() const {
    if (train_size == 0 || val_size == 0) throw std::invalid_argument("dataset sizes must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(pretrain_lr > 0) || !(qat_lr > 0)) throw std::invalid_argument("learning rates must be positive");
    if (!(step_lr_scale > 0)) throw std::invalid_argument("step_lr_scale must be positive");
    if (optimizer != "adam") throw std::invalid_argument("unsupported optimizer '" + optimizer + "'");
    if (jobs == 0) throw std::invalid_argument("jobs must be positive");
    policy.validate();
    loss.validate();
    for (int b : sweep_bits) BitPolicy{b, {}}.validate();
  }

  // Keys that determine the numbers a single run produces. QAT-only keys
  // are left out of FP32 runs so every QAT cell shares one FP32 parent.
  std::map<std::string, std::string> canonical_kv() const {
    std::map<std::string, std::string> kv{
        {"seed", std::to_string(seed)},
        {"data_seed", std::to_string(data_seed)},
        {"train_size", std::to_string(train_size)},
        {"val_size", std::to_string(val_size)},
        {"batch_size", std::to_string(batch_size)},
        {"pretrain_epochs", std::to_string(pretrain_epochs)},
        {"pretrain_lr", detail::fmt_double(pretrain_lr)},
        {"optimizer", optimizer},
        {"focal_gamma", detail::fmt_double(loss.focal_gamma)},
        {"focal_alpha", detail::fmt_double(loss.focal_alpha)},
        {"eps", detail::fmt_double(loss.eps)},
    };
    for (auto& [k, v] : policy.to_kv()) kv[k] = v;
    if (!fp32()) {
      kv["qat_epochs"] = std::to_string(qat_epochs);
      kv["qat_lr"] = detail::fmt_double(qat_lr);
      kv["step_lr_scale"] = detail::fmt_double(step_lr_scale);
      kv["quantizer"] = std::string(to_string(quant_mode));
      kv["loss_mode"] = std::string(to_string(loss.mode));
      kv["gamma"] = detail::fmt_double(loss.gamma);
      kv["sigma"] = detail::fmt_double(loss.sigma);
    }
    return kv;
  }

  std::string canonical_text() const {
    std::string out;
    for (const auto& [k, v] : canonical_kv()) out += k + "=" + v + "\n";
    return out;
  }

  std::string hash() const { return detail::hex64(detail::fnv1a(canonical_text())); }

  // Same run without quantization: the FP32 parent of a QAT run.
  RunConfig fp32_parent() const {
    RunConfig c = *this;
    c.policy = {};
    c.loss.mode = LossMode::Baseline;
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = canonical_kv();
    j["output_dir"] = output_dir;
    return j;
  }
};

// Flat "key = value" text; '#' starts a comment. Unknown keys are errors.
inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  RunConfig c;
  std::map<std::string, std::string> bits_kv;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    auto where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw std::invalid_argument(where + ": expected key = value");
    std::string k = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    if (!seen.insert(k).second) throw std::invalid_argument(where + ": duplicate key '" + k + "'");
    try {
      if (k == "seed") c.seed = detail::parse_u64(k, v);
      else if (k == "data_seed") c.data_seed = detail::parse_u64(k, v);
      else if (k == "train_size") c.train_size = detail::parse_u64(k, v);
      else if (k == "val_size") c.val_size = detail::parse_u64(k, v);
      else if (k == "batch_size") c.batch_size = detail::parse_u64(k, v);
      else if (k == "pretrain_epochs") c.pretrain_epochs = detail::parse_u64(k, v);
      else if (k == "pretrain_lr") c.pretrain_lr = detail::parse_f64(k, v);
      else if (k == "qat_epochs") c.qat_epochs = detail::parse_u64(k, v);
      else if (k == "qat_lr") c.qat_lr = detail::parse_f64(k, v);
      else if (k == "step_lr_scale") c.step_lr_scale = detail::parse_f64(k, v);
      else if (k == "optimizer") c.optimizer = v;
      else if (k == "bits" || k.rfind("bits.", 0) == 0) bits_kv[k] = std::to_string(detail::parse_u64(k, v));
      else if (k == "quantizer") c.quant_mode = parse_quant_mode(v);
      else if (k == "loss_mode") c.loss.mode = parse_loss_mode(v);
      else if (k == "gamma") c.loss.gamma = detail::parse_f64(k, v);
      else if (k == "sigma") c.loss.sigma = detail::parse_f64(k, v);
      else if (k == "focal_gamma") c.loss.focal_gamma = detail::parse_f64(k, v);
      else if (k == "focal_alpha") c.loss.focal_alpha = detail::parse_f64(k, v);
      else if (k == "eps") c.loss.eps = detail::parse_f64(k, v);
      else if (k == "output_dir") c.output_dir = v;
      else if (k == "jobs") c.jobs = detail::parse_u64(k, v);
      else if (k == "sweep.bits") {
        for (auto& s : detail::split(v, ',')) c.sweep_bits.push_back(static_cast<int>(detail::parse_u64(k, s)));
      } else if (k == "sweep.quantizers") {
        for (auto& s : detail::split(v, ',')) c.sweep_quant_modes.push_back(parse_quant_mode(s));
      } else if (k == "sweep.loss_modes") {
        for (auto& s : detail::split(v, ',')) c.sweep_loss_modes.push_back(parse_loss_mode(s));
      } else if (k == "sweep.seeds") {
        for (auto& s : detail::split(v, ',')) c.sweep_seeds.push_back(detail::parse_u64(k, s));
      } else {
        throw std::invalid_argument("unknown key '" + k + "'");
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
  }
  c.policy = BitPolicy::from_kv(bits_kv);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) { return parse_config(detail::read_file(path), path); }

// ---------------------------------------------------------------------------
// Data

struct Datasets {
  std::vector<ShapeScene> train, val;
  std::string train_id, val_id;
};

// Validation scenes come from the next seed, so they never repeat training ones.
inline Datasets make_datasets(const RunConfig& c) {
  return {generate_dataset(c.data_seed, c.train_size), generate_dataset(c.data_seed + 1, c.val_size),
          dataset_id(c.data_seed, c.train_size), dataset_id(c.data_seed + 1, c.val_size)};
}

// Permutation of [0, n) for one epoch; depends on (seed, epoch) only.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(Rng::mix(Rng::mix(seed, 0x5EED0DE), epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  APResult ap;
  HarmonyReport harmony;
  std::vector<ImageRecord> records;
};

inline EvalResult evaluate(const DetectorNet& net, const std::vector<ShapeScene>& scenes, const std::string& id,
                           std::size_t batch = 50) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: empty dataset");
  NoGradGuard guard;
  EvalResult r;
  for (std::size_t start = 0; start < scenes.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(scenes.size(), start + batch); ++i) idx.push_back(i);
    auto out = net.forward(batch_images(scenes, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& s = scenes[idx[k]];
      r.records.push_back({scene_id(s), postprocess(out, k, net.config()), s.gts});
    }
  }
  r.ap = map_coco(r.records, net.config().num_classes);
  r.harmony = harmony_report(r.records, id);
  return r;
}

// ---------------------------------------------------------------------------
// Records

struct RunRecord {
  std::string config_hash;
  RunConfig config;
  std::string stage;  // "fp32" or "qat"
  std::vector<LossBreakdown> epochs;
  APResult ap;
  HarmonyReport harmony;
  double wall_time_s = 0;
  std::size_t step_collapses = 0;
  std::string status = "ok";
  std::string error;
};

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"total", b.total},         {"cls", b.cls_component}, {"reg", b.reg_component}, {"tcorr", b.tcorr_component},
          {"hiou", b.hiou_component}, {"num_pos", b.num_pos},   {"num_neg", b.num_neg}};
}

inline LossBreakdown loss_breakdown_from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.total = j.at("total").get<double>();
  b.cls_component = j.at("cls").get<double>();
  b.reg_component = j.at("reg").get<double>();
  b.tcorr_component = j.at("tcorr").get<double>();
  b.hiou_component = j.at("hiou").get<double>();
  b.num_pos = j.at("num_pos").get<std::size_t>();
  b.num_neg = j.at("num_neg").get<std::size_t>();
  return b;
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back(to_json(e));
  return {{"config_hash", r.config_hash}, {"config", r.config.to_json()},   {"stage", r.stage},
          {"epochs", epochs},             {"ap", to_json(r.ap)},            {"harmony", to_json(r.harmony)},
          {"wall_time_s", r.wall_time_s}, {"step_collapses", r.step_collapses}, {"status", r.status},
          {"error", r.error}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  std::string text;
  for (const auto& [k, v] : j.at("config").items()) text += k + "=" + v.get<std::string>() + "\n";
  r.config = parse_config(text, "record config");
  r.stage = j.at("stage").get<std::string>();
  for (const auto& e : j.at("epochs")) r.epochs.push_back(loss_breakdown_from_json(e));
  r.ap = ap_result_from_json(j.at("ap"));
  r.harmony = harmony_report_from_json(j.at("harmony"));
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.step_collapses = j.at("step_collapses").get<std::size_t>();
  r.status = j.at("status").get<std::string>();
  r.error = j.at("error").get<std::string>();
  return r;
}

inline RunRecord load_record(const std::string& path) {
  return run_record_from_json(nlohmann::json::parse(detail::read_file(path)));
}

inline std::string loss_curve_csv(const RunRecord& r) {
  std::string out = "epoch,total,cls,reg,tcorr,hiou,num_pos,num_neg\n";
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    const auto& b = r.epochs[i];
    out += std::to_string(i + 1) + "," + detail::fmt_double(b.total) + "," + detail::fmt_double(b.cls_component) +
           "," + detail::fmt_double(b.reg_component) + "," + detail::fmt_double(b.tcorr_component) + "," +
           detail::fmt_double(b.hiou_component) + "," + std::to_string(b.num_pos) + "," +
           std::to_string(b.num_neg) + "\n";
  }
  return out;
}

// Run directory layout: config.json, record.json, weights.bin, loss_curve.csv.
inline void write_run_dir(const std::string& dir, const RunRecord& r, const DetectorNet* net) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  detail::write_atomic(fs::path(dir) / "config.json", r.config.to_json().dump(2) + "\n");
  detail::write_atomic(fs::path(dir) / "loss_curve.csv", loss_curve_csv(r));
  if (net) {
    std::ostringstream os(std::ios::binary);
    save_weights(*net, os);
    detail::write_atomic(fs::path(dir) / "weights.bin", os.str());
  }
  detail::write_atomic(fs::path(dir) / "record.json", to_json(r).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
  DetectorNet net;
  RunRecord record;
};

namespace detail {

inline void add_into(LossBreakdown& acc, const LossBreakdown& b) {
  acc.total += b.total;
  acc.cls_component += b.cls_component;
  acc.reg_component += b.reg_component;
  acc.tcorr_component += b.tcorr_component;
  acc.hiou_component += b.hiou_component;
  acc.num_pos += b.num_pos;
  acc.num_neg += b.num_neg;
}

// Per-epoch breakdowns hold batch means of the loss values and totals of
// the sample counts.
inline std::vector<LossBreakdown> run_epochs(DetectorNet& net, Adam& opt, const RunConfig& cfg, const LossConfig& lc,
                                             const Datasets& data, std::size_t epochs, std::size_t& collapses,
                                             const std::string& stage, const LogFn& log) {
  std::vector<LossBreakdown> curve;
  const std::size_t n = data.train.size();
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    auto order = epoch_order(cfg.seed, epoch, n);
    LossBreakdown acc;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      std::vector<std::vector<GroundTruth>> gts;
      for (auto i : idx) gts.push_back(data.train[i].gts);
      opt.zero_grad();
      auto out = net.forward(batch_images(data.train, idx));
      auto bl = detection_loss(out, gts, net.config(), lc);
      if (!std::isfinite(bl.loss.breakdown.total)) {
        throw std::runtime_error(stage + ": non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                 std::to_string(batches + 1) + " (cls " + fmt_double(bl.loss.breakdown.cls_component) +
                                 ", reg " + fmt_double(bl.loss.breakdown.reg_component) + ")");
      }
      backward(bl.loss.total);
      opt.step();
      for (auto& l : net.layers())
        for (auto* q : {&l.quant.weight, &l.quant.activation})
          if (*q && (*q)->clamp_step()) ++collapses;
      add_into(acc, bl.loss.breakdown);
      ++batches;
    }
    const double k = static_cast<double>(batches);
    acc.total /= k;
    acc.cls_component /= k;
    acc.reg_component /= k;
    acc.tcorr_component /= k;
    acc.hiou_component /= k;
    curve.push_back(acc);
    if (log) log(stage + " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(epochs) + " loss " + fmt_double(acc.total));
  }
  return curve;
}

inline std::vector<Tensor> handles(const std::vector<Tensor*>& ptrs) {
  std::vector<Tensor> out;
  for (auto* p : ptrs) out.push_back(*p);
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline TrainOutcome train_fp32(const RunConfig& config, const Datasets& data, const LogFn& log = {}) {
  config.validate();
  if (!config.fp32()) throw std::invalid_argument("train_fp32 needs bits = 32");
  auto t0 = std::chrono::steady_clock::now();
  DetectorNet net({}, config.seed);
  Adam opt({{detail::handles(net.weights()), config.pretrain_lr}});
  LossConfig lc = config.loss;
  lc.mode = LossMode::Baseline;
  RunRecord rec;
  rec.config = config;
  rec.config_hash = config.hash();
  rec.stage = "fp32";
  rec.epochs = detail::run_epochs(net, opt, config, lc, data, config.pretrain_epochs, rec.step_collapses, "fp32", log);
  auto ev = evaluate(net, data.val, data.val_id);
  rec.ap = ev.ap;
  rec.harmony = ev.harmony;
  rec.wall_time_s = detail::seconds_since(t0);
  return {std::move(net), std::move(rec)};
}

// Fine-tunes a copy of `init` with fake quantizers per the bit policy.
inline TrainOutcome train_qat(const RunConfig& config, const DetectorNet& init, const Datasets& data,
                              const LogFn& log = {}) {
  config.validate();
  if (config.fp32()) throw std::invalid_argument("train_qat needs a quantized bit policy");
  auto t0 = std::chrono::steady_clock::now();
  DetectorNet net = init.clone();
  net.clear_quantizers();
  apply_bit_policy(net, config.policy, config.quant_mode);
  {
    NoGradGuard guard;
    std::vector<std::size_t> first(std::min(config.batch_size, data.train.size()));
    auto order = epoch_order(config.seed, 0, data.train.size());
    std::copy_n(order.begin(), first.size(), first.begin());
    net.calibrate_activations(batch_images(data.train, first));
  }
  std::vector<Adam::Group> groups{{detail::handles(net.weights()), config.qat_lr}};
  auto qparams = net.quant_parameters();
  if (!qparams.empty()) groups.push_back({detail::handles(qparams), config.qat_lr * config.step_lr_scale});
  Adam opt(std::move(groups));
  RunRecord rec;
  rec.config = config;
  rec.config_hash = config.hash();
  rec.stage = "qat";
  rec.epochs = detail::run_epochs(net, opt, config, config.loss, data, config.qat_epochs, rec.step_collapses, "qat", log);
  auto ev = evaluate(net, data.val, data.val_id);
  rec.ap = ev.ap;
  rec.harmony = ev.harmony;
  rec.wall_time_s = detail::seconds_since(t0);
  return {std::move(net), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  std::uint64_t seed = 0;
  int bits = 32;
  QuantMode quant = QuantMode::Lsq;
  LossMode loss = LossMode::Baseline;
};

inline RunConfig cell_config(const RunConfig& base, const SweepCell& cell) {
  RunConfig c = base;
  c.seed = cell.seed;
  c.policy.bits = cell.bits;
  if (cell.bits == BitPolicy::kFullPrecision) c.policy.overrides.clear();
  c.quant_mode = cell.quant;
  c.loss.mode = cell.loss;
  c.sweep_bits.clear();
  c.sweep_quant_modes.clear();
  c.sweep_loss_modes.clear();
  c.sweep_seeds.clear();
  return c;
}

// Cartesian product of the sweep axes. FP32 cells ignore the quantizer
// and loss axes, so they appear once per seed.
inline std::vector<SweepCell> sweep_cells(const RunConfig& base) {
  auto bits = base.sweep_bits.empty() ? std::vector<int>{base.policy.bits} : base.sweep_bits;
  auto quants = base.sweep_quant_modes.empty() ? std::vector<QuantMode>{base.quant_mode} : base.sweep_quant_modes;
  auto losses = base.sweep_loss_modes.empty() ? std::vector<LossMode>{base.loss.mode} : base.sweep_loss_modes;
  auto seeds = base.sweep_seeds.empty() ? std::vector<std::uint64_t>{base.seed} : base.sweep_seeds;
  std::vector<SweepCell> out;
  for (auto s : seeds)
    for (int b : bits) {
      if (b == BitPolicy::kFullPrecision) {
        out.push_back({s, b, QuantMode::Lsq, LossMode::Baseline});
        continue;
      }
      for (auto q : quants)
        for (auto l : losses) out.push_back({s, b, q, l});
    }
  return out;
}

struct SweepOptions {
  std::string output_dir;  // empty: nothing written
  std::size_t jobs = 1;
  LogFn log;
};

namespace detail {

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline RunRecord failed_record(const RunConfig& c, const std::string& stage, const std::string& what) {
  RunRecord r;
  r.config = c;
  r.config_hash = c.hash();
  r.stage = stage;
  r.status = "failed";
  r.error = what;
  return r;
}

}  // namespace detail

// One record per cell, in cell order. FP32 parents are trained once per
// seed and shared by all QAT cells of that seed. A failing cell is
// recorded with status "failed" and the sweep carries on.
inline std::vector<RunRecord> run_sweep(const RunConfig& base, const std::vector<SweepCell>& cells,
                                        const SweepOptions& opt = {}) {
  base.validate();
  const Datasets data = make_datasets(base);
  std::mutex log_mu;
  auto log_for = [&](const std::string& tag) -> LogFn {
    if (!opt.log) return {};
    return [&, tag](const std::string& m) {
      std::lock_guard lock(log_mu);
      opt.log(tag + " " + m);
    };
  };
  auto persist = [&](const RunRecord& r, const DetectorNet* net) {
    if (opt.output_dir.empty()) return;
    write_run_dir((std::filesystem::path(opt.output_dir) / r.config_hash).string(), r, net);
  };

  std::vector<std::uint64_t> seeds;
  for (const auto& c : cells)
    if (std::find(seeds.begin(), seeds.end(), c.seed) == seeds.end()) seeds.push_back(c.seed);
  std::vector<std::optional<TrainOutcome>> parents(seeds.size());
  std::vector<RunRecord> parent_failures(seeds.size());
  detail::parallel_for(seeds.size(), opt.jobs, [&](std::size_t i) {
    auto cfg = cell_config(base, {seeds[i], BitPolicy::kFullPrecision, QuantMode::Lsq, LossMode::Baseline});
    try {
      parents[i] = train_fp32(cfg, data, log_for("[" + cfg.hash() + " fp32 seed " + std::to_string(seeds[i]) + "]"));
      persist(parents[i]->record, &parents[i]->net);
    } catch (const std::exception& e) {
      parent_failures[i] = detail::failed_record(cfg, "fp32", e.what());
      persist(parent_failures[i], nullptr);
    }
  });

  std::vector<RunRecord> out(cells.size());
  detail::parallel_for(cells.size(), opt.jobs, [&](std::size_t i) {
    const auto& cell = cells[i];
    auto cfg = cell_config(base, cell);
    std::size_t p = static_cast<std::size_t>(std::find(seeds.begin(), seeds.end(), cell.seed) - seeds.begin());
    if (cell.bits == BitPolicy::kFullPrecision) {
      out[i] = parents[p] ? parents[p]->record : parent_failures[p];
      return;
    }
    if (!parents[p]) {
      out[i] = detail::failed_record(cfg, "qat", "FP32 parent failed: " + parent_failures[p].error);
      persist(out[i], nullptr);
      return;
    }
    std::string tag = "[" + cfg.hash() + " " + std::string(to_string(cell.quant)) + " W" + std::to_string(cell.bits) +
                      " " + std::string(to_string(cell.loss)) + " seed " + std::to_string(cell.seed) + "]";
    try {
      auto res = train_qat(cfg, parents[p]->net, data, log_for(tag));
      persist(res.record, &res.net);
      out[i] = std::move(res.record);
    } catch (const std::exception& e) {
      out[i] = detail::failed_record(cfg, "qat", e.what());
      persist(out[i], nullptr);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Tables

struct SweepRow {
  std::string config_hash;
  std::uint64_t seed = 0;
  int bits = 32;
  std::string quantizer;
  std::string loss_mode;
  std::string status;
  double map = 0, ap50 = 0, ap75 = 0, mean_gap = 0;
  std::size_t tp_count = 0;
  std::array<double, kGapBins> gap{};
  std::array<std::size_t, kIouIntervals> iou{};
  bool operator==(const SweepRow&) const = default;
};

inline SweepRow sweep_row(const RunRecord& r) {
  SweepRow row;
  row.config_hash = r.config_hash;
  row.seed = r.config.seed;
  row.bits = r.config.policy.bits;
  row.quantizer = r.config.fp32() ? "NONE" : std::string(to_string(r.config.quant_mode));
  row.loss_mode = std::string(to_string(r.config.fp32() ? LossMode::Baseline : r.config.loss.mode));
  row.status = r.status;
  row.map = r.ap.map;
  row.ap50 = r.ap.ap50;
  row.ap75 = r.ap.ap75;
  row.mean_gap = r.harmony.mean_gap;
  row.tp_count = r.harmony.tp_count();
  row.gap = r.harmony.gap_histogram;
  row.iou = r.harmony.iou_interval_counts;
  return row;
}

inline std::string sweep_csv_header() {
  std::string h = "config_hash,seed,bits,quantizer,loss_mode,status,mAP,AP50,AP75,mean_gap,tp_count";
  for (std::size_t b = 0; b < kGapBins; ++b) h += ",gap_" + std::to_string(b);
  for (std::size_t k = 0; k < kIouIntervals; ++k) h += ",iou_" + std::to_string(k);
  return h;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = sweep_csv_header() + "\n";
  for (const auto& r : rows) {
    out += r.config_hash + "," + std::to_string(r.seed) + "," + std::to_string(r.bits) + "," + r.quantizer + "," +
           r.loss_mode + "," + r.status + "," + detail::fmt_double(r.map) + "," + detail::fmt_double(r.ap50) + "," +
           detail::fmt_double(r.ap75) + "," + detail::fmt_double(r.mean_gap) + "," + std::to_string(r.tp_count);
    for (double g : r.gap) out += "," + detail::fmt_double(g);
    for (auto c : r.iou) out += "," + std::to_string(c);
    out += "\n";
  }
  return out;
}

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != sweep_csv_header()) throw std::runtime_error("sweep table: unexpected header");
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = detail::split(line, ',');
    if (f.size() != 11 + kGapBins + kIouIntervals)
      throw std::runtime_error("sweep table: row " + std::to_string(rows.size() + 1) + " has " +
                               std::to_string(f.size()) + " fields");
    SweepRow r;
    r.config_hash = f[0];
    r.seed = detail::parse_u64("seed", f[1]);
    r.bits = static_cast<int>(detail::parse_u64("bits", f[2]));
    r.quantizer = f[3];
    r.loss_mode = f[4];
    r.status = f[5];
    r.map = detail::parse_f64("mAP", f[6]);
    r.ap50 = detail::parse_f64("AP50", f[7]);
    r.ap75 = detail::parse_f64("AP75", f[8]);
    r.mean_gap = detail::parse_f64("mean_gap", f[9]);
    r.tp_count = detail::parse_u64("tp_count", f[10]);
    for (std::size_t b = 0; b < kGapBins; ++b) r.gap[b] = detail::parse_f64("gap", f[11 + b]);
    for (std::size_t k = 0; k < kIouIntervals; ++k) r.iou[k] = detail::parse_u64("iou", f[11 + kGapBins + k]);
    rows.push_back(r);
  }
  return rows;
}

// Plot data: tp_scatter.csv, gap_hist.csv, iou_intervals.csv, ablation_table.csv.
inline void export_plot_data(const std::vector<RunRecord>& records, const std::string& out_dir) {
  if (records.empty()) throw std::invalid_argument("export_plot_data: no records");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw std::runtime_error("cannot create output directory '" + out_dir + "'");

  auto key = [](const SweepRow& r) {
    return r.config_hash + "," + std::to_string(r.seed) + "," + std::to_string(r.bits) + "," + r.quantizer + "," + r.loss_mode;
  };
  const std::string key_cols = "config_hash,seed,bits,quantizer,loss_mode";
  std::string scatter = key_cols + ",p,u\n";
  std::string gaps = key_cols + ",bin_lo,bin_hi,count,proportion\n";
  std::string ious = key_cols + ",iou_lo,iou_hi,count,proportion\n";
  struct Agg {
    std::size_t n = 0;
    double map = 0, ap50 = 0, ap75 = 0, gap0 = 0, mean_gap = 0;
  };
  std::map<std::tuple<int, std::string, std::string>, Agg> ablation;

  for (const auto& rec : records) {
    if (rec.status != "ok") continue;
    auto row = sweep_row(rec);
    auto k = key(row);
    for (const auto& [p, u] : rec.harmony.joint_samples)
      scatter += k + "," + detail::fmt_double(p) + "," + detail::fmt_double(u) + "\n";
    for (std::size_t b = 0; b < kGapBins; ++b)
      gaps += k + "," + detail::fmt_double(b / 10.0) + "," + detail::fmt_double((b + 1) / 10.0) + "," +
              std::to_string(rec.harmony.gap_counts[b]) + "," + detail::fmt_double(rec.harmony.gap_histogram[b]) + "\n";
    const double tp = static_cast<double>(rec.harmony.tp_count());
    for (std::size_t i = 0; i < kIouIntervals; ++i) {
      auto c = rec.harmony.iou_interval_counts[i];
      ious += k + "," + detail::fmt_double(0.5 + i / 10.0) + "," + detail::fmt_double(0.6 + i / 10.0) + "," +
              std::to_string(c) + "," + detail::fmt_double(tp > 0 ? static_cast<double>(c) / tp : 0.0) + "\n";
    }
    auto& a = ablation[{row.bits, row.quantizer, row.loss_mode}];
    ++a.n;
    a.map += row.map;
    a.ap50 += row.ap50;
    a.ap75 += row.ap75;
    a.gap0 += row.gap[0];
    a.mean_gap += row.mean_gap;
  }
  std::string table = "bits,quantizer,loss_mode,runs,mean_mAP,mean_AP50,mean_AP75,mean_gap0_proportion,mean_gap\n";
  for (const auto& [k, a] : ablation) {
    const double n = static_cast<double>(a.n);
    table += std::to_string(std::get<0>(k)) + "," + std::get<1>(k) + "," + std::get<2>(k) + "," + std::to_string(a.n) +
             "," + detail::fmt_double(a.map / n) + "," + detail::fmt_double(a.ap50 / n) + "," +
             detail::fmt_double(a.ap75 / n) + "," + detail::fmt_double(a.gap0 / n) + "," +
             detail::fmt_double(a.mean_gap / n) + "\n";
  }
  detail::write_atomic(fs::path(out_dir) / "tp_scatter.csv", scatter);
  detail::write_atomic(fs::path(out_dir) / "gap_hist.csv", gaps);
  detail::write_atomic(fs::path(out_dir) / "iou_intervals.csv", ious);
  detail::write_atomic(fs::path(out_dir) / "ablation_table.csv", table);
}

// All record.json files below a directory, sorted by path.
inline std::vector<RunRecord> collect_records(const std::string& dir) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(dir)) return {load_record(dir)};
  if (!fs::is_directory(dir)) throw std::runtime_error("no records at '" + dir + "'");
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "record.json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<RunRecord> out;
  for (const auto& p : paths) out.push_back(load_record(p.string()));
  return out;
}

}  // namespace hqod
