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

// Command-line front end for the HQOD lab.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "hqod/hqod.hpp"

namespace fs = std::filesystem;
using namespace hqod;

namespace {

void log_line(const std::string& m) { std::cerr << m << std::endl; }

std::string run_dir(const RunConfig& c) {
  return (fs::path(c.output_dir.empty() ? "runs" : c.output_dir) / c.hash()).string();
}

void print_summary(const RunRecord& r, const std::string& dir) {
  std::printf("%s %s mAP=%.4f AP50=%.4f AP75=%.4f tp=%zu gap0=%.4f -> %s\n", r.stage.c_str(), r.config_hash.c_str(),
              r.ap.map, r.ap.ap50, r.ap.ap75, r.harmony.tp_count(), r.harmony.gap_histogram[0], dir.c_str());
}

void write_eval(const std::string& out, const std::vector<ImageRecord>& records, const APResult& ap,
                const HarmonyReport& h) {
  fs::create_directories(out);
  detail::write_atomic(fs::path(out) / "predictions.json", records_to_json(records, true).dump(1) + "\n");
  nlohmann::json rep = {{"ap", to_json(ap)}, {"harmony", to_json(h)}};
  detail::write_atomic(fs::path(out) / "report.json", rep.dump(2) + "\n");
  std::printf("mAP=%.4f AP50=%.4f AP75=%.4f tp=%zu mean_gap=%.4f -> %s\n", ap.map, ap.ap50, ap.ap75, h.tp_count(),
              h.mean_gap, out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Harmonious quantization lab: QAT for a toy detector"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::string out, config, init_weights, weights, data, pred, gt, records;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen->add_option("--seed", seed, "Dataset seed")->required();
  gen->add_option("--n", n, "Number of scenes")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "FP32 pretraining");
  train->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);

  auto* qat = app.add_subcommand("qat", "Quantization-aware fine-tuning");
  qat->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);
  qat->add_option("--init-weights", init_weights, "FP32 weights to start from")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate weights on a dataset directory");
  eval->add_option("--weights", weights, "Weight file")->required();
  eval->add_option("--data", data, "Dataset directory from gen-data")->required();
  eval->add_option("--out", out, "Output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Run every cell of a sweep config");
  sweep->add_option("--config", config, "Sweep config file")->required()->check(CLI::ExistingFile);

  auto* analyze = app.add_subcommand("analyze", "Score prediction JSON against ground truth JSON");
  analyze->add_option("--pred", pred, "Predictions JSON")->required();
  analyze->add_option("--gt", gt, "Ground-truth JSON")->required();
  analyze->add_option("--out", out, "Output directory")->required();

  auto* plots = app.add_subcommand("export-plots", "Export plot CSVs from run records");
  plots->add_option("--records", records, "record.json or a directory searched recursively")->required();
  plots->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      save_dataset(generate_dataset(seed, n), seed, out);
      std::printf("%s: %zu scenes -> %s\n", dataset_id(seed, n).c_str(), n, out.c_str());
    } else if (*train) {
      auto cfg = load_config(config);
      auto res = train_fp32(cfg, make_datasets(cfg), log_line);
      auto dir = run_dir(cfg);
      write_run_dir(dir, res.record, &res.net);
      print_summary(res.record, dir);
    } else if (*qat) {
      auto cfg = load_config(config);
      DetectorNet init;
      load_weights(init, init_weights);
      if (init.quantized()) throw std::invalid_argument("--init-weights must hold an unquantized network");
      auto res = train_qat(cfg, init, make_datasets(cfg), log_line);
      auto dir = run_dir(cfg);
      write_run_dir(dir, res.record, &res.net);
      print_summary(res.record, dir);
    } else if (*eval) {
      if (!fs::is_regular_file(weights)) throw std::runtime_error("missing weight file '" + weights + "'");
      DetectorNet net;
      load_weights(net, weights);
      auto ds = load_dataset(data);
      auto res = evaluate(net, ds.scenes, ds.id);
      write_eval(out, res.records, res.ap, res.harmony);
    } else if (*sweep) {
      auto base = load_config(config);
      auto cells = sweep_cells(base);
      std::string dir = base.output_dir.empty() ? "runs" : base.output_dir;
      auto recs = run_sweep(base, cells, {dir, base.jobs, log_line});
      std::vector<SweepRow> rows;
      std::size_t failed = 0;
      for (const auto& r : recs) {
        rows.push_back(sweep_row(r));
        failed += r.status != "ok";
      }
      detail::write_atomic(fs::path(dir) / "sweep.csv", sweep_csv(rows));
      std::printf("%zu cells (%zu failed) -> %s\n", rows.size(), failed, (fs::path(dir) / "sweep.csv").c_str());
      return failed ? 2 : 0;
    } else if (*analyze) {
      auto joined = join_records(ingest_predictions(pred), ingest_ground_truth(gt));
      std::size_t classes = 0;
      for (const auto& im : joined) {
        for (const auto& d : im.detections) classes = std::max(classes, static_cast<std::size_t>(d.class_id) + 1);
        for (const auto& g : im.gts) classes = std::max(classes, static_cast<std::size_t>(g.class_id) + 1);
      }
      // a dataset directory names its evaluation set in meta.json
      std::string id = fs::path(gt).stem().string();
      if (auto meta = fs::path(gt).parent_path() / "meta.json"; fs::exists(meta))
        id = nlohmann::json::parse(detail::read_file(meta.string())).value("dataset_id", id);
      write_eval(out, joined, map_coco(joined, classes), harmony_report(joined, id));
    } else if (*plots) {
      export_plot_data(collect_records(records), out);
      std::printf("plot data -> %s\n", out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
