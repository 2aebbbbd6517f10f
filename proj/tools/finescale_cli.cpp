// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Talks to the core exclusively through the C API.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "finescale/finescale.h"

namespace {

void fail(finescale_status status) {
  std::cerr << "error: " << finescale_last_error() << " (status " << static_cast<int>(status)
            << ")\n";
  std::exit(1);
}

void check(finescale_status status) {
  if (status != FINESCALE_OK) fail(status);
}

std::string take_string(char* owned) {
  std::string out = owned != nullptr ? owned : "";
  finescale_string_free(owned);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error: cannot read '" << path << "'\n";
    std::exit(1);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct ConfigArgs {
  std::string config_path;
  std::string seed;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON file");
    cmd->add_option("--seed", seed, "override the config seed");
    cmd->add_option("--set", sets, "override one config field as key=value (repeatable)");
  }

  finescale_config* build() const {
    finescale_config* config = nullptr;
    if (config_path.empty()) {
      check(finescale_config_create(&config));
    } else {
      check(finescale_config_load_file(config_path.c_str(), &config));
    }
    if (!seed.empty()) check(finescale_config_set(config, "seed", seed.c_str()));
    for (const std::string& kv : sets) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        std::cerr << "error: --set expects key=value, got '" << kv << "'\n";
        std::exit(1);
      }
      check(finescale_config_set(config, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
    }
    return config;
  }
};

finescale_dataset* open_dataset(const std::string& path, bool normalize) {
  finescale_dataset* dataset = nullptr;
  check(finescale_dataset_open(path.c_str(), normalize ? 1 : 0, &dataset));
  return dataset;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"finescale: scale-aware self-supervised pretraining for segmentation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(finescale_version()));

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_kind, synth_out;
  int synth_count = 100;
  std::uint64_t synth_seed = 0;
  std::int64_t synth_h = 0, synth_w = 0;
  double synth_density = 0.0;
  synth->add_option("--kind", synth_kind, "thin_curves | small_blobs | large_bands | large_regions")
      ->required();
  synth->add_option("--count", synth_count, "number of images");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--height", synth_h, "image height (0 = default)");
  synth->add_option("--width", synth_w, "image width (0 = default)");
  synth->add_option("--density", synth_density, "expected structures per image (0 = default)");
  synth->add_option("--out", synth_out, "output directory")->required();

  // ingest-check
  auto* ingest = app.add_subcommand("ingest-check", "load a dataset and print a summary");
  std::string ingest_data;
  bool ingest_raw = false;
  ingest->add_option("--data", ingest_data, "dataset directory or manifest")->required();
  ingest->add_flag("--raw", ingest_raw, "skip intensity normalization");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "self-supervised pretraining");
  ConfigArgs pretrain_cfg;
  std::string pretrain_data, pretrain_out;
  pretrain_cfg.attach(pretrain);
  pretrain->add_option("--data", pretrain_data, "dataset directory or manifest")->required();
  pretrain->add_option("--out", pretrain_out, "output directory")->required();

  // finetune
  auto* finetune = app.add_subcommand("finetune", "fine-tune a segmentation model");
  ConfigArgs finetune_cfg;
  std::string finetune_data, finetune_encoder, finetune_out;
  finetune_cfg.attach(finetune);
  finetune->add_option("--data", finetune_data, "dataset directory or manifest")->required();
  finetune->add_option("--encoder", finetune_encoder, "pretrained encoder checkpoint directory");
  finetune->add_option("--out", finetune_out, "output directory")->required();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "stitched evaluation of a checkpoint");
  ConfigArgs evaluate_cfg;
  std::string evaluate_data, evaluate_seg, evaluate_split = "test", evaluate_out;
  evaluate_cfg.attach(evaluate);
  evaluate->add_option("--data", evaluate_data, "dataset directory or manifest")->required();
  evaluate->add_option("--seg", evaluate_seg, "segmentation checkpoint directory")->required();
  evaluate->add_option("--split", evaluate_split, "pretrain | train | val | test");
  evaluate->add_option("--out", evaluate_out, "write the summary JSON to this file");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "run a config-grid experiment sweep");
  std::string sweep_spec;
  sweep->add_option("--spec", sweep_spec, "sweep spec JSON file")->required();

  // report
  auto* report = app.add_subcommand("report", "emit CSV/Markdown/SVG from sweep run records");
  std::string report_runs, report_out;
  bool report_avg = false;
  report->add_option("--runs", report_runs, "runs.jsonl from a sweep directory")->required();
  report->add_option("--out", report_out, "report output directory")->required();
  report->add_flag("--average-methods", report_avg, "aggregate rows across SSL methods");

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    char* manifest = nullptr;
    check(finescale_synth_generate(synth_kind.c_str(), synth_count, synth_seed, synth_h, synth_w,
                                   synth_density, synth_out.c_str(), &manifest));
    std::cout << take_string(manifest) << "\n";
    return 0;
  }

  if (ingest->parsed()) {
    finescale_dataset* dataset = open_dataset(ingest_data, !ingest_raw);
    char* info = nullptr;
    check(finescale_dataset_info(dataset, &info));
    std::cout << take_string(info) << "\n";
    finescale_dataset_free(dataset);
    return 0;
  }

  if (pretrain->parsed()) {
    finescale_config* config = pretrain_cfg.build();
    finescale_dataset* dataset = open_dataset(pretrain_data, true);
    char* checkpoint = nullptr;
    check(finescale_pretrain(config, dataset, pretrain_out.c_str(), &checkpoint));
    std::cout << take_string(checkpoint) << "\n";
    finescale_dataset_free(dataset);
    finescale_config_free(config);
    return 0;
  }

  if (finetune->parsed()) {
    finescale_config* config = finetune_cfg.build();
    finescale_dataset* dataset = open_dataset(finetune_data, true);
    char* checkpoint = nullptr;
    check(finescale_finetune(config, dataset, finetune_encoder.c_str(), finetune_out.c_str(),
                             &checkpoint));
    std::cout << take_string(checkpoint) << "\n";
    finescale_dataset_free(dataset);
    finescale_config_free(config);
    return 0;
  }

  if (evaluate->parsed()) {
    finescale_config* config = evaluate_cfg.build();
    finescale_dataset* dataset = open_dataset(evaluate_data, true);
    char* summary = nullptr;
    check(finescale_evaluate(config, dataset, evaluate_seg.c_str(), evaluate_split.c_str(),
                             &summary));
    const std::string text = take_string(summary);
    if (!evaluate_out.empty()) {
      std::ofstream out(evaluate_out);
      out << text << "\n";
    }
    std::cout << text << "\n";
    finescale_dataset_free(dataset);
    finescale_config_free(config);
    return 0;
  }

  if (sweep->parsed()) {
    char* runs = nullptr;
    check(finescale_sweep_run(read_file(sweep_spec).c_str(), &runs));
    const std::string text = take_string(runs);
    int failed = 0;
    for (const nlohmann::json& rec : nlohmann::json::parse(text)) {
      const std::string status = rec.at("status").get<std::string>();
      std::cout << rec.at("cell_id").get<std::string>() << ": " << status;
      if (status == "done") {
        std::cout << " (dice " << rec.at("mean_dice").get<double>() << ", hd "
                  << rec.at("mean_hd").get<double>() << ")";
      } else {
        ++failed;
        std::cout << " (" << rec.at("error_text").get<std::string>() << ")";
      }
      std::cout << "\n";
    }
    return failed == 0 ? 0 : 1;
  }

  if (report->parsed()) {
    check(finescale_report_emit(report_runs.c_str(), report_out.c_str(), report_avg ? 1 : 0));
    std::cout << "report written to " << report_out << "\n";
    return 0;
  }

  return 0;
}
