// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "finescale/rng.hpp"
#include "finescale/train.hpp"

namespace finescale::harness {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool has_extension(const fs::path& p, std::initializer_list<const char*> exts) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::any_of(exts.begin(), exts.end(), [&](const char* want) { return e == want; });
}

Tensor mat_to_tensor(const cv::Mat& mat, const std::string& origin) {
  if (mat.empty() || mat.channels() != 1) {
    throw Error(ErrorKind::format, "expected single-channel image: '" + origin + "'");
  }
  Tensor out({mat.rows, mat.cols});
  for (int r = 0; r < mat.rows; ++r) {
    for (int c = 0; c < mat.cols; ++c) {
      double v = 0.0;
      switch (mat.depth()) {
        case CV_8U: v = mat.at<std::uint8_t>(r, c) / 255.0; break;
        case CV_16U: v = mat.at<std::uint16_t>(r, c) / 65535.0; break;
        case CV_32F: v = mat.at<float>(r, c); break;
        case CV_64F: v = mat.at<double>(r, c); break;
        default: throw Error(ErrorKind::format, "unsupported pixel depth: '" + origin + "'");
      }
      out.at(r, c) = v;
    }
  }
  return out;
}

LabelMap mat_to_labels(const cv::Mat& mat, const std::string& origin) {
  if (mat.empty() || mat.channels() != 1 || mat.depth() != CV_8U) {
    throw Error(ErrorKind::format, "expected 8-bit single-channel mask: '" + origin + "'");
  }
  LabelMap out(mat.rows, mat.cols);
  for (int r = 0; r < mat.rows; ++r) {
    for (int c = 0; c < mat.cols; ++c) out.at(r, c) = mat.at<std::uint8_t>(r, c);
  }
  return out;
}

Split hash_split(const std::string& id) {
  const std::uint64_t h = fnv1a64(id.data(), id.size()) % 100;
  if (h < 60) return Split::pretrain;
  if (h < 80) return Split::train;
  if (h < 90) return Split::val;
  return Split::test;
}

void attach_mask(ImageRecord& rec, const cv::Mat& mask, const std::string& origin) {
  LabelMap labels = mat_to_labels(mask, origin);
  if (labels.rows != rec.height() || labels.cols != rec.width()) {
    throw Error(ErrorKind::inconsistent_shape, "mask size differs from image: '" + rec.id + "'");
  }
  rec.mask = std::move(labels);
}

std::vector<ImageRecord> load_from_manifest(const fs::path& dir, const json& manifest) {
  std::vector<ImageRecord> records;
  for (const json& entry : manifest.at("files")) {
    ImageRecord rec;
    rec.id = entry.at("id").get<std::string>();
    rec.split = split_from_name(entry.at("split").get<std::string>());
    const std::string image_name = entry.at("image").get<std::string>();
    const cv::Mat image = cv::imread((dir / image_name).string(), cv::IMREAD_UNCHANGED);
    rec.pixels = mat_to_tensor(image, image_name);
    const std::string mask_name = entry.value("mask", std::string());
    if (!mask_name.empty()) {
      const cv::Mat mask = cv::imread((dir / mask_name).string(), cv::IMREAD_UNCHANGED);
      attach_mask(rec, mask, mask_name);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<ImageRecord> load_by_discovery(const fs::path& dir) {
  std::vector<fs::path> candidates;
  for (const fs::directory_entry& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path& p = entry.path();
    if (!has_extension(p, {".png", ".tif", ".tiff"})) continue;
    const std::string stem = p.stem().string();
    if (stem.size() > 5 && stem.substr(stem.size() - 5) == "_mask") continue;
    candidates.push_back(p);
  }
  std::sort(candidates.begin(), candidates.end());
  if (candidates.empty()) {
    throw Error(ErrorKind::format, "no images found in '" + dir.string() + "'");
  }

  std::vector<ImageRecord> records;
  for (const fs::path& p : candidates) {
    const std::string stem = p.stem().string();
    const fs::path mask_path = dir / (stem + "_mask" + p.extension().string());
    const bool is_tiff = has_extension(p, {".tif", ".tiff"});
    if (is_tiff) {
      std::vector<cv::Mat> pages;
      if (!cv::imreadmulti(p.string(), pages, cv::IMREAD_UNCHANGED) || pages.empty()) {
        throw Error(ErrorKind::format, "cannot read '" + p.string() + "'");
      }
      std::vector<cv::Mat> mask_pages;
      if (fs::exists(mask_path)) {
        cv::imreadmulti(mask_path.string(), mask_pages, cv::IMREAD_UNCHANGED);
        if (mask_pages.size() != pages.size()) {
          throw Error(ErrorKind::inconsistent_shape,
                      "mask stack page count differs: '" + mask_path.string() + "'");
        }
      }
      for (std::size_t k = 0; k < pages.size(); ++k) {
        ImageRecord rec;
        rec.id = stem + "_p" + std::to_string(k);
        rec.pixels = mat_to_tensor(pages[k], rec.id);
        if (!mask_pages.empty()) attach_mask(rec, mask_pages[k], rec.id);
        rec.split = hash_split(rec.id);
        records.push_back(std::move(rec));
      }
    } else {
      ImageRecord rec;
      rec.id = stem;
      rec.pixels = mat_to_tensor(cv::imread(p.string(), cv::IMREAD_UNCHANGED), rec.id);
      if (fs::exists(mask_path)) {
        attach_mask(rec, cv::imread(mask_path.string(), cv::IMREAD_UNCHANGED),
                    mask_path.filename().string());
      }
      rec.split = hash_split(rec.id);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Run records

json run_record_to_json(const RunRecord& rec) {
  json rows = json::array();
  for (const evalkit::EvalRow& row : rec.eval_rows) {
    rows.push_back(json{{"dataset", row.dataset},
                        {"method", row.method},
                        {"sampling", row.sampling},
                        {"patch_divisor", row.patch_divisor},
                        {"record_id", row.record_id},
                        {"dice", row.dice},
                        {"hd", row.hd},
                        {"seed", row.seed}});
  }
  return json{{"cell_id", rec.cell_id},       {"method", rec.method},
              {"sampling", rec.sampling},     {"divisor", rec.divisor},
              {"seed", rec.seed},             {"status", rec.status},
              {"error_text", rec.error_text}, {"wall_time_s", rec.wall_time_s},
              {"mean_dice", rec.mean_dice},   {"mean_hd", rec.mean_hd},
              {"pretrain_dir", rec.pretrain_dir},
              {"finetune_dir", rec.finetune_dir},
              {"eval_rows", rows}};
}

RunRecord run_record_from_json(const json& j) {
  RunRecord rec;
  rec.cell_id = j.at("cell_id").get<std::string>();
  rec.method = j.at("method").get<std::string>();
  rec.sampling = j.at("sampling").get<std::string>();
  rec.divisor = j.at("divisor").get<std::string>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.status = j.at("status").get<std::string>();
  rec.error_text = j.value("error_text", std::string());
  rec.wall_time_s = j.value("wall_time_s", 0.0);
  rec.mean_dice = j.value("mean_dice", 0.0);
  rec.mean_hd = j.value("mean_hd", 0.0);
  rec.pretrain_dir = j.value("pretrain_dir", std::string());
  rec.finetune_dir = j.value("finetune_dir", std::string());
  for (const json& row : j.value("eval_rows", json::array())) {
    evalkit::EvalRow r;
    r.dataset = row.at("dataset").get<std::string>();
    r.method = row.at("method").get<std::string>();
    r.sampling = row.at("sampling").get<std::string>();
    r.patch_divisor = row.at("patch_divisor").get<std::string>();
    r.record_id = row.at("record_id").get<std::string>();
    r.dice = row.at("dice").get<double>();
    r.hd = row.at("hd").get<double>();
    r.seed = row.at("seed").get<std::int64_t>();
    rec.eval_rows.push_back(std::move(r));
  }
  return rec;
}

void append_run_record(const std::string& path, const RunRecord& rec) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out << run_record_to_json(rec).dump() << '\n' << std::flush;
}

std::string divisor_label(const std::string& divisor) {
  return divisor == "full" ? "full" : "L/" + divisor;
}

// ---------------------------------------------------------------------------
// Reporting

struct CellAggregate {
  std::string method;
  std::string sampling;
  std::string divisor;
  std::vector<double> dice;
  std::vector<double> hd;

  bool baseline() const { return sampling == "full_view" || method == "none"; }
  double mean(const std::vector<double>& v) const {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  double stddev(const std::vector<double>& v) const {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  }
};

std::vector<CellAggregate> aggregate_cells(const std::vector<RunRecord>& done,
                                           bool average_methods) {
  std::map<std::tuple<std::string, std::string, std::string>, CellAggregate> groups;
  for (const RunRecord& rec : done) {
    const std::string method_key = average_methods && rec.method != "none" ? "ssl(avg)" : rec.method;
    auto key = std::make_tuple(method_key, rec.sampling, rec.divisor);
    CellAggregate& agg = groups[key];
    agg.method = method_key;
    agg.sampling = rec.sampling;
    agg.divisor = rec.divisor;
    agg.dice.push_back(rec.mean_dice);
    agg.hd.push_back(rec.mean_hd);
  }
  std::vector<CellAggregate> out;
  out.reserve(groups.size());
  for (auto& [key, agg] : groups) out.push_back(std::move(agg));
  return out;
}

std::string format_stat(double mean, double sd, int n) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << mean;
  if (n > 1) {
    os.precision(4);
    os << " +/- " << sd;
  }
  return os.str();
}

struct PlotSeries {
  std::string name;
  std::vector<double> y;  // aligned with the x label list; NaN = missing
};

void write_line_svg(const std::string& path, const std::string& title,
                    const std::string& y_label, const std::vector<std::string>& x_labels,
                    const std::vector<PlotSeries>& series) {
  const double width = 520, height = 360;
  const double ml = 70, mr = 140, mt = 40, mb = 50;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double lo = 1e300, hi = -1e300;
  for (const PlotSeries& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (lo > hi) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.1 * (hi - lo);
  lo -= pad;
  hi += pad;

  const auto x_at = [&](std::size_t i) {
    const std::size_t n = std::max<std::size_t>(x_labels.size(), 1);
    return n == 1 ? ml + pw / 2 : ml + pw * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  const auto y_at = [&](double v) { return mt + ph * (1.0 - (v - lo) / (hi - lo)); };

  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
      << title << "</text>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"#333\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
      << mt + ph << "\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = y_at(v);
    svg << "<line x1=\"" << ml - 4 << "\" y1=\"" << y << "\" x2=\"" << ml << "\" y2=\"" << y
        << "\" stroke=\"#333\"/>\n"
        << "<text x=\"" << ml - 8 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">";
    svg.precision(3);
    svg << v;
    svg.precision(2);
    svg << "</text>\n";
  }
  for (std::size_t i = 0; i < x_labels.size(); ++i) {
    svg << "<text x=\"" << x_at(i) << "\" y=\"" << mt + ph + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_labels[i]
        << "</text>\n";
  }
  svg << "<text x=\"16\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
      << mt + ph / 2 << ")\">" << y_label << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 5];
    std::ostringstream points;
    for (std::size_t i = 0; i < series[s].y.size(); ++i) {
      if (!std::isfinite(series[s].y[i])) continue;
      points << x_at(i) << "," << y_at(series[s].y[i]) << " ";
    }
    svg << "<polyline points=\"" << points.str() << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < series[s].y.size(); ++i) {
      if (!std::isfinite(series[s].y[i])) continue;
      svg << "<circle cx=\"" << x_at(i) << "\" cy=\"" << y_at(series[s].y[i])
          << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    }
    const double ly = mt + 16 + 18 * static_cast<double>(s);
    svg << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 34
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << ml + pw + 40 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[s].name << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out << svg.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Ingestion

IngestResult ingest_dataset(const std::string& path, bool normalize, bool require_masks) {
  fs::path dir(path);
  fs::path manifest_path;
  if (fs::is_directory(dir)) {
    if (fs::exists(dir / "manifest.json")) manifest_path = dir / "manifest.json";
  } else if (dir.extension() == ".json") {
    manifest_path = dir;
    dir = dir.parent_path();
  } else {
    throw Error(ErrorKind::io, "no such dataset directory: '" + path + "'");
  }

  IngestResult result;
  result.dataset_name = dir.filename().string();
  if (!manifest_path.empty()) {
    std::ifstream in(manifest_path);
    if (!in) throw Error(ErrorKind::io, "cannot read '" + manifest_path.string() + "'");
    json manifest;
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw Error(ErrorKind::format, manifest_path.string() + ": " + e.what());
    }
    result.records = load_from_manifest(dir, manifest);
    if (manifest.contains("spec") && manifest["spec"].contains("kind")) {
      result.dataset_name = manifest["spec"]["kind"].get<std::string>();
    }
  } else {
    result.records = load_by_discovery(dir);
  }

  if (require_masks) {
    for (const ImageRecord& rec : result.records) {
      if (rec.split != Split::pretrain && !rec.mask) {
        throw Error(ErrorKind::missing_mask,
                    "labeled split record '" + rec.id + "' has no mask");
      }
    }
  }

  double sum = 0.0, sumsq = 0.0;
  std::int64_t n = 0;
  for (const ImageRecord& rec : result.records) {
    for (std::int64_t i = 0; i < rec.pixels.numel(); ++i) {
      sum += rec.pixels[i];
      sumsq += rec.pixels[i] * rec.pixels[i];
    }
    n += rec.pixels.numel();
  }
  if (n == 0) throw Error(ErrorKind::format, "dataset has no pixels");
  result.mean = sum / static_cast<double>(n);
  const double var = std::max(sumsq / static_cast<double>(n) - result.mean * result.mean, 0.0);
  result.stddev = var > 1e-24 ? std::sqrt(var) : 1.0;
  if (normalize) {
    for (ImageRecord& rec : result.records) {
      for (std::int64_t i = 0; i < rec.pixels.numel(); ++i) {
        rec.pixels[i] = (rec.pixels[i] - result.mean) / result.stddev;
      }
    }
  }
  for (const ImageRecord& rec : result.records) rec.validate();
  result.base_l = dataset_base_length(result.records);
  return result;
}

std::int64_t resolve_patch_size(const std::vector<ImageRecord>& records, int divisor,
                                int stride_product) {
  if (divisor != 2 && divisor != 4 && divisor != 8) throw Error(ErrorKind::config, "crop_divisor");
  if (records.empty()) throw Error(ErrorKind::empty_subset, "no records");
  if (stride_product < 1) throw Error(ErrorKind::config, "encoder_strides");
  const std::int64_t quotient = dataset_base_length(records) / divisor;
  const std::int64_t edge = quotient - quotient % stride_product;
  if (edge < 8) {
    throw Error(ErrorKind::too_small,
                "patch edge " + std::to_string(edge) + " px is below the 8 px floor");
  }
  return edge;
}

// ---------------------------------------------------------------------------
// Sweep

SweepSpec sweep_spec_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("sweep spec: ") + e.what());
  }
  SweepSpec spec;
  try {
    for (const json& m : j.at("methods")) spec.methods.push_back(ssl_method_from_name(m.get<std::string>()));
    for (const json& s : j.at("samplings")) spec.samplings.push_back(sampling_from_name(s.get<std::string>()));
    for (const json& d : j.value("crop_divisors", json::array())) spec.crop_divisors.push_back(d.get<int>());
    for (const json& s : j.at("seeds")) spec.seeds.push_back(s.get<std::uint64_t>());
    spec.base_config = j.contains("base_config")
                           ? ExperimentConfig::from_json_string(j["base_config"].dump())
                           : ExperimentConfig{};
    spec.dataset_dir = j.at("dataset_dir").get<std::string>();
    spec.output_dir = j.at("output_dir").get<std::string>();
    spec.average_methods = j.value("average_methods", false);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("sweep spec: ") + e.what());
  }
  return spec;
}

std::string sweep_spec_to_json_string(const SweepSpec& spec) {
  json methods = json::array(), samplings = json::array(), divisors = json::array(),
       seeds = json::array();
  for (SslMethod m : spec.methods) methods.push_back(ssl_method_name(m));
  for (SamplingStrategy s : spec.samplings) samplings.push_back(sampling_name(s));
  for (int d : spec.crop_divisors) divisors.push_back(d);
  for (std::uint64_t s : spec.seeds) seeds.push_back(s);
  const json j{{"methods", methods},
               {"samplings", samplings},
               {"crop_divisors", divisors},
               {"seeds", seeds},
               {"base_config", json::parse(spec.base_config.to_json_string(0))},
               {"dataset_dir", spec.dataset_dir},
               {"output_dir", spec.output_dir},
               {"average_methods", spec.average_methods}};
  return j.dump(2);
}

std::vector<std::pair<std::string, ExperimentConfig>> expand_sweep(const SweepSpec& spec) {
  if (spec.methods.empty() || spec.samplings.empty() || spec.seeds.empty()) {
    throw Error(ErrorKind::config, "sweep axes must be non-empty");
  }
  const bool needs_divisors = std::any_of(spec.samplings.begin(), spec.samplings.end(),
                                          [](SamplingStrategy s) { return s != SamplingStrategy::full_view; });
  if (needs_divisors && spec.crop_divisors.empty()) {
    throw Error(ErrorKind::config, "crop_divisors required for patch samplings");
  }

  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  std::set<std::uint64_t> seen;
  for (SslMethod method : spec.methods) {
    for (SamplingStrategy sampling : spec.samplings) {
      const std::vector<int> divisors =
          sampling == SamplingStrategy::full_view ? std::vector<int>{0} : spec.crop_divisors;
      for (int divisor : divisors) {
        for (std::uint64_t seed : spec.seeds) {
          ExperimentConfig cfg = spec.base_config;
          cfg.ssl_method = method;
          cfg.sampling = sampling;
          cfg.crop_divisor = divisor == 0 ? std::nullopt : std::optional<int>(divisor);
          cfg.seed = seed;
          std::string cell_id = std::string(ssl_method_name(method)) + "-" +
                                sampling_name(sampling) + "-" +
                                (divisor == 0 ? "full" : "d" + std::to_string(divisor)) + "-s" +
                                std::to_string(seed);
          std::uint64_t hash = 0;
          try {
            hash = validate_config(cfg).hash();
          } catch (const Error& e) {
            throw Error(ErrorKind::config, "cell " + cell_id + ": " + e.what());
          }
          if (seen.insert(hash).second) cells.emplace_back(std::move(cell_id), std::move(cfg));
        }
      }
    }
  }
  return cells;
}

std::vector<RunRecord> read_run_records(const std::string& path) {
  std::vector<RunRecord> records;
  std::ifstream in(path);
  if (!in) return records;
  std::map<std::string, std::size_t> index;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::format, path + ": " + e.what());
    }
    RunRecord rec = run_record_from_json(j);
    const auto it = index.find(rec.cell_id);
    if (it == index.end()) {
      index[rec.cell_id] = records.size();
      records.push_back(std::move(rec));
    } else {
      records[it->second] = std::move(rec);  // the last line per cell wins
    }
  }
  return records;
}

std::vector<RunRecord> run_sweep(const SweepSpec& spec) {
  fs::create_directories(spec.output_dir);
  const std::string runs_path = spec.output_dir + "/runs.jsonl";
  std::map<std::string, RunRecord> done;
  for (RunRecord& rec : read_run_records(runs_path)) {
    if (rec.status == "done") done[rec.cell_id] = std::move(rec);
  }

  const IngestResult data = ingest_dataset(spec.dataset_dir);
  std::vector<ImageRecord> pretrain_split, train_split, val_split, test_split;
  for (const ImageRecord& rec : data.records) {
    switch (rec.split) {
      case Split::pretrain: pretrain_split.push_back(rec); break;
      case Split::train: train_split.push_back(rec); break;
      case Split::val: val_split.push_back(rec); break;
      case Split::test: test_split.push_back(rec); break;
    }
  }

  std::vector<RunRecord> results;
  for (auto& [cell_id, cfg] : expand_sweep(spec)) {
    if (const auto it = done.find(cell_id); it != done.end()) {
      results.push_back(it->second);
      continue;
    }

    RunRecord rec;
    rec.cell_id = cell_id;
    rec.method = ssl_method_name(cfg.ssl_method);
    rec.sampling = sampling_name(cfg.sampling);
    rec.divisor = cfg.crop_divisor ? std::to_string(*cfg.crop_divisor) : "full";
    rec.seed = cfg.seed;
    rec.status = "running";
    append_run_record(runs_path, rec);

    const auto t0 = std::chrono::steady_clock::now();
    try {
      const ValidatedConfig config = validate_config(cfg);
      const std::string cell_dir = spec.output_dir + "/cells/" + cell_id;

      std::string encoder_ckpt;
      if (config->ssl_method != SslMethod::none) {
        train::PretrainOptions popts;
        popts.out_dir = cell_dir + "/pretrain";
        const train::PretrainResult pr = train::pretrain(pretrain_split, config, popts);
        encoder_ckpt = pr.checkpoint_dir;
        rec.pretrain_dir = pr.checkpoint_dir;
      }

      train::FinetuneOptions fopts;
      fopts.out_dir = cell_dir + "/finetune";
      const train::FinetuneResult fr =
          train::finetune_segmentation(train_split, val_split, config, encoder_ckpt, fopts);
      rec.finetune_dir = fr.checkpoint_dir;

      train::LoadedSegmenter seg = train::load_segmenter(fr.checkpoint_dir);
      const evalkit::PatchPredictor predictor = train::make_patch_predictor(seg);
      const std::int64_t stride = train::stitch_stride(seg.patch_edge, config->stride_fraction);
      evalkit::EvalRow row_template;
      row_template.dataset = data.dataset_name;
      row_template.method = rec.method;
      row_template.sampling = rec.sampling;
      row_template.patch_divisor = divisor_label(rec.divisor);
      row_template.seed = static_cast<std::int64_t>(cfg.seed);
      const evalkit::EvalSummary summary =
          evalkit::evaluate_split(test_split, predictor, seg.patch_edge, seg.patch_edge, stride,
                                  config->threshold, config->metric_cap, row_template);
      evalkit::write_eval_csv(cell_dir + "/eval.csv", summary);

      rec.eval_rows = summary.rows;
      rec.mean_dice = summary.mean_dice;
      rec.mean_hd = summary.mean_hd;
      rec.status = "done";
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error_text = e.what();
    }
    rec.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    append_run_record(runs_path, rec);
    results.push_back(std::move(rec));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Reporting

void emit_report(const std::vector<RunRecord>& records, const std::string& out_dir,
                 bool average_methods) {
  std::vector<RunRecord> finished;
  for (const RunRecord& rec : records) {
    if (rec.status == "done") finished.push_back(rec);
  }
  if (finished.empty()) throw Error(ErrorKind::nothing_to_report, "no completed cells");
  fs::create_directories(out_dir);

  const std::string dataset =
      finished.front().eval_rows.empty() ? "dataset" : finished.front().eval_rows.front().dataset;

  // Per-cell CSV rows (one per seed).
  {
    std::ofstream csv(out_dir + "/report.csv");
    if (!csv) throw Error(ErrorKind::io, "cannot write report.csv");
    csv << "dataset,method,sampling,patch_size,seed,dice,hd\n";
    csv.setf(std::ios::fixed);
    csv.precision(6);
    for (const RunRecord& rec : finished) {
      csv << dataset << ',' << rec.method << ',' << rec.sampling << ','
          << divisor_label(rec.divisor) << ',' << rec.seed << ',' << rec.mean_dice << ','
          << rec.mean_hd << '\n';
    }
  }

  const std::vector<CellAggregate> cells = aggregate_cells(finished, average_methods);
  double best_dice = -1.0;
  for (const CellAggregate& cell : cells) best_dice = std::max(best_dice, cell.mean(cell.dice));

  {
    std::ofstream md(out_dir + "/report.md");
    if (!md) throw Error(ErrorKind::io, "cannot write report.md");
    md << "# Sweep report: " << dataset << "\n\n";
    const auto emit_table = [&](const char* heading, bool baselines) {
      bool any = std::any_of(cells.begin(), cells.end(), [&](const CellAggregate& c) {
        return c.baseline() == baselines;
      });
      if (!any) return;
      md << "## " << heading << "\n\n"
         << "| Method | Sampling | Patch | Dice | HD |\n"
         << "|---|---|---|---|---|\n";
      for (const CellAggregate& cell : cells) {
        if (cell.baseline() != baselines) continue;
        const double dice_mean = cell.mean(cell.dice);
        std::string dice_text =
            format_stat(dice_mean, cell.stddev(cell.dice), static_cast<int>(cell.dice.size()));
        if (std::abs(dice_mean - best_dice) < 1e-12) dice_text = "**" + dice_text + "**";
        md << "| " << cell.method << " | " << cell.sampling << " | "
           << divisor_label(cell.divisor) << " | " << dice_text << " | "
           << format_stat(cell.mean(cell.hd), cell.stddev(cell.hd),
                          static_cast<int>(cell.hd.size()))
           << " |\n";
      }
      md << '\n';
    };
    emit_table("Full-slice Baselines", true);
    emit_table("Patch-based SSL", false);
  }

  // Dice / HD versus divisor, one curve per patch sampling strategy.
  std::set<int> divisor_set;
  std::set<std::string> strategy_set;
  for (const CellAggregate& cell : cells) {
    if (cell.divisor == "full") continue;
    divisor_set.insert(std::stoi(cell.divisor));
    strategy_set.insert(cell.sampling);
  }
  if (!divisor_set.empty()) {
    std::vector<int> divisors(divisor_set.begin(), divisor_set.end());
    std::vector<std::string> x_labels;
    for (int d : divisors) x_labels.push_back("L/" + std::to_string(d));
    std::vector<PlotSeries> dice_series, hd_series;
    for (const std::string& strategy : strategy_set) {
      PlotSeries ds{strategy, {}}, hs{strategy, {}};
      for (int d : divisors) {
        double dice_sum = 0.0, hd_sum = 0.0;
        int n = 0;
        for (const CellAggregate& cell : cells) {
          if (cell.sampling != strategy || cell.divisor != std::to_string(d)) continue;
          dice_sum += cell.mean(cell.dice);
          hd_sum += cell.mean(cell.hd);
          ++n;
        }
        ds.y.push_back(n > 0 ? dice_sum / n : std::nan(""));
        hs.y.push_back(n > 0 ? hd_sum / n : std::nan(""));
      }
      dice_series.push_back(std::move(ds));
      hd_series.push_back(std::move(hs));
    }
    write_line_svg(out_dir + "/dice_vs_divisor.svg", dataset + ": Dice vs crop scale",
                   "mean test Dice", x_labels, dice_series);
    write_line_svg(out_dir + "/hd_vs_divisor.svg", dataset + ": Hausdorff vs crop scale",
                   "mean test HD", x_labels, hd_series);
  }
}

}  // namespace finescale::harness
