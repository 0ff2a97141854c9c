#include "pdse/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace pdse {

const std::array<const char*, kNumLesionClasses> kLesionTypeNames{
    "lung", "abdomen", "mediastinum", "liver", "pelvis", "soft tissue", "kidney", "bone", "other"};
const std::array<int, kNumLesionClasses> kTableRowOrder{8, 2, 3, 4, 1, 7, 6, 5, 9};
const std::array<const char*, kNumLesionClasses> kTableRowLabels{
    "Bone", "Abdomen", "Mediastinum", "Liver", "Lung", "Kidney", "Tissue", "Pelvis", "Other"};

PrCurve precision_recall(const std::vector<ClassDetection>& detections,
                         const std::vector<std::vector<Box>>& ground_truth, const EvalConfig& config) {
  PrCurve curve;
  std::size_t total_gt = 0;
  for (const auto& g : ground_truth) total_gt += g.size();

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<std::vector<bool>> matched(ground_truth.size());
  for (std::size_t i = 0; i < ground_truth.size(); ++i) matched[i].assign(ground_truth[i].size(), false);
  std::size_t tp = 0, fp = 0;
  for (const std::size_t d : order) {
    const auto& det = detections[d];
    if (det.image >= ground_truth.size()) throw std::invalid_argument("precision_recall: image index out of range");
    const auto& gts = ground_truth[det.image];
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (matched[det.image][g]) continue;
      const double v = iou(det.box, gts[g]);
      if (v >= config.iou_thresh && v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best_gt < gts.size()) {
      matched[det.image][best_gt] = true;
      ++tp;
    } else {
      ++fp;
    }
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    curve.recall.push_back(total_gt > 0 ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0);
  }
  if (total_gt == 0) return curve;

  if (config.interpolation == Interpolation::kAllPoints) {
    double area = 0.0, envelope = 0.0;
    // Sweep from the tail so the envelope is a running maximum.
    std::vector<double> env(curve.precision.size());
    for (std::size_t i = curve.precision.size(); i-- > 0;) {
      envelope = std::max(envelope, curve.precision[i]);
      env[i] = envelope;
    }
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < env.size(); ++i) {
      area += (curve.recall[i] - prev_recall) * env[i];
      prev_recall = curve.recall[i];
    }
    curve.ap = area;
  } else {
    double total = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < curve.recall.size(); ++i)
        if (curve.recall[i] >= r) p = std::max(p, curve.precision[i]);
      total += p;
    }
    curve.ap = total / 11.0;
  }
  return curve;
}

std::optional<double> average_precision(const std::vector<ClassDetection>& detections,
                                        const std::vector<std::vector<Box>>& ground_truth, const EvalConfig& config) {
  return precision_recall(detections, ground_truth, config).ap;
}

EvalReport evaluate_map(const std::vector<ImageDetections>& detections,
                        const std::vector<ImageAnnotations>& annotations, const EvalConfig& config) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    if (!index.emplace(annotations[i].image_id, i).second) {
      throw std::invalid_argument("evaluate_map: duplicate image id '" + annotations[i].image_id + "'");
    }
    for (const auto& gt : annotations[i].boxes) {
      if (gt.class_id < 1 || gt.class_id > kNumLesionClasses) {
        throw std::invalid_argument("evaluate_map: unknown class id " + std::to_string(gt.class_id));
      }
    }
  }
  EvalReport report;
  report.num_images = static_cast<std::int64_t>(annotations.size());
  std::array<std::vector<ClassDetection>, kNumLesionClasses> per_class;
  std::map<std::string, bool> seen;
  for (const auto& img : detections) {
    const auto it = index.find(img.image_id);
    if (it == index.end()) {
      throw std::invalid_argument("evaluate_map: detections for unannotated image '" + img.image_id + "'");
    }
    if (!seen.emplace(img.image_id, true).second) {
      throw std::invalid_argument("evaluate_map: duplicate image id '" + img.image_id + "' in detections");
    }
    for (const auto& det : img.detections) {
      if (det.class_id < 1 || det.class_id > kNumLesionClasses) {
        throw std::invalid_argument("evaluate_map: unknown class id " + std::to_string(det.class_id));
      }
      per_class[static_cast<std::size_t>(det.class_id - 1)].push_back({it->second, det.box, det.score});
    }
  }
  double sum = 0.0;
  int represented = 0;
  for (int c = 1; c <= kNumLesionClasses; ++c) {
    const auto ci = static_cast<std::size_t>(c - 1);
    std::vector<std::vector<Box>> gts(annotations.size());
    for (std::size_t i = 0; i < annotations.size(); ++i) {
      for (const auto& gt : annotations[i].boxes) {
        if (gt.class_id == c) gts[i].push_back(gt.box);
      }
      report.num_ground_truth[ci] += static_cast<std::int64_t>(gts[i].size());
    }
    report.num_detections[ci] = static_cast<std::int64_t>(per_class[ci].size());
    report.curves[ci] = precision_recall(per_class[ci], gts, config);
    report.ap[ci] = report.curves[ci].ap;
    if (report.ap[ci]) {
      sum += *report.ap[ci];
      ++represented;
    }
  }
  report.map = represented > 0 ? sum / represented : 0.0;
  return report;
}

std::string report_to_json(const EvalReport& report, bool include_curves) {
  nlohmann::ordered_json j;
  j["mAP"] = report.map;
  j["num_images"] = report.num_images;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (std::size_t row = 0; row < kNumLesionClasses; ++row) {
    const int c = kTableRowOrder[row];
    const auto ci = static_cast<std::size_t>(c - 1);
    nlohmann::ordered_json entry;
    entry["class_id"] = c;
    entry["name"] = kTableRowLabels[row];
    entry["ap"] = report.ap[ci] ? nlohmann::ordered_json(*report.ap[ci]) : nlohmann::ordered_json(nullptr);
    entry["num_ground_truth"] = report.num_ground_truth[ci];
    entry["num_detections"] = report.num_detections[ci];
    if (include_curves) {
      entry["precision"] = report.curves[ci].precision;
      entry["recall"] = report.curves[ci].recall;
    }
    classes.push_back(std::move(entry));
  }
  j["classes"] = std::move(classes);
  return j.dump(2);
}

namespace {

std::string fmt_ap(const std::optional<double>& ap) {
  if (!ap) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *ap);
  return buf;
}

void append_row(std::string& out, const std::string& label, const std::vector<std::string>& cells) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-12s", label.c_str());
  out += buf;
  for (const auto& cell : cells) {
    std::snprintf(buf, sizeof buf, " %14s", cell.c_str());
    out += buf;
  }
  out += '\n';
}

}  // namespace

std::string report_to_table(const EvalReport& report) { return comparison_table({"AP"}, {report}); }

std::string comparison_table(const std::vector<std::string>& columns, const std::vector<EvalReport>& reports) {
  if (columns.size() != reports.size()) throw std::invalid_argument("comparison_table: one column per report");
  std::string out;
  append_row(out, "Type", columns);
  for (std::size_t row = 0; row < kNumLesionClasses; ++row) {
    std::vector<std::string> cells;
    for (const auto& r : reports) cells.push_back(fmt_ap(r.ap[static_cast<std::size_t>(kTableRowOrder[row] - 1)]));
    append_row(out, kTableRowLabels[row], cells);
  }
  std::vector<std::string> cells;
  for (const auto& r : reports) cells.push_back(fmt_ap(r.map));
  append_row(out, "mAP", cells);
  return out;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("detections csv line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

void write_detections_csv(std::ostream& out, const std::vector<ImageDetections>& detections) {
  out << "image_id,class_id,score,x1,y1,x2,y2\n";
  for (const auto& img : detections) {
    for (const auto& d : img.detections) {
      out << img.image_id << ',' << d.class_id << ',' << shortest(d.score) << ',' << shortest(d.box.x1) << ','
          << shortest(d.box.y1) << ',' << shortest(d.box.x2) << ',' << shortest(d.box.y2) << '\n';
    }
  }
}

std::vector<ImageDetections> read_detections_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "image_id,class_id,score,x1,y1,x2,y2") {
    throw std::runtime_error("detections csv: missing header");
  }
  std::vector<ImageDetections> out;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw std::runtime_error("detections csv line " + std::to_string(line_no) + ": need 7 fields");
    Detection d;
    d.class_id = static_cast<int>(parse_double(f[1], line_no));
    d.score = parse_double(f[2], line_no);
    d.box = {parse_double(f[3], line_no), parse_double(f[4], line_no), parse_double(f[5], line_no),
             parse_double(f[6], line_no)};
    auto [it, fresh] = index.emplace(f[0], out.size());
    if (fresh) out.push_back({f[0], {}});
    out[it->second].detections.push_back(d);
  }
  return out;
}

}  // namespace pdse
