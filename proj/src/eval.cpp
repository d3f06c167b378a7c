/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The echoguide Authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "echoguide/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace echoguide::eval {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw EvalError("cannot write " + path.string());
}

struct Accum {
  CompensatedSum sum;
  CompensatedSum sq;
  std::size_t n = 0;
  void add(double v) {
    sum.add(v);
    sq.add(v * v);
    ++n;
  }
  double mean() const { return n ? sum.value() / static_cast<double>(n) : 0.0; }
  // Population standard deviation.
  double std_dev() const {
    if (n == 0) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sq.value() / static_cast<double>(n) - m * m));
  }
};

void check_sizes(std::span<const demo::GuidanceSample> samples, std::span<const Pose6> predictions) {
  if (samples.size() != predictions.size()) {
    throw std::invalid_argument("prediction count " + std::to_string(predictions.size()) + " != sample count " +
                                std::to_string(samples.size()));
  }
}

void check_no_overlap(const model::LoadedModel& ckpt, const demo::Dataset& test) {
  const std::set<std::uint64_t> trained(ckpt.meta.train_subjects.begin(), ckpt.meta.train_subjects.end());
  for (const auto& s : test.scans) {
    if (trained.contains(s.subject_seed)) {
      throw EvalError("test subject " + std::to_string(s.subject_seed) + " was used to train the checkpoint");
    }
  }
}

}  // namespace

void CompensatedSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    comp_ += (sum_ - t) + v;
  } else {
    comp_ += (v - t) + sum_;
  }
  sum_ = t;
}

double MaeRow::mean_over_axes() const {
  double s = 0.0;
  for (double v : mae) s += v;
  return s / 6.0;
}

double distance_proxy(const Pose6& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < 6; ++i) s += std::abs(a[i]);
  return s / 6.0;
}

double absolute_error(const Pose6& pred, const Pose6& gt) {
  double s = 0.0;
  for (std::size_t i = 0; i < 6; ++i) s += std::abs(pred[i] - gt[i]);
  return s / 6.0;
}

std::vector<Pose6> predict(const model::GuidanceModel& model, std::span<const demo::GuidanceSample> samples,
                           int batch) {
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  const auto& cfg = model.config();
  std::vector<Pose6> out;
  out.reserve(samples.size());
  std::vector<phantom::FramePtr> frames;
  std::vector<int> planes;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch));
    frames.clear();
    planes.clear();
    for (std::size_t i = start; i < end; ++i) {
      frames.push_back(samples[i].frame);
      planes.push_back(samples[i].plane.index());
    }
    const nn::Tensor a = model.guide(model.encode(model::frames_to_tensor(frames, cfg.h, cfg.w)), planes);
    const auto v = a.values();
    for (std::size_t r = 0; r < end - start; ++r) {
      out.push_back(Pose6{v[r * 6], v[r * 6 + 1], v[r * 6 + 2], v[r * 6 + 3], v[r * 6 + 4], v[r * 6 + 5]});
    }
  }
  return out;
}

MaeTable mae_table(std::span<const demo::GuidanceSample> samples, std::span<const Pose6> predictions) {
  check_sizes(samples, predictions);
  std::array<std::array<CompensatedSum, 6>, phantom::kNumPlanes> sums{};
  std::array<CompensatedSum, 6> all{};
  MaeTable t;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto p = static_cast<std::size_t>(samples[i].plane.index());
    for (std::size_t a = 0; a < 6; ++a) {
      const double e = std::abs(predictions[i][a] - samples[i].action_gt[a]);
      sums[p][a].add(e);
      all[a].add(e);
    }
    ++t.rows[p].count;
    ++t.overall.count;
  }
  for (std::size_t p = 0; p < t.rows.size(); ++p) {
    for (std::size_t a = 0; a < 6; ++a) {
      t.rows[p].mae[a] = t.rows[p].count ? sums[p][a].value() / static_cast<double>(t.rows[p].count) : 0.0;
    }
  }
  for (std::size_t a = 0; a < 6; ++a) {
    t.overall.mae[a] = t.overall.count ? all[a].value() / static_cast<double>(t.overall.count) : 0.0;
  }
  return t;
}

StabilityCurve stability_curve(std::span<const demo::GuidanceSample> samples, std::span<const Pose6> predictions,
                               int bins, std::optional<double> max_distance, std::optional<int> plane) {
  check_sizes(samples, predictions);
  if (bins < 1) throw std::invalid_argument("bins must be >= 1");
  double hi = 0.0;
  if (max_distance) {
    hi = *max_distance;
  } else {
    for (const auto& s : samples) hi = std::max(hi, distance_proxy(s.action_gt));
  }
  if (!(hi > 0.0)) hi = 1.0;

  StabilityCurve c;
  c.edges.resize(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b) c.edges[static_cast<std::size_t>(b)] = hi * b / bins;
  std::vector<Accum> acc(static_cast<std::size_t>(bins));
  Accum pooled;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (plane && samples[i].plane.index() != *plane) continue;
    const double d = distance_proxy(samples[i].action_gt);
    // Samples beyond the last edge land in the last bin so bins still partition the set.
    auto b = static_cast<std::size_t>(std::clamp(static_cast<int>(std::floor(d / hi * bins)), 0, bins - 1));
    const double ae = absolute_error(predictions[i], samples[i].action_gt);
    acc[b].add(ae);
    pooled.add(ae);
  }
  for (std::size_t b = 0; b < acc.size(); ++b) {
    c.bins.push_back({c.edges[b], c.edges[b + 1], acc[b].mean(), acc[b].std_dev(), acc[b].n});
  }
  c.total = pooled.n;
  c.pooled_mean_ae = pooled.mean();
  c.pooled_std_ae = pooled.std_dev();
  return c;
}

double percent_change(double old_value, double new_value) {
  if (old_value == 0.0) return new_value == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
  return (new_value - old_value) / old_value * 100.0;
}

std::string format_percent(double pct) {
  if (std::isnan(pct)) return "n/a";
  // Avoid printing "-0.0%" for tiny negative values.
  if (std::abs(pct) < 0.05) pct = 0.0;
  return fmt("%+.1f%%", pct);
}

ModelEval evaluate(const model::LoadedModel& ckpt, const demo::Dataset& test, int bins,
                   std::optional<double> max_distance) {
  check_no_overlap(ckpt, test);
  const auto samples = demo::build_guidance_dataset(test.scans);
  const auto preds = predict(ckpt.model, samples);
  if (!max_distance) {
    double hi = 0.0;
    for (const auto& s : samples) hi = std::max(hi, distance_proxy(s.action_gt));
    max_distance = hi;
  }
  ModelEval e;
  e.variant = ckpt.meta.variant;
  e.table = mae_table(samples, preds);
  e.curve = stability_curve(samples, preds, bins, max_distance);
  for (int p = 0; p < phantom::kNumPlanes; ++p) {
    e.per_plane[static_cast<std::size_t>(p)] = stability_curve(samples, preds, bins, max_distance, p);
  }
  return e;
}

CompareReport compare(const model::LoadedModel& baseline, const model::LoadedModel& dreamer,
                      const demo::Dataset& test, int bins) {
  if (baseline.meta.train_manifest != dreamer.meta.train_manifest) {
    throw EvalError("checkpoints were trained on different splits (" + baseline.meta.train_manifest + " vs " +
                    dreamer.meta.train_manifest + ")");
  }
  CompareReport r;
  r.baseline = evaluate(baseline, test, bins);
  r.dreamer = evaluate(dreamer, test, bins);
  for (std::size_t p = 0; p < r.percent.size(); ++p) {
    for (std::size_t a = 0; a < 6; ++a) {
      r.percent[p][a] = percent_change(r.baseline.table.rows[p].mae[a], r.dreamer.table.rows[p].mae[a]);
    }
    r.percent_mean[p] =
        percent_change(r.baseline.table.rows[p].mean_over_axes(), r.dreamer.table.rows[p].mean_over_axes());
  }
  r.pooled_std_percent = percent_change(r.baseline.curve.pooled_std_ae, r.dreamer.curve.pooled_std_ae);
  return r;
}

std::string CompareReport::to_text() const {
  std::ostringstream os;
  os << "plane    ";
  for (std::size_t a = 0; a < 6; ++a) os << " | " << kAxisNames[a] << " (" << kAxisUnits[a] << ")";
  os << " | mean\n";
  for (std::size_t p = 0; p < percent.size(); ++p) {
    const auto& b = baseline.table.rows[p];
    const auto& d = dreamer.table.rows[p];
    std::string name(phantom::PlaneId(static_cast<int>(p)).name());
    name.resize(8, ' ');
    os << name << " ";
    if (b.empty()) {
      os << " | (no samples)\n";
      continue;
    }
    for (std::size_t a = 0; a < 6; ++a) {
      os << " | " << fmt("%.2f", b.mae[a]) << " -> " << fmt("%.2f", d.mae[a]) << " (" << format_percent(percent[p][a])
         << ")";
    }
    os << " | " << fmt("%.2f", b.mean_over_axes()) << " -> " << fmt("%.2f", d.mean_over_axes()) << " ("
       << format_percent(percent_mean[p]) << ")\n";
  }
  os << "pooled std of absolute error: " << fmt("%.3f", baseline.curve.pooled_std_ae) << " -> "
     << fmt("%.3f", dreamer.curve.pooled_std_ae) << " (" << format_percent(pooled_std_percent) << ")\n";
  return os.str();
}

std::string CompareReport::to_csv() const {
  std::ostringstream os;
  os << "plane,axis,unit,count,baseline,dreamer,percent\n";
  for (std::size_t p = 0; p < percent.size(); ++p) {
    const std::string name(phantom::PlaneId(static_cast<int>(p)).name());
    const auto& b = baseline.table.rows[p];
    const auto& d = dreamer.table.rows[p];
    for (std::size_t a = 0; a < 6; ++a) {
      os << name << ',' << kAxisNames[a] << ',' << kAxisUnits[a] << ',' << b.count << ',' << fmt("%.6f", b.mae[a])
         << ',' << fmt("%.6f", d.mae[a]) << ',' << fmt("%.1f", percent[p][a]) << '\n';
    }
    os << name << ",mean,," << b.count << ',' << fmt("%.6f", b.mean_over_axes()) << ','
       << fmt("%.6f", d.mean_over_axes()) << ',' << fmt("%.1f", percent_mean[p]) << '\n';
  }
  os << "all,pooled_std_ae,," << baseline.curve.total << ',' << fmt("%.6f", baseline.curve.pooled_std_ae) << ','
     << fmt("%.6f", dreamer.curve.pooled_std_ae) << ',' << fmt("%.1f", pooled_std_percent) << '\n';
  return os.str();
}

std::string mae_csv(const MaeTable& table) {
  std::ostringstream os;
  os << "plane,count";
  for (const char* a : kAxisNames) os << ',' << a;
  os << ",mean\n";
  auto row = [&](const std::string& name, const MaeRow& r) {
    os << name << ',' << r.count;
    for (double v : r.mae) os << ',' << fmt("%.6f", v);
    os << ',' << fmt("%.6f", r.mean_over_axes()) << '\n';
  };
  for (std::size_t p = 0; p < table.rows.size(); ++p) {
    row(std::string(phantom::PlaneId(static_cast<int>(p)).name()), table.rows[p]);
  }
  row("all", table.overall);
  return os.str();
}

std::string stability_csv(const ModelEval& e) {
  std::ostringstream os;
  os << "series,plane,bin,lo,hi,count,mean_ae,std_ae\n";
  auto emit = [&](const std::string& plane, const StabilityCurve& c) {
    for (std::size_t b = 0; b < c.bins.size(); ++b) {
      const auto& bin = c.bins[b];
      os << e.variant << ',' << plane << ',' << b << ',' << fmt("%.6f", bin.lo) << ',' << fmt("%.6f", bin.hi) << ','
         << bin.count << ',' << fmt("%.6f", bin.mean_ae) << ',' << fmt("%.6f", bin.std_ae) << '\n';
    }
  };
  for (std::size_t p = 0; p < e.per_plane.size(); ++p) {
    emit(std::string(phantom::PlaneId(static_cast<int>(p)).name()), e.per_plane[p]);
  }
  emit("all", e.curve);
  return os.str();
}

std::string stability_svg(const std::string& title, std::span<const PlotSeries> series) {
  constexpr double kW = 640, kH = 400, kL = 60, kR = 20, kT = 40, kB = 50;
  double xmax = 1.0, ymax = 0.0;
  for (const auto& s : series) {
    if (!s.curve->edges.empty()) xmax = std::max(xmax, s.curve->edges.back());
    for (const auto& b : s.curve->bins) {
      if (b.count) ymax = std::max(ymax, b.mean_ae + b.std_ae);
    }
  }
  if (!(ymax > 0.0)) ymax = 1.0;
  ymax *= 1.1;
  auto px = [&](double x) { return kL + x / xmax * (kW - kL - kR); };
  auto py = [&](double y) { return kH - kB - y / ymax * (kH - kT - kB); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
     << kW << ' ' << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << title << "</text>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << py(0) << "\" x2=\"" << kW - kR << "\" y2=\"" << py(0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << py(0) << "\" x2=\"" << kL << "\" y2=\"" << kT
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = xmax * i / 5, yv = ymax * i / 5;
    os << "<text x=\"" << px(xv) << "\" y=\"" << py(0) + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt("%.1f", xv) << "</text>\n";
    os << "<text x=\"" << kL - 6 << "\" y=\"" << py(yv) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt("%.1f", yv) << "</text>\n";
  }
  os << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">mean pose difference to target</text>\n";
  os << "<text x=\"16\" y=\"" << (kT + kH - kB) / 2 << "\" transform=\"rotate(-90 16 " << (kT + kH - kB) / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">absolute error</text>\n";

  int legend = 0;
  for (const auto& s : series) {
    std::vector<const StabilityBin*> pts;
    for (const auto& b : s.curve->bins) {
      if (b.count) pts.push_back(&b);
    }
    if (!pts.empty()) {
      os << "<polygon fill=\"" << s.color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (const auto* b : pts) os << px(b->center()) << ',' << py(b->mean_ae + b->std_ae) << ' ';
      for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
        os << px((*it)->center()) << ',' << py(std::max(0.0, (*it)->mean_ae - (*it)->std_ae)) << ' ';
      }
      os << "\"/>\n";
      os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" stroke-dasharray=\"6 3\" points=\"";
      for (const auto* b : pts) os << px(b->center()) << ',' << py(b->mean_ae) << ' ';
      os << "\"/>\n";
    }
    const double ly = kT + 10 + 18 * legend++;
    os << "<line x1=\"" << kL + 12 << "\" y1=\"" << ly << "\" x2=\"" << kL + 36 << "\" y2=\"" << ly << "\" stroke=\""
       << s.color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kL + 42 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"12\">"
       << s.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_eval(const ModelEval& e, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  write_text(out / "mae.csv", mae_csv(e.table));
  write_text(out / "stability.csv", stability_csv(e));
  const std::array<PlotSeries, 1> s = {PlotSeries{e.variant, "#1f77b4", &e.curve}};
  write_text(out / "stability.svg", stability_svg("absolute error vs distance (" + e.variant + ")", s));
}

void write_compare(const CompareReport& r, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  write_text(out / "compare.csv", r.to_csv());
  write_text(out / "compare.txt", r.to_text());
  write_text(out / "stability.csv", stability_csv(r.baseline) + [&] {
    std::string s = stability_csv(r.dreamer);
    return s.substr(s.find('\n') + 1);
  }());
  for (std::size_t p = 0; p < r.baseline.per_plane.size(); ++p) {
    const std::string name(phantom::PlaneId(static_cast<int>(p)).name());
    const std::array<PlotSeries, 2> s = {PlotSeries{"baseline", "#d62728", &r.baseline.per_plane[p]},
                                         PlotSeries{"dreamer", "#1f77b4", &r.dreamer.per_plane[p]}};
    write_text(out / ("stability_" + name + ".svg"), stability_svg(name, s));
  }
}

}  // namespace echoguide::eval
