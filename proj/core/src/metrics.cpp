/*
 * Copyright 2026 The bevtune Authors
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

#include "bevtune/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "bevtune/errors.hpp"

namespace bevtune::metrics {

namespace {

void validate_config(const MetricConfig& cfg) {
  if (cfg.class_names.empty()) throw ConfigError("metrics: class set is empty");
  if (cfg.thresholds.empty()) throw ConfigError("metrics: threshold list is empty");
  for (std::size_t i = 0; i < cfg.thresholds.size(); ++i) {
    if (cfg.thresholds[i] <= 0.0) throw ConfigError("metrics: thresholds must be positive");
    if (i > 0 && cfg.thresholds[i] <= cfg.thresholds[i - 1])
      throw ConfigError("metrics: thresholds must be strictly ascending");
  }
  if (cfg.tp_threshold <= 0.0) throw ConfigError("metrics: tp_threshold must be positive");
  if (cfg.min_recall < 0.0 || cfg.min_recall >= 1.0)
    throw ConfigError("metrics: min_recall must be in [0, 1)");
  if (cfg.min_precision < 0.0 || cfg.min_precision >= 1.0)
    throw ConfigError("metrics: min_precision must be in [0, 1)");
}

double bev_distance(const geom::Box3D& a, const geom::Box3D& b) {
  return std::hypot(a.center.x - b.center.x, a.center.y - b.center.y);
}

}  // namespace

MatchResult match_by_center_distance(std::span<const geom::Box3D> preds,
                                     std::span<const geom::Box3D> gts, double threshold) {
  if (threshold <= 0.0) throw std::invalid_argument("match_by_center_distance: threshold <= 0");
  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return preds[a].score > preds[b].score; });

  std::vector<bool> taken(gts.size(), false);
  MatchResult out;
  out.labels.reserve(preds.size());
  for (int i : order) {
    int best = -1;
    double best_d = threshold;  // strict <: a gt exactly at the threshold is no match
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (taken[j]) continue;
      const double d = bev_distance(preds[i], gts[j]);
      if (d < best_d) {
        best = static_cast<int>(j);
        best_d = d;
      }
    }
    out.labels.push_back({preds[i].score, best >= 0});
    if (best >= 0) {
      taken[best] = true;
      out.pairs.emplace_back(i, best);
    }
  }
  return out;
}

double average_precision(std::span<const PredLabel> labels, int n_gt, const MetricConfig& cfg) {
  if (n_gt < 0) throw std::invalid_argument("average_precision: n_gt < 0");
  if (cfg.min_recall < 0.0 || cfg.min_recall >= 1.0 || cfg.min_precision < 0.0 ||
      cfg.min_precision >= 1.0)
    throw ConfigError("average_precision: clip constants must be in [0, 1)");
  if (n_gt == 0 || labels.empty()) return 0.0;

  std::vector<double> rec(labels.size()), prec(labels.size());
  int tp = 0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t].tp) ++tp;
    rec[t] = static_cast<double>(tp) / n_gt;
    prec[t] = static_cast<double>(tp) / static_cast<double>(t + 1);
  }

  const int start = static_cast<int>(std::lround(100.0 * cfg.min_recall)) + 1;
  // The normalizer accumulates through the same addition chain as the
  // numerator so a perfect detector scores exactly 1.0 instead of drifting
  // an ulp past it.
  double sum = 0.0, norm = 0.0;
  for (int i = start; i <= 100; ++i) {
    const double r = i / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), r);
    const double p = it == rec.end() ? 0.0 : prec[static_cast<std::size_t>(it - rec.begin())];
    sum += std::max(0.0, p - cfg.min_precision);
    norm += 1.0 - cfg.min_precision;
  }
  return sum / norm;
}

double mean_ap(const std::vector<std::vector<double>>& ap_table) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : ap_table) {
    sum = std::accumulate(row.begin(), row.end(), sum);
    n += row.size();
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

TPErrors tp_errors(std::span<const geom::Box3D> preds, std::span<const geom::Box3D> gts,
                   std::span<const std::pair<int, int>> pairs) {
  if (pairs.empty()) return {1.0, 1.0, 1.0, 1.0, 1.0};  // no-TP convention
  TPErrors e;
  for (const auto& [i, j] : pairs) {
    const geom::Box3D& p = preds[i];
    const geom::Box3D& g = gts[j];
    e.ate += bev_distance(p, g);
    const double rl = std::min(p.length, g.length) / std::max(p.length, g.length);
    const double rw = std::min(p.width, g.width) / std::max(p.width, g.width);
    const double rh = std::min(p.height, g.height) / std::max(p.height, g.height);
    e.ase += 1.0 - rl * rw * rh;
    e.aoe += std::abs(geom::wrap_angle(p.yaw - g.yaw));
    e.ave += std::hypot(p.vx - g.vx, p.vy - g.vy);
    e.aae += p.attribute_id == g.attribute_id ? 0.0 : 1.0;
  }
  const double n = static_cast<double>(pairs.size());
  e.ate /= n;
  e.ase /= n;
  e.aoe /= n;
  e.ave /= n;
  e.aae /= n;
  return e;
}

double nds(double map, const TPErrors& tp) {
  if (map < 0.0 || map > 1.0) throw std::invalid_argument("nds: mAP outside [0, 1]");
  const double penalties = (1.0 - std::min(1.0, tp.ate)) + (1.0 - std::min(1.0, tp.ase)) +
                           (1.0 - std::min(1.0, tp.aoe)) + (1.0 - std::min(1.0, tp.ave)) +
                           (1.0 - std::min(1.0, tp.aae));
  return (5.0 * map + penalties) / 10.0;
}

MetricReport evaluate_detections(std::span<const std::vector<geom::Box3D>> preds_per_scene,
                                 std::span<const std::vector<geom::Box3D>> gts_per_scene,
                                 const MetricConfig& cfg) {
  validate_config(cfg);
  if (preds_per_scene.size() != gts_per_scene.size())
    throw std::invalid_argument("evaluate_detections: scene lists differ in length");

  const int n_classes = static_cast<int>(cfg.class_names.size());
  auto check_class = [&](const geom::Box3D& b) {
    if (b.class_id < 0 || b.class_id >= n_classes)
      throw std::out_of_range("evaluate_detections: box class outside the class set");
  };
  for (const auto& scene : preds_per_scene)
    for (const auto& b : scene) check_class(b);
  for (const auto& scene : gts_per_scene)
    for (const auto& b : scene) check_class(b);

  MetricReport report;
  report.config = cfg;
  report.ap.assign(n_classes, std::vector<double>(cfg.thresholds.size(), 0.0));
  report.per_class_tp.resize(n_classes);
  report.class_has_tp.assign(n_classes, false);

  for (int c = 0; c < n_classes; ++c) {
    struct Slice {
      std::vector<geom::Box3D> preds, gts;
    };
    std::vector<Slice> slices(preds_per_scene.size());
    int n_gt = 0;
    for (std::size_t s = 0; s < preds_per_scene.size(); ++s) {
      for (const auto& b : preds_per_scene[s])
        if (b.class_id == c) slices[s].preds.push_back(b);
      for (const auto& b : gts_per_scene[s])
        if (b.class_id == c) slices[s].gts.push_back(b);
      n_gt += static_cast<int>(slices[s].gts.size());
    }

    for (std::size_t ti = 0; ti < cfg.thresholds.size(); ++ti) {
      std::vector<PredLabel> pooled;
      for (const Slice& sl : slices) {
        const auto mr = match_by_center_distance(sl.preds, sl.gts, cfg.thresholds[ti]);
        pooled.insert(pooled.end(), mr.labels.begin(), mr.labels.end());
      }
      std::stable_sort(pooled.begin(), pooled.end(),
                       [](const PredLabel& a, const PredLabel& b) { return a.score > b.score; });
      report.ap[c][ti] = average_precision(pooled, n_gt, cfg);
    }

    std::vector<geom::Box3D> mp, mg;
    for (const Slice& sl : slices) {
      const auto mr = match_by_center_distance(sl.preds, sl.gts, cfg.tp_threshold);
      for (const auto& [i, j] : mr.pairs) {
        mp.push_back(sl.preds[i]);
        mg.push_back(sl.gts[j]);
      }
    }
    std::vector<std::pair<int, int>> identity(mp.size());
    for (std::size_t k = 0; k < mp.size(); ++k) identity[k] = {static_cast<int>(k),
                                                               static_cast<int>(k)};
    report.class_has_tp[c] = !mp.empty();
    report.per_class_tp[c] = tp_errors(mp, mg, identity);
  }

  report.map = mean_ap(report.ap);
  TPErrors mean;
  for (const TPErrors& e : report.per_class_tp) {
    mean.ate += e.ate;
    mean.ase += e.ase;
    mean.aoe += e.aoe;
    mean.ave += e.ave;
    mean.aae += e.aae;
  }
  mean.ate /= n_classes;
  mean.ase /= n_classes;
  mean.aoe /= n_classes;
  mean.ave /= n_classes;
  mean.aae /= n_classes;
  report.mean_tp = mean;
  report.nds_value = nds(report.map, mean);
  return report;
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

std::string MetricReport::to_text() const {
  std::string out;
  out += "class";
  out.append(std::max<std::size_t>(1, 14 - 5), ' ');
  for (double th : config.thresholds) out += fmt(" AP@%-6.3g", th);
  out += "    ATE    ASE    AOE    AVE    AAE\n";
  for (std::size_t c = 0; c < ap.size(); ++c) {
    std::string name = config.class_names[c];
    if (name.size() > 13) name.resize(13);
    out += name;
    out.append(14 - name.size(), ' ');
    for (double v : ap[c]) out += fmt("   %.4f", v);
    const TPErrors& e = per_class_tp[c];
    out += fmt("  %.3f", e.ate) + fmt("  %.3f", e.ase) + fmt("  %.3f", e.aoe) +
           fmt("  %.3f", e.ave) + fmt("  %.3f", e.aae);
    out += "\n";
  }
  out += fmt("mAP  %.4f", map) + fmt("  NDS  %.4f", nds_value) + "\n";
  out += fmt("mATE %.4f", mean_tp.ate) + fmt("  mASE %.4f", mean_tp.ase) +
         fmt("  mAOE %.4f", mean_tp.aoe) + fmt("  mAVE %.4f", mean_tp.ave) +
         fmt("  mAAE %.4f", mean_tp.aae) + "\n";
  return out;
}

std::string MetricReport::to_csv() const {
  std::string out = "section,class,threshold,metric,value\n";
  for (std::size_t c = 0; c < ap.size(); ++c)
    for (std::size_t ti = 0; ti < config.thresholds.size(); ++ti)
      out += "ap," + config.class_names[c] + "," + fmt("%g", config.thresholds[ti]) + ",AP," +
             fmt("%.10g", ap[c][ti]) + "\n";
  static constexpr const char* kNames[5] = {"ATE", "ASE", "AOE", "AVE", "AAE"};
  for (std::size_t c = 0; c < per_class_tp.size(); ++c) {
    const TPErrors& e = per_class_tp[c];
    const double vals[5] = {e.ate, e.ase, e.aoe, e.ave, e.aae};
    for (int k = 0; k < 5; ++k)
      out += "tp," + config.class_names[c] + "," + fmt("%g", config.tp_threshold) + "," +
             kNames[k] + "," + fmt("%.10g", vals[k]) + "\n";
  }
  out += "summary,,,mAP," + fmt("%.10g", map) + "\n";
  out += "summary,,,NDS," + fmt("%.10g", nds_value) + "\n";
  const double vals[5] = {mean_tp.ate, mean_tp.ase, mean_tp.aoe, mean_tp.ave, mean_tp.aae};
  static constexpr const char* kMeanNames[5] = {"mATE", "mASE", "mAOE", "mAVE", "mAAE"};
  for (int k = 0; k < 5; ++k)
    out += std::string("summary,,,") + kMeanNames[k] + "," + fmt("%.10g", vals[k]) + "\n";
  return out;
}

}  // namespace bevtune::metrics
