#include "tempose/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

namespace tempose::metrics {

double add(const geom::Pose& est, const geom::Pose& gt, const geom::ObjectModel& model) {
  const geom::PointSet a = geom::transform_points(est, model.points);
  const geom::PointSet b = geom::transform_points(gt, model.points);
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) total += (a.row(i) - b.row(i)).norm();
  return total / static_cast<double>(a.rows());
}

double add_s(const geom::Pose& est, const geom::Pose& gt, const geom::ObjectModel& model) {
  const geom::PointSet a = geom::transform_points(est, model.points);
  const geom::PointSet b = geom::transform_points(gt, model.points);
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b.rows(); ++j) best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    total += std::sqrt(best);
  }
  return total / static_cast<double>(a.rows());
}

AccuracyCurve accuracy_curve(const std::vector<double>& errors, double max_threshold, int steps) {
  if (errors.empty()) throw EmptyInputError("accuracy curve needs at least one error value");
  if (steps < 2) throw ValidationError(fmt::format("accuracy curve needs >= 2 steps, got {}", steps));
  if (!(max_threshold > 0.0)) throw ValidationError("max threshold must be positive");
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  AccuracyCurve curve;
  curve.thresholds.resize(static_cast<std::size_t>(steps));
  curve.accuracy.resize(static_cast<std::size_t>(steps));
  const double n = static_cast<double>(sorted.size());
  for (int i = 0; i < steps; ++i) {
    const double thr = max_threshold * static_cast<double>(i) / static_cast<double>(steps - 1);
    const auto hit = std::upper_bound(sorted.begin(), sorted.end(), thr) - sorted.begin();
    curve.thresholds[static_cast<std::size_t>(i)] = thr;
    curve.accuracy[static_cast<std::size_t>(i)] = static_cast<double>(hit) / n;
  }
  return curve;
}

double auc(const AccuracyCurve& curve) {
  const auto& t = curve.thresholds;
  const auto& a = curve.accuracy;
  if (t.size() < 2 || t.size() != a.size()) throw ValidationError("malformed accuracy curve");
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < t.size(); ++i) area += 0.5 * (a[i] + a[i + 1]) * (t[i + 1] - t[i]);
  return 100.0 * area / (t.back() - t.front());
}

void sort_records(std::vector<EvalRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const EvalRecord& a, const EvalRecord& b) {
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.sequence != b.sequence) return a.sequence < b.sequence;
    return a.frame < b.frame;
  });
}

Report build_report(const std::vector<EvalRecord>& records,
                    const std::map<int, const geom::ObjectModel*>& models, double max_threshold,
                    int steps) {
  if (records.empty()) throw EmptyInputError("no evaluation records to report");
  std::set<int> unknown;
  for (const auto& r : records)
    if (!models.count(r.class_id)) unknown.insert(r.class_id);
  if (!unknown.empty()) {
    std::string ids;
    for (int id : unknown) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
    throw ValidationError("records reference class ids missing from the model registry: " + ids);
  }

  std::map<int, std::pair<std::vector<double>, std::vector<double>>> per_class;
  std::vector<double> all_add, all_adds;
  for (const auto& r : records) {
    const auto& model = *models.at(r.class_id);
    const double e_add = add(r.estimate, r.ground_truth, model);
    const double e_adds = add_s(r.estimate, r.ground_truth, model);
    per_class[r.class_id].first.push_back(e_add);
    per_class[r.class_id].second.push_back(e_adds);
    all_add.push_back(e_add);
    all_adds.push_back(e_adds);
  }

  Report report;
  for (const auto& [id, errs] : per_class) {
    ObjectScore row;
    row.class_id = id;
    row.label = models.at(id)->name.empty() ? std::to_string(id) : models.at(id)->name;
    row.count = errs.first.size();
    row.add_auc = auc(accuracy_curve(errs.first, max_threshold, steps));
    row.adds_auc = auc(accuracy_curve(errs.second, max_threshold, steps));
    report.rows.push_back(row);
  }
  report.add_curve = accuracy_curve(all_add, max_threshold, steps);
  report.adds_curve = accuracy_curve(all_adds, max_threshold, steps);
  ObjectScore all;
  all.label = "ALL";
  all.count = all_add.size();
  all.add_auc = auc(report.add_curve);
  all.adds_auc = auc(report.adds_curve);
  report.rows.push_back(all);
  return report;
}

std::string report_csv(const Report& report) {
  std::string out = "class,ADD_AUC,ADDS_AUC\n";
  for (const auto& r : report.rows) out += fmt::format("{},{:.4f},{:.4f}\n", r.label, r.add_auc, r.adds_auc);
  return out;
}

std::string curve_csv(const AccuracyCurve& curve) {
  std::string out = "threshold,accuracy\n";
  for (std::size_t i = 0; i < curve.thresholds.size(); ++i)
    out += fmt::format("{:.6f},{:.6f}\n", curve.thresholds[i], curve.accuracy[i]);
  return out;
}

// Polyline plot with a frame, ticks, and a legend.
std::string curve_svg(const std::vector<std::pair<std::string, const AccuracyCurve*>>& curves,
                      const std::string& title) {
  constexpr double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
  static const char* kColors[] = {"#2a9d8f", "#e76f51", "#8e44ad", "#264653", "#f4a261"};
  double xmax = 0.0;
  for (const auto& [_, c] : curves)
    if (!c->thresholds.empty()) xmax = std::max(xmax, c->thresholds.back());
  if (xmax <= 0.0) xmax = 1.0;
  auto px = [&](double x) { return L + (W - L - R) * x / xmax; };
  auto py = [&](double y) { return H - B - (H - T - B) * y; };

  std::ostringstream s;
  s << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">)", W, H) << '\n';
  s << fmt::format(R"(<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>)", W / 2, title)
    << '\n';
  s << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>)", L, T,
                   W - L - R, H - T - B)
    << '\n';
  for (int i = 0; i <= 4; ++i) {
    const double fx = xmax * i / 4.0, fy = i / 4.0;
    s << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="10" text-anchor="middle">{:.3f}</text>)",
                     px(fx), H - B + 16, fx)
      << '\n';
    s << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="10" text-anchor="end">{:.2f}</text>)",
                     L - 6, py(fy) + 3, fy)
      << '\n';
  }
  s << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="12" text-anchor="middle">threshold (m)</text>)",
                   L + (W - L - R) / 2, H - 12)
    << '\n';
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = *curves[k].second;
    const char* color = kColors[k % 5];
    s << R"(<polyline fill="none" stroke=")" << color << R"(" stroke-width="1.5" points=")";
    for (std::size_t i = 0; i < c.thresholds.size(); ++i)
      s << fmt::format("{}{:.2f},{:.2f}", i ? " " : "", px(c.thresholds[i]), py(c.accuracy[i]));
    s << "\"/>\n";
    s << fmt::format(R"(<text x="{:.1f}" y="{:.1f}" font-size="11" fill="{}">{}</text>)", L + 10,
                     T + 16 + 14 * static_cast<double>(k), color, curves[k].first)
      << '\n';
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace tempose::metrics
