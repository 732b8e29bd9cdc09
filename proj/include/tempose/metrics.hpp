#pragma once

// ADD / ADD-S pose errors and the accuracy-threshold AUC used to summarize them.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tempose/geom.hpp"

namespace tempose::metrics {

inline constexpr double kDefaultMaxThreshold = 0.10;  // meters
inline constexpr int kDefaultSteps = 1000;

struct EvalRecord {
  int class_id = 0;
  std::string sequence;
  int frame = 0;
  geom::Pose estimate;
  geom::Pose ground_truth;
};

struct AccuracyCurve {
  std::vector<double> thresholds;  // ascending, meters
  std::vector<double> accuracy;    // fractions in [0, 1]
};

// Mean distance between corresponding model points.
double add(const geom::Pose& est, const geom::Pose& gt, const geom::ObjectModel& model);

// Mean distance from each estimated point to its nearest ground-truth point.
double add_s(const geom::Pose& est, const geom::Pose& gt, const geom::ObjectModel& model);

AccuracyCurve accuracy_curve(const std::vector<double>& errors,
                             double max_threshold = kDefaultMaxThreshold,
                             int steps = kDefaultSteps);

// Trapezoidal area under the curve, normalized to [0, 100].
double auc(const AccuracyCurve& curve);

struct ObjectScore {
  std::string label;  // class name, or "ALL"
  int class_id = -1;  // -1 for the pooled row
  std::size_t count = 0;
  double add_auc = 0.0;
  double adds_auc = 0.0;
};

struct Report {
  std::vector<ObjectScore> rows;  // ascending class id, pooled row last
  AccuracyCurve add_curve;        // pooled
  AccuracyCurve adds_curve;       // pooled
};

// Groups records by class; the ALL row is the AUC of the pooled error list.
// Throws ValidationError listing any class ids missing from `models`.
Report build_report(const std::vector<EvalRecord>& records,
                    const std::map<int, const geom::ObjectModel*>& models,
                    double max_threshold = kDefaultMaxThreshold, int steps = kDefaultSteps);

// Canonical ordering for deterministic merges: (class_id, sequence, frame).
void sort_records(std::vector<EvalRecord>& records);

std::string report_csv(const Report& report);
std::string curve_csv(const AccuracyCurve& curve);
std::string curve_svg(const std::vector<std::pair<std::string, const AccuracyCurve*>>& curves,
                      const std::string& title);

}  // namespace tempose::metrics
