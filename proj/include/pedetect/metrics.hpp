#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pedetect::metrics {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // score >= threshold counts as positive
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
  bool degenerate = false;  // zero variance: point interval
};

struct EvalResult {
  std::vector<RocPoint> roc_points;
  double auc = 0.5;
  Interval ci;
  double alpha = 0.05;
  double accuracy = 0.0;
  double threshold = 0.5;
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const RocPoint& p);
void to_json(nlohmann::json& j, const EvalResult& r);

// Mann-Whitney AUC with half credit for ties. Throws std::invalid_argument
// unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

// Empirical ROC from (0,0) to (1,1), one vertex per distinct score.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
double trapezoid_area(std::span<const RocPoint> roc);

// Fast DeLong: variance of the AUC from placement values computed with
// midranks, normal interval at level 1 - alpha clipped to [0, 1]. Needs at
// least two samples per class.
Interval delong_ci(std::span<const double> scores, std::span<const int> labels, double alpha = 0.05);
double delong_variance(std::span<const double> scores, std::span<const int> labels);

// Fraction of samples where (score >= threshold) equals the label.
double accuracy_at(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

EvalResult evaluate(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5,
                    double alpha = 0.05);

struct Localization {
  double inside_fraction = 0.0;
  bool hit = false;
};

// Attention mass inside the mask and whether a maximum of the attention lies
// inside it. An all-zero map scores (0, miss). Empty masks are rejected.
Localization attention_localization(std::span<const float> attention, std::span<const std::uint8_t> mask);

// Midranks (1-based, ties averaged) of the values.
std::vector<double> midranks(std::span<const double> values);

std::string scores_csv(std::span<const std::string> ids, std::span<const double> scores, std::span<const int> labels);

}  // namespace pedetect::metrics
