#include "pedetect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

namespace pedetect::metrics {
namespace {

void check_sizes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
}

struct Split {
  std::vector<double> pos, neg;
};

Split by_class(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  Split s;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? s.pos : s.neg).push_back(scores[i]);
  return s;
}

}  // namespace

void to_json(nlohmann::json& j, const RocPoint& p) {
  j = nlohmann::json{{"fpr", p.fpr}, {"tpr", p.tpr}, {"threshold", p.threshold}};
}

void to_json(nlohmann::json& j, const EvalResult& r) {
  j = nlohmann::json{{"auc", r.auc},
                     {"ci", {r.ci.low, r.ci.high}},
                     {"ci_level", 1.0 - r.alpha},
                     {"ci_degenerate", r.ci.degenerate},
                     {"accuracy", r.accuracy},
                     {"threshold", r.threshold},
                     {"n_pos", r.n_pos},
                     {"n_neg", r.n_neg},
                     {"roc_points", r.roc_points},
                     {"warnings", r.warnings}};
}

std::vector<double> midranks(std::span<const double> values) {
  const auto n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (auto k = i; k < j; ++k) ranks[order[k]] = mid;
    i = j;
  }
  return ranks;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  const auto ranks = midranks(scores);
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (labels[i]) {
      rank_sum += ranks[i];
      n_pos += 1.0;
    }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw std::invalid_argument("auc needs at least one positive and one negative");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double P = 0, N = 0;
  for (int l : labels) (l ? P : N) += 1.0;
  if (P == 0.0 || N == 0.0) throw std::invalid_argument("roc_curve needs both classes");
  std::vector<RocPoint> roc{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  double tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp) += 1.0;
      ++i;
    }
    roc.push_back({fp / N, tp / P, s});
  }
  return roc;
}

double trapezoid_area(std::span<const RocPoint> roc) {
  double area = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i)
    area += (roc[i].fpr - roc[i - 1].fpr) * 0.5 * (roc[i].tpr + roc[i - 1].tpr);
  return area;
}

double delong_variance(std::span<const double> scores, std::span<const int> labels) {
  const auto s = by_class(scores, labels);
  const auto m = static_cast<double>(s.pos.size());
  const auto n = static_cast<double>(s.neg.size());
  if (s.pos.size() < 2 || s.neg.size() < 2) throw std::invalid_argument("delong_ci needs >= 2 samples per class");

  std::vector<double> all(s.pos);
  all.insert(all.end(), s.neg.begin(), s.neg.end());
  const auto tz = midranks(all);
  const auto tx = midranks(s.pos);
  const auto ty = midranks(s.neg);

  // Placement values: V10 for positives, V01 for negatives.
  std::vector<double> v10(s.pos.size()), v01(s.neg.size());
  for (std::size_t i = 0; i < s.pos.size(); ++i) v10[i] = (tz[i] - tx[i]) / n;
  for (std::size_t j = 0; j < s.neg.size(); ++j) v01[j] = 1.0 - (tz[s.pos.size() + j] - ty[j]) / m;

  auto sample_var = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return acc / static_cast<double>(v.size() - 1);
  };
  return sample_var(v10) / m + sample_var(v01) / n;
}

Interval delong_ci(std::span<const double> scores, std::span<const int> labels, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  const double a = auc(scores, labels);
  const double var = delong_variance(scores, labels);
  if (!(var > 1e-300)) return {a, a, true};
  const boost::math::normal_distribution<double> unit;
  const double z = boost::math::quantile(unit, 1.0 - alpha / 2.0);
  const double half = z * std::sqrt(var);
  return {std::max(0.0, a - half), std::min(1.0, a + half), false};
}

double accuracy_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_sizes(scores, labels);
  if (scores.empty()) throw std::invalid_argument("accuracy_at needs at least one sample");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    correct += static_cast<int>(scores[i] >= threshold) == (labels[i] != 0);
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

EvalResult evaluate(std::span<const double> scores, std::span<const int> labels, double threshold, double alpha) {
  EvalResult r;
  r.threshold = threshold;
  r.alpha = alpha;
  for (int l : labels) (l ? r.n_pos : r.n_neg) += 1;
  r.accuracy = accuracy_at(scores, labels, threshold);
  if (r.n_pos == 0 || r.n_neg == 0) {
    r.warnings.push_back("single-class evaluation set: AUC undefined, reported as 0.5");
    r.ci = {0.5, 0.5, true};
    return r;
  }
  r.auc = auc(scores, labels);
  r.roc_points = roc_curve(scores, labels);
  if (r.n_pos >= 2 && r.n_neg >= 2) {
    r.ci = delong_ci(scores, labels, alpha);
    if (r.ci.degenerate) r.warnings.push_back("zero DeLong variance: point confidence interval");
  } else {
    r.ci = {r.auc, r.auc, true};
    r.warnings.push_back("fewer than two samples in a class: no confidence interval");
  }
  return r;
}

Localization attention_localization(std::span<const float> attention, std::span<const std::uint8_t> mask) {
  if (attention.size() != mask.size()) throw std::invalid_argument("attention and mask shapes differ");
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t b) { return b != 0; }))
    throw std::invalid_argument("attention_localization needs a nonempty mask");
  double total = 0.0, inside = 0.0;
  float peak = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < attention.size(); ++i) {
    total += attention[i];
    if (mask[i]) inside += attention[i];
    peak = std::max(peak, attention[i]);
  }
  Localization out;
  if (!(total > 0.0)) return out;
  out.inside_fraction = inside / total;
  for (std::size_t i = 0; i < attention.size() && !out.hit; ++i) out.hit = attention[i] == peak && mask[i];
  return out;
}

std::string scores_csv(std::span<const std::string> ids, std::span<const double> scores, std::span<const int> labels) {
  std::ostringstream out;
  out.precision(9);
  out << "study_id,score,label\n";
  for (std::size_t i = 0; i < scores.size(); ++i) out << ids[i] << ',' << scores[i] << ',' << labels[i] << '\n';
  return out.str();
}

}  // namespace pedetect::metrics
