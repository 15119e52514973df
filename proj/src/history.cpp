#include "pedetect/history.hpp"

#include <algorithm>
#include <numeric>

namespace pedetect {

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"train_classification", r.train_classification},
                     {"train_attention", r.train_attention},
                     {"train_total", r.train_total},
                     {"validation_classification", r.validation_classification},
                     {"validation_attention", r.validation_attention},
                     {"validation_accuracy", r.validation_accuracy},
                     {"validation_auc", r.validation_auc},
                     {"validation_inside_fraction", r.validation_inside_fraction},
                     {"seconds", r.seconds}};
}

void to_json(nlohmann::json& j, const TrainingHistory& h) {
  j = nlohmann::json{{"epochs", h.epochs}, {"selected_epoch", h.selected_epoch}, {"warnings", h.warnings}};
}

std::int64_t select_epoch(const std::vector<EpochRecord>& epochs, std::int64_t first_eligible) {
  std::int64_t best = -1;
  for (auto i = static_cast<std::size_t>(std::max<std::int64_t>(0, first_eligible)); i < epochs.size(); ++i)
    if (best < 0 || epochs[i].validation_accuracy > epochs[static_cast<std::size_t>(best)].validation_accuracy)
      best = static_cast<std::int64_t>(i);
  return best;
}

std::string loss_trend_warning(const std::vector<EpochRecord>& epochs, std::int64_t first) {
  constexpr std::size_t window = 5;
  const auto begin = static_cast<std::size_t>(std::max<std::int64_t>(0, first));
  const std::size_t half = begin + (epochs.size() - std::min(begin, epochs.size())) / 2;
  if (half < begin + window + 1) return {};
  double previous = 0.0;
  for (std::size_t end = begin + window; end <= half; ++end) {
    double avg = 0.0;
    for (std::size_t k = end - window; k < end; ++k) avg += epochs[k].train_total;
    avg /= static_cast<double>(window);
    if (end > begin + window && avg > previous + 1e-9)
      return "smoothed training loss rose at epoch " + std::to_string(end - 1) +
             " during the first half of training; check the learning rate";
    previous = avg;
  }
  return {};
}

}  // namespace pedetect
