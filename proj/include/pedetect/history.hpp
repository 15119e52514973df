#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pedetect {

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_classification = 0.0;
  double train_attention = 0.0;  // 0 when the attention term is off
  double train_total = 0.0;
  double validation_classification = 0.0;
  double validation_attention = 0.0;
  double validation_accuracy = 0.0;
  double validation_auc = 0.5;
  double validation_inside_fraction = 0.0;
  double seconds = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::int64_t selected_epoch = -1;  // highest validation accuracy, earliest on ties
  std::vector<std::string> warnings;

  const EpochRecord& selected() const { return epochs.at(static_cast<std::size_t>(selected_epoch)); }
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void to_json(nlohmann::json& j, const TrainingHistory& h);

// Earliest epoch with the highest validation accuracy among epochs
// >= first_eligible; -1 when none is eligible.
std::int64_t select_epoch(const std::vector<EpochRecord>& epochs, std::int64_t first_eligible = 0);

// Warning text when the 5-epoch moving average of train_total rises during
// the first half of training (counted from `first`, so a CE-only warm-up
// is skipped); empty otherwise.
std::string loss_trend_warning(const std::vector<EpochRecord>& epochs, std::int64_t first = 0);

}  // namespace pedetect
