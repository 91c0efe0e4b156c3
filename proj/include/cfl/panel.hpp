#pragma once

#include "cfl/common.hpp"

#include <string>
#include <vector>

namespace cfl {

/// One domain t: the cross-sectional samples of a contiguous block of
/// trading days. Sources carry negative time indices t_{-i}; the OOS
/// domain is index 0.
struct DomainPanel {
  int domain_id = 0;
  Matrix inputs;  // n x D
  Vector labels;
  bool labels_standardized = true;

  Eigen::Index n() const { return inputs.rows(); }
  Eigen::Index dim() const { return inputs.cols(); }
};

/// Simple train/validation split over a panel vector, by index.
struct PanelSplit {
  std::vector<int> train;
  std::vector<int> val;
};

/// Last `n_val` panels become validation, the rest train (oldest-first
/// ordering assumed).
inline PanelSplit tail_validation_split(std::size_t n_panels, std::size_t n_val) {
  require(n_val < n_panels, "validation split needs at least one training panel");
  PanelSplit s;
  for (std::size_t i = 0; i + n_val < n_panels; ++i) s.train.push_back(static_cast<int>(i));
  for (std::size_t i = n_panels - n_val; i < n_panels; ++i) s.val.push_back(static_cast<int>(i));
  return s;
}

}  // namespace cfl
