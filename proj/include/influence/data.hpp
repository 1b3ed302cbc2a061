#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "influence/nn.hpp"

namespace influence {

// Rows are samples z_i = (x_i, y_i[, s_i]).
struct Dataset {
  RowMatrix features;             // n x p
  Vector labels;                  // n; class index for categorical heads
  std::optional<Vector> sensitive;  // n; excluded from features
  std::vector<std::string> feature_names;
  std::string label_name = "y";
  std::string sensitive_name = "s";

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
  ConstVectorRef x(std::size_t i) const { return features.row(static_cast<Eigen::Index>(i)).transpose(); }
  double y(std::size_t i) const { return labels[static_cast<Eigen::Index>(i)]; }

  Dataset subset(std::span<const std::size_t> rows) const;
  void validate() const;
};

}  // namespace influence
