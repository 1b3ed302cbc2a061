#include "influence/data.hpp"

#include "influence/errors.hpp"

namespace influence {

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  const auto m = static_cast<Eigen::Index>(rows.size());
  out.features.resize(m, features.cols());
  out.labels.resize(m);
  if (sensitive) out.sensitive = Vector(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto src = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
    if (src < 0 || src >= features.rows()) throw InvalidInput("subset row out of range");
    out.features.row(r) = features.row(src);
    out.labels[r] = labels[src];
    if (sensitive) (*out.sensitive)[r] = (*sensitive)[src];
  }
  out.feature_names = feature_names;
  out.label_name = label_name;
  out.sensitive_name = sensitive_name;
  return out;
}

void Dataset::validate() const {
  if (labels.size() != features.rows()) throw InvalidInput("label count does not match row count");
  if (sensitive && sensitive->size() != features.rows()) {
    throw InvalidInput("sensitive attribute count does not match row count");
  }
  if (!features.allFinite() || !labels.allFinite()) throw InvalidInput("dataset contains non-finite values");
}

}  // namespace influence
