#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "halluscope/matrix.hpp"

namespace halluscope::trees {

/// Node-array tree. Internal nodes route `x[feature] <= threshold` to `left`.
/// Leaves have feature == -1 and carry `value`.
struct Tree {
  std::vector<int> feature;
  std::vector<double> threshold;
  std::vector<int> left;
  std::vector<int> right;
  std::vector<double> value;

  int add_leaf(double v);
  std::size_t size() const { return feature.size(); }
  double predict(std::span<const double> x) const;
};

void to_json(nlohmann::json& j, const Tree& t);
void from_json(const nlohmann::json& j, Tree& t);

/// Per-feature quantile binning. bin(x) = number of edges strictly below x,
/// so `bin(x) <= b` iff `x <= edge[b]`.
class FeatureBinner {
 public:
  FeatureBinner() = default;
  FeatureBinner(const Matrix& X, int max_bins);

  std::size_t n_features() const { return edges_.size(); }
  const std::vector<double>& edges(std::size_t f) const { return edges_[f]; }
  int n_bins(std::size_t f) const { return static_cast<int>(edges_[f].size()) + 1; }

  /// Column-major codes [feature][row].
  std::vector<std::vector<std::uint8_t>> transform(const Matrix& X) const;

 private:
  std::vector<std::vector<double>> edges_;
};

}  // namespace halluscope::trees
