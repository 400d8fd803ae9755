#include "halluscope/trees.hpp"

#include <algorithm>

#include "halluscope/error.hpp"

namespace halluscope::trees {

using nlohmann::json;

int Tree::add_leaf(double v) {
  feature.push_back(-1);
  threshold.push_back(0.0);
  left.push_back(-1);
  right.push_back(-1);
  value.push_back(v);
  return static_cast<int>(feature.size()) - 1;
}

double Tree::predict(std::span<const double> x) const {
  int node = 0;
  while (feature[node] >= 0) node = x[feature[node]] <= threshold[node] ? left[node] : right[node];
  return value[node];
}

void to_json(json& j, const Tree& t) {
  j = json{{"feature", t.feature}, {"threshold", t.threshold}, {"left", t.left}, {"right", t.right}, {"value", t.value}};
}

void from_json(const json& j, Tree& t) {
  t.feature = j.at("feature").get<std::vector<int>>();
  t.threshold = j.at("threshold").get<std::vector<double>>();
  t.left = j.at("left").get<std::vector<int>>();
  t.right = j.at("right").get<std::vector<int>>();
  t.value = j.at("value").get<std::vector<double>>();
  const auto n = t.feature.size();
  if (t.threshold.size() != n || t.left.size() != n || t.right.size() != n || t.value.size() != n || n == 0)
    fail(ErrorKind::kFormat, "tree: inconsistent node arrays");
  for (std::size_t i = 0; i < n; ++i) {
    if (t.feature[i] < 0) continue;
    if (t.left[i] <= static_cast<int>(i) || t.right[i] <= static_cast<int>(i) || t.left[i] >= static_cast<int>(n) ||
        t.right[i] >= static_cast<int>(n))
      fail(ErrorKind::kFormat, "tree: child index out of range");
  }
}

FeatureBinner::FeatureBinner(const Matrix& X, int max_bins) {
  require(max_bins >= 2 && max_bins <= 256, ErrorKind::kInvalidArgument, "binner: max_bins must be in [2,256]");
  edges_.resize(X.cols);
  std::vector<double> col;
  for (std::size_t f = 0; f < X.cols; ++f) {
    col = X.column(f);
    std::sort(col.begin(), col.end());
    col.erase(std::unique(col.begin(), col.end()), col.end());
    auto& e = edges_[f];
    if (static_cast<int>(col.size()) <= max_bins) {
      for (std::size_t i = 0; i + 1 < col.size(); ++i) e.push_back(0.5 * (col[i] + col[i + 1]));
    } else {
      // Quantiles over distinct values keep bins populated for heavy ties.
      for (int b = 1; b < max_bins; ++b) {
        const std::size_t k = static_cast<std::size_t>(static_cast<double>(b) * col.size() / max_bins);
        const double edge = 0.5 * (col[k - 1] + col[k]);
        if (e.empty() || edge > e.back()) e.push_back(edge);
      }
    }
  }
}

std::vector<std::vector<std::uint8_t>> FeatureBinner::transform(const Matrix& X) const {
  require(X.cols == edges_.size(), ErrorKind::kInvalidArgument, "binner: column count mismatch");
  std::vector<std::vector<std::uint8_t>> codes(X.cols, std::vector<std::uint8_t>(X.rows));
  for (std::size_t f = 0; f < X.cols; ++f) {
    const auto& e = edges_[f];
    for (std::size_t r = 0; r < X.rows; ++r) {
      const double x = X(r, f);
      codes[f][r] = static_cast<std::uint8_t>(std::lower_bound(e.begin(), e.end(), x) - e.begin());
    }
  }
  return codes;
}

}  // namespace halluscope::trees
