#pragma once

// Brute-force reference implementations for equivalence tests.

#include <string>
#include <vector>

namespace oracle {

double entropy(const std::vector<double>& p);
double ols_slope(const std::vector<double>& x, const std::vector<double>& y);
double variance(const std::vector<double>& x);
double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b);
double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels);
double ecdf_ks(const std::vector<double>& a, const std::vector<double>& b);

struct PavFit {
  std::vector<double> knots;   // distinct scores, ascending
  std::vector<double> values;  // fitted value per knot
};
PavFit pav(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace oracle
