#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace halluscope::numeric {

double mean(std::span<const double> x);

/// Population variance (divides by n).
double variance(std::span<const double> x);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Least-squares fit of y on x with intercept. A constant x gives slope 0 and
/// intercept mean(y).
LinearFit ols(std::span<const double> x, std::span<const double> y);

/// Least-squares slope of y against positions 0..n-1.
double slope_over_index(std::span<const double> y);

double pearson(std::span<const double> x, std::span<const double> y);

/// Shannon entropy (natural log) of a probability vector; 0 log 0 = 0.
double entropy(std::span<const double> p);

double sigmoid(double z);

}  // namespace halluscope::numeric
