#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace halluscope {

/// Dense row-major matrix of doubles; rows are samples.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
    return out;
  }

  Matrix select_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows_in) {
    Matrix out(rows_in.size(), rows_in.empty() ? 0 : rows_in.front().size());
    for (std::size_t r = 0; r < rows_in.size(); ++r)
      for (std::size_t c = 0; c < out.cols; ++c) out(r, c) = rows_in[r].at(c);
    return out;
  }
};

}  // namespace halluscope
