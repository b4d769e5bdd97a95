#pragma once

// Per-column min-max scaling to [-1, 1].

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "thermoloop/core/errors.hpp"

namespace thermoloop {

struct ColumnScaler {
  Eigen::VectorXd lo, hi;

  static ColumnScaler fit(const Eigen::MatrixXd& data) {
    require(data.rows() > 0, "ColumnScaler::fit: empty data");
    ColumnScaler s;
    s.lo = data.colwise().minCoeff().transpose();
    s.hi = data.colwise().maxCoeff().transpose();
    for (Eigen::Index c = 0; c < s.lo.size(); ++c)
      if (!(s.hi(c) > s.lo(c))) {
        // Constant column: centre it with a unit half-span.
        s.lo(c) -= 1.0;
        s.hi(c) += 1.0;
      }
    return s;
  }

  Eigen::Index size() const { return lo.size(); }
  double span(Eigen::Index c) const { return hi(c) - lo(c); }

  /// Multiplier taking a physical rate of column c into normalized units.
  double rate_scale(Eigen::Index c) const { return 2.0 / span(c); }

  double normalize(double x, Eigen::Index c) const { return 2.0 * (x - lo(c)) / span(c) - 1.0; }
  double denormalize(double z, Eigen::Index c) const { return lo(c) + 0.5 * (z + 1.0) * span(c); }

  Eigen::MatrixXd normalize(const Eigen::MatrixXd& x) const {
    require(x.cols() == size(), "ColumnScaler: column count mismatch");
    Eigen::MatrixXd z(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      z.col(c) = (2.0 * (x.col(c).array() - lo(c)) / span(c) - 1.0).matrix();
    return z;
  }
  Eigen::MatrixXd denormalize(const Eigen::MatrixXd& z) const {
    require(z.cols() == size(), "ColumnScaler: column count mismatch");
    Eigen::MatrixXd x(z.rows(), z.cols());
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      x.col(c) = (lo(c) + 0.5 * (z.col(c).array() + 1.0) * span(c)).matrix();
    return x;
  }

  ColumnScaler select(const std::vector<int>& cols) const {
    ColumnScaler s;
    s.lo.resize(cols.size());
    s.hi.resize(cols.size());
    for (size_t i = 0; i < cols.size(); ++i) {
      s.lo(i) = lo(cols[i]);
      s.hi(i) = hi(cols[i]);
    }
    return s;
  }
};

}  // namespace thermoloop
