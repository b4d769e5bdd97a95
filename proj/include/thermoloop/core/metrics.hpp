#pragma once

// Mean absolute percentage error with a per-channel denominator floor.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "thermoloop/core/errors.hpp"

namespace thermoloop {

/// Relative size of the denominator floor: 1e-3 of a channel's half range,
/// i.e. 1e-3 in [-1, 1] normalized units.
constexpr double kMapeFloor = 1e-3;

struct MapeResult {
  double percent = 0.0;
  long entries = 0;
  int channels_used = 0;
};

/// 100 * mean |pred - ref| / max(|ref|, floor_c) over every entry of the
/// channels (columns) that are not identically zero in the reference.
/// floor_c = 1e-3 * half range of ref column c (or 1e-3 * max|ref| for a
/// constant column), so the result is invariant under a common positive
/// rescaling of pred and ref.
inline MapeResult mape_detail(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref) {
  require(pred.rows() == ref.rows() && pred.cols() == ref.cols(), "mape: shape mismatch");
  require(ref.rows() >= 1 && ref.cols() >= 1, "mape: empty series");
  MapeResult r;
  double acc = 0.0;
  for (Eigen::Index c = 0; c < ref.cols(); ++c) {
    const double amax = ref.col(c).cwiseAbs().maxCoeff();
    if (amax == 0.0) continue;
    double floor = kMapeFloor * 0.5 * (ref.col(c).maxCoeff() - ref.col(c).minCoeff());
    if (!(floor > 0.0)) floor = kMapeFloor * amax;
    for (Eigen::Index i = 0; i < ref.rows(); ++i)
      acc += std::abs(pred(i, c) - ref(i, c)) / std::max(std::abs(ref(i, c)), floor);
    r.entries += ref.rows();
    ++r.channels_used;
  }
  r.percent = r.entries ? 100.0 * acc / static_cast<double>(r.entries) : 0.0;
  return r;
}

inline double mape(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref) { return mape_detail(pred, ref).percent; }

/// Same average with caller-supplied per-channel floors (physical units),
/// for channels whose normalized units are not their own min-max range.
inline MapeResult mape_detail(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref, const Eigen::VectorXd& floors) {
  require(pred.rows() == ref.rows() && pred.cols() == ref.cols(), "mape: shape mismatch");
  require(ref.rows() >= 1 && ref.cols() >= 1, "mape: empty series");
  require(floors.size() == ref.cols() && (floors.array() > 0.0).all(), "mape: one positive floor per channel");
  MapeResult r;
  double acc = 0.0;
  for (Eigen::Index c = 0; c < ref.cols(); ++c) {
    if (ref.col(c).cwiseAbs().maxCoeff() == 0.0) continue;
    for (Eigen::Index i = 0; i < ref.rows(); ++i)
      acc += std::abs(pred(i, c) - ref(i, c)) / std::max(std::abs(ref(i, c)), floors(c));
    r.entries += ref.rows();
    ++r.channels_used;
  }
  r.percent = r.entries ? 100.0 * acc / static_cast<double>(r.entries) : 0.0;
  return r;
}

}  // namespace thermoloop
