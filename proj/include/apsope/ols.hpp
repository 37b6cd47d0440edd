#pragma once

#include <Eigen/Dense>

#include "apsope/error.hpp"

namespace apsope {

struct OlsResult {
  Eigen::VectorXd coef;
  Eigen::VectorXd residuals;
  /// HC0 sandwich covariance; empty when not requested.
  Eigen::MatrixXd cov_hc0;
  /// Smallest over largest singular value of the design.
  double singular_ratio = 0.0;
  bool rank_deficient = false;
};

enum class OnSingular { kThrow, kPseudoInverse };

/// Least squares through a Householder QR of the design.
///
/// The design is declared singular when its smallest singular value falls
/// below `rel_tol` times the largest (checked on R, which shares X's singular
/// values). With kPseudoInverse the minimum-norm solution is returned and
/// flagged instead of throwing.
inline OlsResult ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool want_hc0 = false,
                     double rel_tol = 1e-10, OnSingular on_singular = OnSingular::kThrow) {
  if (X.rows() != y.size()) throw Error(ErrorCode::kDimensionMismatch, "design and response lengths differ");
  if (X.rows() < X.cols()) {
    if (on_singular == OnSingular::kThrow) {
      throw Error(ErrorCode::kRankDeficient, "fewer observations than regressors");
    }
  }
  OlsResult res;
  const Eigen::Index p = X.cols();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(X);
  const Eigen::Index k = std::min(X.rows(), p);
  Eigen::MatrixXd R = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(R);
  const auto& sv = svd.singularValues();
  const double smax = sv.size() > 0 ? sv(0) : 0.0;
  const double smin = (X.rows() < p || sv.size() == 0) ? 0.0 : sv(sv.size() - 1);
  res.singular_ratio = smax > 0.0 ? smin / smax : 0.0;

  if (!(res.singular_ratio >= rel_tol)) {
    if (on_singular == OnSingular::kThrow) {
      throw Error(ErrorCode::kRankDeficient, "design matrix is numerically singular");
    }
    res.rank_deficient = true;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(X);
    cod.setThreshold(rel_tol);
    res.coef = cod.solve(y);
    res.residuals = y - X * res.coef;
    return res;
  }

  res.coef = qr.solve(y);
  res.residuals = y - X * res.coef;
  if (want_hc0) {
    const Eigen::MatrixXd Rtop = R.topLeftCorner(p, p);
    const Eigen::MatrixXd Rinv =
        Rtop.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
    const Eigen::MatrixXd B = X * Rinv;
    const Eigen::MatrixXd meat = B.transpose() * res.residuals.array().square().matrix().asDiagonal() * B;
    res.cov_hc0 = Rinv * meat * Rinv.transpose();
  }
  return res;
}

}  // namespace apsope
