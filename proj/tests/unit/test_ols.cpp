#include <gtest/gtest.h>

#include <random>

#include "apsope/ols.hpp"
#include "apsope/rng.hpp"

using namespace apsope;

TEST(Ols, ExactInterpolation) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 1, 1, 1, 2, 1, 3;
  Eigen::VectorXd y(4);
  y << 1, 3, 5, 7;
  const OlsResult r = ols(X, y, true);
  EXPECT_NEAR(r.coef(0), 1.0, 1e-12);
  EXPECT_NEAR(r.coef(1), 2.0, 1e-12);
  EXPECT_LT(r.residuals.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_FALSE(r.rank_deficient);
}

TEST(Ols, Hc0MatchesSandwichFormula) {
  Engine e(1);
  std::normal_distribution<double> nd(0, 1);
  const int n = 200;
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = nd(e);
    X(i, 2) = nd(e) * 2;
    y(i) = 1 + X(i, 1) - X(i, 2) + nd(e) * (1 + std::abs(X(i, 1)));
  }
  const OlsResult r = ols(X, y, true);
  // Independent computation through the normal equations.
  const Eigen::MatrixXd XtX_inv = (X.transpose() * X).inverse();
  const Eigen::VectorXd b = XtX_inv * X.transpose() * y;
  const Eigen::VectorXd e2 = (y - X * b).array().square();
  const Eigen::MatrixXd meat = X.transpose() * e2.asDiagonal() * X;
  const Eigen::MatrixXd V = XtX_inv * meat * XtX_inv;
  EXPECT_LT((r.coef - b).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((r.cov_hc0 - V).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ols, SingularDesign) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 2, 1, 2, 1, 2, 1, 2;
  Eigen::VectorXd y(4);
  y << 1, 2, 3, 4;
  try {
    ols(X, y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRankDeficient);
  }
  const OlsResult r = ols(X, y, false, 1e-10, OnSingular::kPseudoInverse);
  EXPECT_TRUE(r.rank_deficient);
  // Minimum-norm solution reproduces the fitted mean.
  EXPECT_NEAR((X * r.coef)(0), 2.5, 1e-10);
  EXPECT_LT(r.singular_ratio, 1e-10);
}
