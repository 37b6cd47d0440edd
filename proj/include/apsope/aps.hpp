#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <Eigen/Dense>

#include "apsope/core_types.hpp"
#include "apsope/csv_io.hpp"
#include "apsope/parallel.hpp"
#include "apsope/policy.hpp"
#include "apsope/rng.hpp"

namespace apsope {

/// One uniform draw from the open ball B(center, delta): an isotropic
/// Gaussian direction scaled to radius delta * U^(1/p).
inline std::vector<double> sample_uniform_ball(std::span<const double> center, double delta, Engine& engine) {
  if (!(delta > 0.0)) throw Error(ErrorCode::kNonPositiveBandwidth, "ball radius must be positive");
  const std::size_t p = center.size();
  std::vector<double> point(center.begin(), center.end());
  if (p == 0) return point;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> g(p);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& x : g) {
      x = normal(engine);
      norm2 += x * x;
    }
  } while (norm2 == 0.0);
  const double radius = delta * std::pow(unif(engine), 1.0 / static_cast<double>(p));
  const double scale = radius / std::sqrt(norm2);
  for (std::size_t j = 0; j < p; ++j) point[j] += scale * g[j];
  return point;
}

/// Uniform sampler on p-dimensional balls of a fixed radius.
class BallSampler {
 public:
  BallSampler(std::size_t dimension, double delta) : dimension_(dimension), delta_(delta) {
    if (!(delta > 0.0)) throw Error(ErrorCode::kNonPositiveBandwidth, "ball radius must be positive");
  }
  std::size_t dimension() const { return dimension_; }
  double delta() const { return delta_; }

  std::vector<double> draw(std::span<const double> center, Engine& engine) const {
    if (center.size() != dimension_) throw Error(ErrorCode::kDimensionMismatch, "center has wrong dimension");
    return sample_uniform_ball(center, delta_, engine);
  }

 private:
  std::size_t dimension_;
  double delta_;
};

/// Simulated approximate propensity scores.
///
/// q_hat(i, a) = p_a / (p_a + p_1) for a = 2..m; NaN marks the undefined case
/// p_a + p_1 = 0.
struct ApsTable {
  RowMatrix p_hat;
  RowMatrix q_hat;
  int m = 0;
  double delta = 0.0;
  std::size_t draws = 0;
  std::uint64_t seed = 0;

  std::size_t rows() const { return static_cast<std::size_t>(p_hat.rows()); }

  double p(std::size_t i, Action a) const {
    return p_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a - 1));
  }

  double q(std::size_t i, Action a) const {
    return q_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a - 2));
  }

  /// Pairwise share p_a / (p_a + p_b); NaN when both are zero.
  double share(std::size_t i, Action a, Action b) const {
    if (b == 1 && a >= 2) return q(i, a);
    const double pa = p(i, a);
    const double den = pa + p(i, b);
    return den > 0.0 ? pa / den : std::numeric_limits<double>::quiet_NaN();
  }
};

enum class ApsMethod {
  /// Samples the ball's projection onto the span of the policy's feature map
  /// (exact in distribution, cost independent of the context dimension).
  kProjected,
  /// Draws full points with sample_uniform_ball.
  kFullBall,
};

struct ApsOptions {
  unsigned threads = 1;
  ApsMethod method = ApsMethod::kProjected;
};

/// Brute-force APS: for every record, averages ML(. | X_i + ball draw) over S
/// draws. The ball lives in normalized coordinates (sample z-scores) and only
/// the continuous block moves; discrete columns stay fixed. Each record uses
/// its own substream, so results do not depend on `threads`.
inline ApsTable compute_aps(const LogDataset& data, const Policy& policy, double delta, std::size_t draws,
                            const RngPlan& plan, const ApsOptions& options = {}) {
  data.validate();
  if (!(delta > 0.0)) throw Error(ErrorCode::kNonPositiveBandwidth, "delta must be positive");
  if (draws < 1) throw Error(ErrorCode::kInvalidArgument, "need at least one simulation draw");
  const ContextMatrix& ctx = data.contexts;
  if (policy.dim() != ctx.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "policy dimension " + std::to_string(policy.dim()) +
                                                   " does not match context dimension " + std::to_string(ctx.dim()));
  }
  const int m = policy.action_count();
  if (m != data.m) throw Error(ErrorCode::kDimensionMismatch, "policy and dataset disagree on the action count");

  const std::size_t n = data.size();
  const std::size_t pc = ctx.continuous_cols();
  const ContextScaling scaling = context_scaling(ctx);
  const RowMatrix& W = policy.feature_map();
  const Eigen::Index k = W.rows();

  // Wc maps a normalized continuous offset to the change in features.
  Eigen::MatrixXd Wc = W.leftCols(static_cast<Eigen::Index>(pc));
  for (std::size_t j = 0; j < pc; ++j) Wc.col(static_cast<Eigen::Index>(j)) *= scaling.stds[j];

  // Orthonormal basis of the row space of Wc; M expresses Wc on that basis.
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(pc), 0);
  if (k > 0 && pc > 0) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Wc, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    Eigen::Index rank = 0;
    for (Eigen::Index r = 0; r < sv.size(); ++r) {
      if (sv(r) > 1e-12 * sv(0)) ++rank;
    }
    basis = svd.matrixV().leftCols(rank);
  }
  const Eigen::MatrixXd M = Wc * basis;
  const auto rank = static_cast<std::size_t>(basis.cols());
  const std::size_t perp_dof = pc - rank;

  ApsTable table;
  table.m = m;
  table.delta = delta;
  table.draws = draws;
  table.seed = plan.master_seed();
  table.p_hat.setZero(static_cast<Eigen::Index>(n), m);
  table.q_hat.setZero(static_cast<Eigen::Index>(n), std::max(0, m - 1));

  const auto tag = purpose_tag("aps");
  parallel_for(n, options.threads, [&](std::size_t i) {
    Engine engine = plan.stream_for(i, tag);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::chi_squared_distribution<double> chi2(perp_dof > 0 ? static_cast<double>(perp_dof) : 1.0);

    std::vector<double> raw(ctx.dim());
    ctx.raw_row(i, raw);
    const Eigen::VectorXd z0 = W * Eigen::Map<const Eigen::VectorXd>(raw.data(), static_cast<Eigen::Index>(raw.size()));
    Eigen::VectorXd z(k);
    Eigen::VectorXd coords(static_cast<Eigen::Index>(rank));
    std::vector<double> center(pc, 0.0);
    std::vector<double> probs(static_cast<std::size_t>(m));
    std::vector<double> first(static_cast<std::size_t>(m));
    std::vector<double> sum(static_cast<std::size_t>(m), 0.0);
    bool constant = true;

    for (std::size_t s = 0; s < draws; ++s) {
      if (options.method == ApsMethod::kProjected) {
        double norm2 = 0.0;
        do {
          norm2 = 0.0;
          for (Eigen::Index r = 0; r < coords.size(); ++r) {
            coords(r) = normal(engine);
            norm2 += coords(r) * coords(r);
          }
          if (perp_dof > 0) norm2 += chi2(engine);
        } while (norm2 == 0.0 && pc > 0);
        const double radius = pc > 0 ? delta * std::pow(unif(engine), 1.0 / static_cast<double>(pc)) : 0.0;
        if (rank > 0) {
          z.noalias() = z0 + M * (coords * (radius / std::sqrt(norm2)));
        } else {
          z = z0;
        }
      } else {
        const std::vector<double> offset = pc > 0 ? sample_uniform_ball(center, delta, engine) : center;
        z.noalias() = z0 + Wc * Eigen::Map<const Eigen::VectorXd>(offset.data(), static_cast<Eigen::Index>(pc));
      }
      policy.evaluate_features(z.data(), probs.data());
      if (s == 0) {
        first = probs;
      } else if (constant && probs != first) {
        constant = false;
      }
      for (int a = 0; a < m; ++a) sum[static_cast<std::size_t>(a)] += probs[static_cast<std::size_t>(a)];
    }

    const auto ii = static_cast<Eigen::Index>(i);
    for (int a = 0; a < m; ++a) {
      // The mean of identical values is that value; avoids rounding from S additions.
      table.p_hat(ii, a) = constant ? first[static_cast<std::size_t>(a)]
                                    : sum[static_cast<std::size_t>(a)] / static_cast<double>(draws);
    }
    const double p1 = table.p_hat(ii, 0);
    for (int a = 1; a < m; ++a) {
      const double pa = table.p_hat(ii, a);
      table.q_hat(ii, a - 1) = (pa + p1) > 0.0 ? pa / (pa + p1) : std::numeric_limits<double>::quiet_NaN();
    }
  });
  return table;
}

/// Limiting APS of a halfspace at signed normalized offset v from its
/// boundary in p dimensions: the fraction of the unit ball lying on the
/// positive side of the hyperplane x_1 = -v.
inline double k_profile(double v, int p) {
  if (!(std::abs(v) < 1.0)) throw Error(ErrorCode::kOffsetOutOfRange, "offset must lie in (-1, 1)");
  if (p < 1) throw Error(ErrorCode::kInvalidArgument, "dimension must be at least 1");
  const double half_cap = 0.5 * boost::math::ibeta((p + 1) / 2.0, 0.5, 1.0 - v * v);
  return v >= 0.0 ? 1.0 - half_cap : half_cap;
}

/// Fraction of records with a strictly interior share for each pair (a, 1).
inline std::vector<double> interior_share_fraction(const ApsTable& aps) {
  std::vector<double> out;
  for (Action a = 2; a <= aps.m; ++a) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < aps.rows(); ++i) {
      const double q = aps.q(i, a);
      if (q > 0.0 && q < 1.0) ++hits;
    }
    out.push_back(aps.rows() ? static_cast<double>(hits) / static_cast<double>(aps.rows()) : 0.0);
  }
  return out;
}

/// Audit export: record_id, p_hat_<label> for every action, q_hat_<label> for
/// actions 2..m. Undefined shares are written as NA.
inline void write_aps_csv(const ApsTable& aps, const std::vector<std::string>& labels, std::ostream& out) {
  auto label = [&](int a) {
    return labels.size() == static_cast<std::size_t>(aps.m) ? labels[static_cast<std::size_t>(a - 1)]
                                                             : std::to_string(a);
  };
  out << "record_id";
  for (int a = 1; a <= aps.m; ++a) out << ",p_hat_" << csv_detail::quote_if_needed(label(a));
  for (int a = 2; a <= aps.m; ++a) out << ",q_hat_" << csv_detail::quote_if_needed(label(a));
  out << '\n';
  for (std::size_t i = 0; i < aps.rows(); ++i) {
    out << i;
    for (int a = 1; a <= aps.m; ++a) out << ',' << csv_detail::format_double(aps.p(i, a));
    for (int a = 2; a <= aps.m; ++a) {
      const double q = aps.q(i, a);
      out << ',' << (std::isnan(q) ? std::string("NA") : csv_detail::format_double(q));
    }
    out << '\n';
  }
}

}  // namespace apsope
