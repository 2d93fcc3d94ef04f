#pragma once

// Group-wise accuracy and feature/probability based sample-quality proxies.

#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diffult/dataset.hpp"
#include "diffult/tensor.hpp"

namespace diffult {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalReport {
  double overall = 0;
  double many = 0;
  double med = 0;
  double few = 0;
  std::vector<double> per_class;
  std::size_t n_test = 0;
  double proxy_fid = std::numeric_limits<double>::quiet_NaN();
  double proxy_is = std::numeric_limits<double>::quiet_NaN();
  // Pooled accuracy over test samples of medium and few classes.
  double mf = 0;
};

// Accuracy overall, per group and per class. Empty groups and classes give
// NaN. Groups are decided by the training class counts.
inline EvalReport grouped_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                                   const ClassGroups& groups, int num_classes) {
  if (predictions.size() != labels.size()) throw MetricError("accuracy: prediction/label count mismatch");
  if (labels.empty()) throw MetricError("accuracy: empty test set");
  const auto m = static_cast<std::size_t>(num_classes);
  std::vector<std::size_t> hit(m, 0), tot(m, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= m) throw MetricError("accuracy: label out of range");
    ++tot[y];
    hit[y] += predictions[i] == labels[i];
  }
  EvalReport r;
  r.n_test = labels.size();
  std::size_t h = 0;
  for (auto v : hit) h += v;
  r.overall = static_cast<double>(h) / static_cast<double>(labels.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.per_class.resize(m);
  std::size_t gh[3] = {0, 0, 0}, gt[3] = {0, 0, 0};
  for (std::size_t c = 0; c < m; ++c) {
    r.per_class[c] = tot[c] ? static_cast<double>(hit[c]) / static_cast<double>(tot[c]) : nan;
    const auto g = static_cast<std::size_t>(groups.of(static_cast<int>(c)));
    gh[g] += hit[c];
    gt[g] += tot[c];
  }
  auto ratio = [&](std::size_t g) { return gt[g] ? static_cast<double>(gh[g]) / static_cast<double>(gt[g]) : nan; };
  r.many = ratio(static_cast<std::size_t>(ClassGroups::Group::many));
  r.med = ratio(static_cast<std::size_t>(ClassGroups::Group::med));
  r.few = ratio(static_cast<std::size_t>(ClassGroups::Group::few));
  const auto med = static_cast<std::size_t>(ClassGroups::Group::med), few = static_cast<std::size_t>(ClassGroups::Group::few);
  r.mf = gt[med] + gt[few] ? static_cast<double>(gh[med] + gh[few]) / static_cast<double>(gt[med] + gt[few]) : nan;
  return r;
}

namespace detail {

inline Eigen::MatrixXd rows_to_matrix(const Tensor<float>& f) {
  if (f.rank() != 2) throw MetricError("features must be a [N, d] matrix");
  Eigen::MatrixXd m(f.dim(0), f.dim(1));
  for (std::size_t i = 0; i < f.dim(0); ++i)
    for (std::size_t k = 0; k < f.dim(1); ++k) m(i, k) = f[i * f.dim(1) + k];
  return m;
}

inline void mean_cov(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

}  // namespace detail

// Frechet distance between Gaussians fitted to two feature sets:
// |mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2)), each covariance
// regularized with 1e-6 I. The trace of the square root is computed from the
// symmetric matrix S_r^(1/2) S_g S_r^(1/2).
inline double proxy_fid(const Tensor<float>& real_features, const Tensor<float>& gen_features) {
  const auto xr = detail::rows_to_matrix(real_features);
  const auto xg = detail::rows_to_matrix(gen_features);
  if (xr.cols() != xg.cols()) throw MetricError("proxy FID: feature dimensions differ");
  if (xr.rows() < 2 || xg.rows() < 2) throw MetricError("proxy FID: need at least two samples per set");
  Eigen::VectorXd mr, mg;
  Eigen::MatrixXd sr, sg;
  detail::mean_cov(xr, mr, sr);
  detail::mean_cov(xg, mg, sg);
  const auto d = xr.cols();
  sr += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  sg += 1e-6 * Eigen::MatrixXd::Identity(d, d);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> er(sr);
  const Eigen::VectorXd lr = er.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd root = er.eigenvectors() * lr.asDiagonal() * er.eigenvectors().transpose();
  Eigen::MatrixXd inner = root * sg * root;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double v = (mr - mg).squaredNorm() + sr.trace() + sg.trace() - 2.0 * tr_sqrt;
  return std::max(v, 0.0);
}

// exp(mean_i KL(p_i || p_bar)) over rows of class probabilities [N, M].
inline double proxy_is(const Tensor<double>& probs) {
  if (probs.rank() != 2 || probs.dim(0) == 0) throw MetricError("proxy IS: need a non-empty [N, M] matrix");
  const std::size_t n = probs.dim(0), m = probs.dim(1);
  std::vector<double> mean(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < m; ++k) {
      const double p = probs[i * m + k];
      if (!(p >= 0.0)) throw MetricError("proxy IS: probabilities must be non-negative");
      s += p;
      mean[k] += p;
    }
    if (std::abs(s - 1.0) > 1e-5) throw MetricError("proxy IS: row " + std::to_string(i) + " does not sum to 1");
  }
  for (auto& v : mean) v /= static_cast<double>(n);
  double kl = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const double p = probs[i * m + k];
      if (p > 0) kl += p * (std::log(p) - std::log(mean[k]));
    }
  return std::exp(kl / static_cast<double>(n));
}

// Formats a value with 6 significant digits; NaN prints as "nan".
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// Column order: overall, many, med, few, acc_mf, proxy_fid, proxy_is,
// n_test, class_0 .. class_{M-1}.
inline std::string eval_csv_header(int num_classes) {
  std::string h = "overall,many,med,few,acc_mf,proxy_fid,proxy_is,n_test";
  for (int c = 0; c < num_classes; ++c) h += ",class_" + std::to_string(c);
  return h;
}

inline std::string eval_csv_row(const EvalReport& r) {
  std::string s = csv_number(r.overall) + ',' + csv_number(r.many) + ',' + csv_number(r.med) + ',' +
                  csv_number(r.few) + ',' + csv_number(r.mf) + ',' + csv_number(r.proxy_fid) + ',' +
                  csv_number(r.proxy_is) + ',' + std::to_string(r.n_test);
  for (double v : r.per_class) s += ',' + csv_number(v);
  return s;
}

}  // namespace diffult
