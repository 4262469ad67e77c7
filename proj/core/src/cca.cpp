#include "asr/cca.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "asr/errors.hpp"

namespace asr {

namespace {

Eigen::MatrixXd inverse_sqrt_sym(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) {
    throw NumericError("cca_fit: eigendecomposition failed");
  }
  Eigen::VectorXd inv = es.eigenvalues();
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    if (inv[i] <= 0.0) {
      throw NumericError("cca_fit: covariance not positive definite");
    }
    inv[i] = 1.0 / std::sqrt(inv[i]);
  }
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

CcaProjection cca_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                      double ridge) {
  return cca_fit(X, Y, ridge, ridge);
}

CcaProjection cca_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                      double ridge_x, double ridge_y) {
  const Eigen::Index n = X.rows(), d = X.cols();
  if (Y.rows() != n || Y.cols() != d) {
    throw std::invalid_argument("cca_fit: view shapes differ");
  }
  if (n < d + 1) {
    throw std::invalid_argument("cca_fit: need more samples than dimensions (" +
                                std::to_string(n) + " <= " + std::to_string(d) +
                                ")");
  }
  if (ridge_x <= 0.0 || ridge_y <= 0.0) {
    throw std::invalid_argument("cca_fit: ridge must be positive");
  }
  if (!X.allFinite() || !Y.allFinite()) {
    throw NumericError("cca_fit: non-finite input");
  }

  CcaProjection proj;
  proj.ridge = ridge_x;
  proj.mean_x = X.colwise().mean();
  proj.mean_y = Y.colwise().mean();
  Eigen::MatrixXd Xc = X.rowwise() - proj.mean_x.transpose();
  Eigen::MatrixXd Yc = Y.rowwise() - proj.mean_y.transpose();

  const double inv_n1 = 1.0 / static_cast<double>(n - 1);
  Eigen::MatrixXd Sxx = Xc.transpose() * Xc * inv_n1;
  Eigen::MatrixXd Syy = Yc.transpose() * Yc * inv_n1;
  Eigen::MatrixXd Sxy = Xc.transpose() * Yc * inv_n1;
  Sxx.diagonal().array() += ridge_x;
  Syy.diagonal().array() += ridge_y;
  if (!Sxx.allFinite() || !Syy.allFinite() || !Sxy.allFinite()) {
    throw NumericError("cca_fit: non-finite covariance");
  }

  Eigen::MatrixXd sx = inverse_sqrt_sym(Sxx);
  Eigen::MatrixXd sy = inverse_sqrt_sym(Syy);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sx * Sxy * sy,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  proj.a = sx * svd.matrixU();
  proj.b = sy * svd.matrixV();
  proj.correlations = svd.singularValues().cwiseMin(1.0).cwiseMax(0.0);
  return proj;
}

Eigen::VectorXd cca_apply(const CcaProjection& proj, const Eigen::VectorXd& v,
                          View view) {
  if (!proj.defined()) throw std::invalid_argument("cca_apply: empty projection");
  if (v.size() != proj.dim()) {
    throw std::invalid_argument("cca_apply: dimension mismatch");
  }
  if (view == View::Sheet) return proj.a.transpose() * (v - proj.mean_x);
  return proj.b.transpose() * (v - proj.mean_y);
}

Eigen::MatrixXd cca_apply(const CcaProjection& proj, const Eigen::MatrixXd& M,
                          View view) {
  if (!proj.defined()) throw std::invalid_argument("cca_apply: empty projection");
  if (M.cols() != proj.dim()) {
    throw std::invalid_argument("cca_apply: dimension mismatch");
  }
  if (view == View::Sheet) {
    return (M.rowwise() - proj.mean_x.transpose()) * proj.a;
  }
  return (M.rowwise() - proj.mean_y.transpose()) * proj.b;
}

nd::Tensor project_batch(nd::Graph* g, const nd::Tensor& embeddings,
                         const CcaProjection& proj, View view) {
  if (embeddings.rank() != 2) {
    throw std::invalid_argument("project_batch: expected [n,d] embeddings");
  }
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (static_cast<Eigen::Index>(d) != proj.dim()) {
    throw std::invalid_argument("project_batch: dimension mismatch");
  }
  const Eigen::MatrixXd& w = view == View::Sheet ? proj.a : proj.b;
  const Eigen::VectorXd& mean = view == View::Sheet ? proj.mean_x : proj.mean_y;

  using RowMat =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  nd::Tensor out({n, d});
  Eigen::Map<const RowMat> xm(embeddings.data(), n, d);
  Eigen::Map<RowMat> om(out.data(), n, d);
  om.noalias() = (xm.rowwise() - mean.transpose()) * w;
  nd::ensure_finite(out, "project_batch");

  if (g && embeddings.requires_grad()) {
    out.set_requires_grad();
    nd::Tensor xc = embeddings, oc = out;
    Eigen::MatrixXd wt = w.transpose();
    g->record("project_batch", [xc, oc, wt, n, d]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      Eigen::Map<const RowMat> gm(gy, n, d);
      Eigen::Map<RowMat> dx(xc.grad(), n, d);
      dx.noalias() += gm * wt;
    });
  }
  return out;
}

}  // namespace asr
