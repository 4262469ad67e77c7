#pragma once

#include <Eigen/Core>

#include "asr/tensor.hpp"

namespace asr {

class Model;
class PairDataset;

enum class View { Sheet, Audio };

/// Canonically correlated projection of the two embedding views.
/// Columns of a/b are the canonical directions for the sheet/audio view;
/// correlations are the matched canonical correlations in descending order.
struct CcaProjection {
  Eigen::MatrixXd a;       // sheet view, d x d
  Eigen::MatrixXd b;       // audio view, d x d
  Eigen::VectorXd mean_x;  // sheet view mean
  Eigen::VectorXd mean_y;  // audio view mean
  Eigen::VectorXd correlations;
  double ridge = 1e-3;

  bool defined() const { return a.size() > 0; }
  Eigen::Index dim() const { return a.rows(); }
};

/// Classical regularized CCA. X and Y are n x d sample matrices of paired
/// observations (row i of X matches row i of Y); requires n >= d + 1.
/// Covariances get +ridge*I, whitening goes through symmetric
/// eigendecompositions, and the canonical directions come from the SVD of the
/// whitened cross-covariance. Correlations are clipped to [0, 1].
/// The per-view overload exists so a rescaling of one view can be compensated
/// by rescaling that view's ridge alone.
CcaProjection cca_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                      double ridge = 1e-3);
CcaProjection cca_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                      double ridge_x, double ridge_y);

Eigen::VectorXd cca_apply(const CcaProjection& proj, const Eigen::VectorXd& v,
                          View view);
/// Row-wise application to an n x d matrix.
Eigen::MatrixXd cca_apply(const CcaProjection& proj, const Eigen::MatrixXd& M,
                          View view);

/// Projects a batch of embeddings [n, d] through the fitted view matrix as a
/// graph op. The projection matrices are treated as constants: gradients flow
/// through the embeddings only, never through the fit.
nd::Tensor project_batch(nd::Graph* g, const nd::Tensor& embeddings,
                         const CcaProjection& proj, View view);

/// Re-fits the projection on the whole training split, embedding every pair
/// in eval mode without augmentation. Replaces any batch-fitted projection.
CcaProjection cca_refine(Model& model, const PairDataset& data, double ridge);

}  // namespace asr
