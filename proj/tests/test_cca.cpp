#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "asr/cca.hpp"
#include "asr/errors.hpp"
#include "asr/ops.hpp"
#include "asr/rng.hpp"

using namespace asr;

namespace {

Eigen::MatrixXd gauss(int n, int d, Rng& rng) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  }
  return m;
}

Eigen::MatrixXd random_orthogonal(int d, Rng& rng) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss(d, d, rng));
  return qr.householderQ();
}

}  // namespace

TEST_CASE("cca: identical views correlate to one") {
  Rng rng(101);
  Eigen::MatrixXd X = gauss(1000, 32, rng);
  CcaProjection p = cca_fit(X, X, 1e-4);
  CHECK(p.correlations.minCoeff() >= 0.999);
  CHECK(p.correlations.maxCoeff() <= 1.0 + 1e-6);
}

TEST_CASE("cca: independent views stay at the sampling noise floor") {
  // The noise edge for d=32 sample canonical correlations is about
  // 2*sqrt(d/n): ~0.113 at n=1e4 and ~0.057 at n=4e4.
  Rng rng(102);
  Eigen::MatrixXd X = gauss(10000, 32, rng);
  Eigen::MatrixXd Y = gauss(10000, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-3);
  CHECK(p.correlations.maxCoeff() < 0.12);
  CHECK(p.correlations.minCoeff() >= 0.0);
}

TEST_CASE("cca: recovers constructed correlation 0.8 per component") {
  Rng rng(103);
  const double rho = 0.8;
  Eigen::MatrixXd X = gauss(10000, 32, rng);
  Eigen::MatrixXd E = gauss(10000, 32, rng);
  Eigen::MatrixXd Q = random_orthogonal(32, rng);
  Eigen::MatrixXd Y = rho * X * Q + std::sqrt(1.0 - rho * rho) * E;
  CcaProjection p = cca_fit(X, Y, 1e-3);
  for (Eigen::Index i = 0; i < p.correlations.size(); ++i) {
    CHECK(p.correlations[i] == doctest::Approx(rho).epsilon(0.0625));  // +-0.05
    CHECK(std::abs(p.correlations[i] - rho) < 0.05);
  }
}

TEST_CASE("cca: correlations are descending and clipped to [0,1]") {
  Rng rng(104);
  Eigen::MatrixXd X = gauss(500, 32, rng);
  Eigen::MatrixXd Y = 0.5 * X + 0.9 * gauss(500, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-3);
  for (Eigen::Index i = 1; i < p.correlations.size(); ++i) {
    CHECK(p.correlations[i] <= p.correlations[i - 1] + 1e-12);
  }
  CHECK(p.correlations.minCoeff() >= 0.0);
  CHECK(p.correlations.maxCoeff() <= 1.0 + 1e-6);
}

TEST_CASE("cca: swapping the views swaps the projections") {
  Rng rng(105);
  Eigen::MatrixXd X = gauss(400, 32, rng);
  Eigen::MatrixXd Y = 0.7 * X * random_orthogonal(32, rng) + 0.5 * gauss(400, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-3);
  CcaProjection q = cca_fit(Y, X, 1e-3);
  for (Eigen::Index i = 0; i < 32; ++i) {
    CHECK(std::abs(p.correlations[i] - q.correlations[i]) < 1e-9);
  }
  // canonical pairs are unique up to a joint sign per component
  for (Eigen::Index j = 0; j < 32; ++j) {
    const double ab = p.a.col(j).dot(q.b.col(j)) /
                      (p.a.col(j).norm() * q.b.col(j).norm());
    const double ba = p.b.col(j).dot(q.a.col(j)) /
                      (p.b.col(j).norm() * q.a.col(j).norm());
    CHECK(std::abs(std::abs(ab) - 1.0) < 1e-6);
    CHECK(std::abs(std::abs(ba) - 1.0) < 1e-6);
    CHECK(ab * ba > 0.0);  // signs flip jointly, preserving matched geometry
  }
}

TEST_CASE("cca: invariant to invertible affine rescaling of one view") {
  Rng rng(106);
  Eigen::MatrixXd X = gauss(2000, 32, rng);
  Eigen::MatrixXd Y = 0.6 * X + 0.8 * gauss(2000, 32, rng);
  CcaProjection base = cca_fit(X, Y, 1e-3);

  Eigen::MatrixXd X3 = 3.0 * X;
  X3.array() += 0.25;  // constant shift drops out in centering
  // the rescaled view's ridge scales with its variance; the other stays put
  CcaProjection scaled = cca_fit(X3, Y, 9e-3, 1e-3);
  for (Eigen::Index i = 0; i < 32; ++i) {
    CHECK(std::abs(base.correlations[i] - scaled.correlations[i]) < 1e-6);
  }

  CcaProjection fixed_r = cca_fit(X3, Y, 1e-3);  // small fixed ridge: looser
  for (Eigen::Index i = 0; i < 32; ++i) {
    CHECK(std::abs(base.correlations[i] - fixed_r.correlations[i]) < 1e-3);
  }
}

TEST_CASE("cca: projected views have unit variance per component") {
  Rng rng(107);
  const int n = 4000;
  Eigen::MatrixXd X = gauss(n, 32, rng);
  Eigen::MatrixXd Y = 0.5 * X + gauss(n, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-6);
  Eigen::MatrixXd Zx = cca_apply(p, X, View::Sheet);
  Eigen::MatrixXd Zy = cca_apply(p, Y, View::Audio);
  const double tol = 2.0 / std::sqrt(static_cast<double>(n));
  for (Eigen::Index j = 0; j < 32; ++j) {
    const double vx = Zx.col(j).squaredNorm() / static_cast<double>(n - 1);
    const double vy = Zy.col(j).squaredNorm() / static_cast<double>(n - 1);
    CHECK(std::abs(vx - 1.0) < tol);
    CHECK(std::abs(vy - 1.0) < tol);
  }
}

TEST_CASE("cca_apply: the view mean projects to zero") {
  Rng rng(108);
  Eigen::MatrixXd X = gauss(200, 32, rng);
  Eigen::MatrixXd Y = gauss(200, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-3);
  Eigen::VectorXd z = cca_apply(p, Eigen::VectorXd(p.mean_x), View::Sheet);
  CHECK(z.norm() < 1e-12);
}

TEST_CASE("cca_apply is not idempotent") {
  Rng rng(109);
  Eigen::MatrixXd X = gauss(200, 32, rng);
  Eigen::MatrixXd Y = 0.5 * X + gauss(200, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-3);
  Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(32, [&](Eigen::Index) {
    return rng.normal();
  });
  Eigen::VectorXd once = cca_apply(p, v, View::Sheet);
  Eigen::VectorXd twice = cca_apply(p, once, View::Sheet);
  CHECK((once - twice).norm() > 1e-6);
}

TEST_CASE("cca: per-component correlation of projected batch matches") {
  Rng rng(110);
  const int n = 2000;
  Eigen::MatrixXd X = gauss(n, 32, rng);
  Eigen::MatrixXd Y = 0.7 * X + 0.7 * gauss(n, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-8);  // tiny ridge so Pearson matches
  Eigen::MatrixXd Zx = cca_apply(p, X, View::Sheet);
  Eigen::MatrixXd Zy = cca_apply(p, Y, View::Audio);
  for (Eigen::Index j = 0; j < 32; ++j) {
    Eigen::VectorXd a = Zx.col(j).array() - Zx.col(j).mean();
    Eigen::VectorXd b = Zy.col(j).array() - Zy.col(j).mean();
    const double pearson = a.dot(b) / (a.norm() * b.norm());
    CHECK(std::abs(pearson - p.correlations[j]) < 1e-6);
  }
}

TEST_CASE("cca: rejects undersized and invalid input") {
  Rng rng(111);
  Eigen::MatrixXd X = gauss(32, 32, rng);
  CHECK_THROWS_AS(cca_fit(X, X, 1e-3), std::invalid_argument);  // n must exceed d
  Eigen::MatrixXd ok = gauss(64, 32, rng);
  CHECK_THROWS_AS(cca_fit(ok, ok, 0.0), std::invalid_argument);
  Eigen::MatrixXd bad = ok;
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(cca_fit(bad, ok, 1e-3), NumericError);
}

TEST_CASE("project_batch applies the fitted matrices with stopped gradients") {
  Rng rng(112);
  Eigen::MatrixXd X = gauss(100, 32, rng);
  Eigen::MatrixXd Y = 0.5 * X + gauss(100, 32, rng);
  CcaProjection p = cca_fit(X, Y, 1e-3);

  nd::Tensor e({4, 32});
  for (double& v : e.values()) v = rng.normal();
  e.set_requires_grad();

  nd::Graph g;
  nd::Tensor z = project_batch(&g, e, p, View::Audio);
  for (std::size_t i = 0; i < 4; ++i) {
    Eigen::VectorXd row(32);
    for (std::size_t j = 0; j < 32; ++j) row[j] = e.at(i, j);
    Eigen::VectorXd want = cca_apply(p, row, View::Audio);
    for (std::size_t j = 0; j < 32; ++j) {
      CHECK(z.at(i, j) == doctest::Approx(want[j]).epsilon(1e-12));
    }
  }
  nd::Tensor loss = nd::sum(&g, z);
  g.backward(loss);
  // d(sum BZ)/dE = 1 * B^T summed over components
  Eigen::VectorXd expected = p.b.rowwise().sum();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      CHECK(e.grad()[i * 32 + j] == doctest::Approx(expected[j]).epsilon(1e-10));
    }
  }
}
