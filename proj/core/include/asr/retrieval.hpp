#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace asr {

/// 1 - cos(u, v), in [0, 2]. Throws NumericError on a zero-norm input.
double cosine_distance(const Eigen::VectorXd& u, const Eigen::VectorXd& v);

/// Exact cosine nearest-neighbor index over candidate embeddings.
/// Immutable after build; queries are independent and thread-safe.
class EmbedIndex {
 public:
  /// embeddings: one candidate per row. ids must be unique, rows non-zero.
  static EmbedIndex build(Eigen::MatrixXd embeddings,
                          std::vector<std::string> ids);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  /// Candidate ids by ascending cosine distance; ties break toward the
  /// smaller id. k past the pool size returns everything.
  std::vector<std::string> query(const Eigen::VectorXd& q, std::size_t k) const;

  /// 1-based rank of true_id under the same ordering, without a full sort.
  std::size_t rank_of(const Eigen::VectorXd& q, const std::string& true_id) const;

 private:
  Eigen::MatrixXd embeddings_;  // n x d, rows L2-normalized
  std::vector<std::string> ids_;
};

struct RetrievalRun {
  std::vector<std::size_t> ranks;  // 1-based rank of the true match per query
  std::size_t n_candidates = 0;
  double r1 = 0.0;   // recall percentages in [0, 100]
  double r5 = 0.0;
  double r25 = 0.0;
  double mrr = 0.0;  // mean reciprocal rank in [0, 1]
  std::size_t mr = 0;  // median rank; lower middle for even query counts
};

RetrievalRun evaluate(std::vector<std::size_t> ranks, std::size_t n_candidates);

/// Report row for the evaluation CSV:
/// model,context,attention,rho,n_candidates,r1,r5,r25,mrr,mr
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& model, const std::string& context,
                            bool attention, double rho, const RetrievalRun& run);

}  // namespace asr
