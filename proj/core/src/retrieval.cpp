#include "asr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

#include "asr/errors.hpp"

namespace asr {

double cosine_distance(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_distance: dimension mismatch");
  }
  const double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0) {
    throw NumericError("cosine_distance: zero-norm vector");
  }
  return 1.0 - u.dot(v) / (nu * nv);
}

EmbedIndex EmbedIndex::build(Eigen::MatrixXd embeddings,
                             std::vector<std::string> ids) {
  if (static_cast<std::size_t>(embeddings.rows()) != ids.size()) {
    throw std::invalid_argument("EmbedIndex: rows/ids mismatch");
  }
  std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) {
    throw std::invalid_argument("EmbedIndex: duplicate candidate ids");
  }
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    const double n = embeddings.row(i).norm();
    if (n == 0.0 || !std::isfinite(n)) {
      throw NumericError("EmbedIndex: zero-norm candidate row " +
                         std::to_string(i));
    }
    embeddings.row(i) /= n;
  }
  EmbedIndex idx;
  idx.embeddings_ = std::move(embeddings);
  idx.ids_ = std::move(ids);
  return idx;
}

namespace {

Eigen::VectorXd distances_from(const Eigen::MatrixXd& normalized_rows,
                               const Eigen::VectorXd& q) {
  const double nq = q.norm();
  if (nq == 0.0 || !std::isfinite(nq)) {
    throw NumericError("query: zero-norm query");
  }
  return (1.0 - (normalized_rows * (q / nq)).array()).matrix();
}

}  // namespace

std::vector<std::string> EmbedIndex::query(const Eigen::VectorXd& q,
                                           std::size_t k) const {
  Eigen::VectorXd dist = distances_from(embeddings_, q);
  std::vector<std::size_t> order(ids_.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dist[static_cast<Eigen::Index>(a)] != dist[static_cast<Eigen::Index>(b)]) {
      return dist[static_cast<Eigen::Index>(a)] < dist[static_cast<Eigen::Index>(b)];
    }
    return ids_[a] < ids_[b];
  });
  std::vector<std::string> out;
  out.reserve(std::min(k, order.size()));
  for (std::size_t i = 0; i < order.size() && i < k; ++i) {
    out.push_back(ids_[order[i]]);
  }
  return out;
}

std::size_t EmbedIndex::rank_of(const Eigen::VectorXd& q,
                                const std::string& true_id) const {
  auto it = std::find(ids_.begin(), ids_.end(), true_id);
  if (it == ids_.end()) {
    throw std::invalid_argument("rank_of: unknown id '" + true_id + "'");
  }
  const std::size_t target = static_cast<std::size_t>(it - ids_.begin());
  Eigen::VectorXd dist = distances_from(embeddings_, q);
  const double dt = dist[static_cast<Eigen::Index>(target)];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (i == target) continue;
    const double d = dist[static_cast<Eigen::Index>(i)];
    if (d < dt || (d == dt && ids_[i] < true_id)) ++rank;
  }
  return rank;
}

RetrievalRun evaluate(std::vector<std::size_t> ranks, std::size_t n_candidates) {
  if (ranks.empty()) throw std::invalid_argument("evaluate: no ranks");
  for (std::size_t r : ranks) {
    if (r < 1 || r > n_candidates) {
      throw std::invalid_argument("evaluate: rank " + std::to_string(r) +
                                  " outside [1," + std::to_string(n_candidates) +
                                  "]");
    }
  }
  RetrievalRun run;
  run.n_candidates = n_candidates;
  const double n = static_cast<double>(ranks.size());
  double hits1 = 0, hits5 = 0, hits25 = 0, rr = 0;
  for (std::size_t r : ranks) {
    hits1 += r <= 1;
    hits5 += r <= 5;
    hits25 += r <= 25;
    rr += 1.0 / static_cast<double>(r);
  }
  run.r1 = 100.0 * hits1 / n;
  run.r5 = 100.0 * hits5 / n;
  run.r25 = 100.0 * hits25 / n;
  run.mrr = rr / n;
  std::vector<std::size_t> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  run.mr = sorted[(sorted.size() - 1) / 2];  // lower middle when even
  run.ranks = std::move(ranks);
  return run;
}

std::string metrics_csv_header() {
  return "model,context,attention,rho,n_candidates,r1,r5,r25,mrr,mr";
}

std::string metrics_csv_row(const std::string& model, const std::string& context,
                            bool attention, double rho, const RetrievalRun& run) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%g,%zu,%.2f,%.2f,%.2f,%.4f,%zu",
                model.c_str(), context.c_str(), attention ? "on" : "off", rho,
                run.n_candidates, run.r1, run.r5, run.r25, run.mrr, run.mr);
  return buf;
}

}  // namespace asr
