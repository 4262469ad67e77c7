#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asr/cca.hpp"
#include "asr/model.hpp"
#include "asr/rng.hpp"
#include "asr/toygen.hpp"

namespace asr {

/// Which side anchors the hinge. Sheet anchors score each sheet embedding
/// against in-batch audio negatives, matching the audio-query/sheet-candidate
/// retrieval direction.
enum class HingeAnchor { Sheet, Audio, Both };
std::string to_string(HingeAnchor a);
HingeAnchor parse_hinge_anchor(const std::string& s);

struct AugmentConfig {
  bool enabled = true;
  double tempo_lo = 0.95;  // playback-speed factors; 1.10 speeds playback up
  double tempo_hi = 1.10;
  double scale_lo = 0.95;
  double scale_hi = 1.05;
  int max_shift_px = 5;
  std::vector<int> presets = {1, 2, 3};

  void validate() const;  // both ranges must contain 1.0
};

struct TrainConfig {
  int batch_size = 100;
  double margin = 0.7;
  double lr = 1e-3;
  int max_epochs = 20;
  int patience = 10;
  std::uint64_t seed = 1;
  double cca_ridge = 1e-3;
  HingeAnchor anchor = HingeAnchor::Sheet;
  AugmentConfig augment;
  int max_valid_pairs = 0;  // 0 = the whole validation split
  int eval_threads = 0;     // inference-only parallelism; 0 = hardware

  void validate() const;
};

/// Pairwise ranking loss over cosine similarities of matched rows:
/// (1/n) * sum_i sum_{j != i} max(0, margin - s(S_i, A_i) + s(S_i, A_j))
/// for the sheet anchor; the audio anchor swaps the roles, Both averages.
/// Throws NumericError on a zero-norm embedding row.
nd::Tensor ranking_loss(nd::Graph* g, const nd::Tensor& sheet_emb,
                        const nd::Tensor& audio_emb, double margin,
                        HingeAnchor anchor = HingeAnchor::Sheet);

struct AdamState {
  std::vector<double> m, v;
};

/// Bias-corrected Adam update in place; step counts from 1. A missing
/// gradient counts as zero (moments still decay).
void adam_step(nd::Tensor& param, AdamState& state, double lr, long step,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// image augmentation primitives (exposed for their oracles)
nd::Tensor scale_image(const nd::Tensor& img, double factor);
nd::Tensor shift_image(const nd::Tensor& img, int shift_y, int shift_x);

struct AugmentedPair {
  nd::Tensor sheet;  // [1,160,200]
  nd::Tensor audio;  // [1,92,T]
};

/// Tempo-warped audio re-render plus scaled/shifted sheet snippet. With the
/// ranges collapsed to identity and the stored preset, the output is
/// bit-identical to the stored pair.
AugmentedPair augment_pair(const PairDataset& data, const PairRecord& rec,
                           int context_frames, Rng& rng,
                           const AugmentConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_mrr = 0.0;
  double valid_r1 = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_valid_mrr = 0.0;
  CcaProjection cca_batch;    // batch-fitted projection at the best epoch
  CcaProjection cca_refined;  // whole-training-set refit
};

/// Full loop: shuffle, batch, augment, forward both pathways, per-batch CCA
/// fit with stop-gradient projections, ranking loss, backward, Adam. Early
/// stopping tracks validation MRR; the best parameters are restored and the
/// CCA layer refined on the whole training split before returning.
TrainResult train(Model& model, const PairDataset& data, const TrainConfig& cfg);

struct EmbeddedSplit {
  Eigen::MatrixXd sheet;  // n x embed_dim, pre-CCA
  Eigen::MatrixXd audio;
  std::vector<std::string> ids;
};

/// Eval-mode embeddings of stored (un-augmented) pairs; row i matches ids[i].
/// Inference over disjoint inputs runs on `threads` threads (0 = hardware).
EmbeddedSplit embed_records(Model& model, const PairDataset& data,
                            std::span<const PairRecord* const> records,
                            int context_frames, int threads = 0);

}  // namespace asr
