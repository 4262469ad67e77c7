#include "asr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "asr/errors.hpp"
#include "asr/retrieval.hpp"

namespace asr {

std::string to_string(HingeAnchor a) {
  switch (a) {
    case HingeAnchor::Sheet: return "sheet";
    case HingeAnchor::Audio: return "audio";
    case HingeAnchor::Both: return "both";
  }
  return "?";
}

HingeAnchor parse_hinge_anchor(const std::string& s) {
  if (s == "sheet") return HingeAnchor::Sheet;
  if (s == "audio") return HingeAnchor::Audio;
  if (s == "both") return HingeAnchor::Both;
  throw ConfigError("unknown hinge anchor '" + s + "'");
}

void AugmentConfig::validate() const {
  if (tempo_lo > 1.0 || tempo_hi < 1.0 || tempo_lo <= 0.0) {
    throw ConfigError("tempo range must contain 1.0 and stay positive");
  }
  if (scale_lo > 1.0 || scale_hi < 1.0 || scale_lo <= 0.0) {
    throw ConfigError("image scale range must contain 1.0 and stay positive");
  }
  if (max_shift_px < 0) throw ConfigError("shift must be non-negative");
  if (enabled) {
    if (presets.empty()) throw ConfigError("augmentation needs timbre presets");
    for (int p : presets) timbre_preset(p);  // validates ids
  }
}

void TrainConfig::validate() const {
  if (batch_size <= 32) {
    throw ConfigError("batch_size must exceed the 32-dim embedding");
  }
  if (!(margin > 0.0 && margin < 2.0)) {
    throw ConfigError("margin must lie in (0, 2)");
  }
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (cca_ridge <= 0.0) throw ConfigError("cca_ridge must be positive");
  augment.validate();
}

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row-normalizes and reports rows, throwing on zero norms.
RowMat normalized_rows(const nd::Tensor& t, const char* side) {
  const std::size_t n = t.dim(0), d = t.dim(1);
  RowMat out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Map<const Eigen::RowVectorXd> row(t.data() + i * d, d);
    const double norm = row.norm();
    if (norm == 0.0 || !std::isfinite(norm)) {
      throw NumericError(std::string("ranking_loss: zero-norm ") + side +
                         " embedding at row " + std::to_string(i));
    }
    out.row(static_cast<Eigen::Index>(i)) = row / norm;
  }
  return out;
}

}  // namespace

nd::Tensor ranking_loss(nd::Graph* g, const nd::Tensor& sheet_emb,
                        const nd::Tensor& audio_emb, double margin,
                        HingeAnchor anchor) {
  if (sheet_emb.rank() != 2 || audio_emb.rank() != 2 ||
      sheet_emb.shape() != audio_emb.shape()) {
    throw std::invalid_argument("ranking_loss: expected matching [n,d] inputs");
  }
  const std::size_t n = sheet_emb.dim(0), d = sheet_emb.dim(1);
  if (n < 2) throw std::invalid_argument("ranking_loss: need at least 2 pairs");
  if (!(margin > 0.0)) throw std::invalid_argument("ranking_loss: bad margin");

  RowMat s_hat = normalized_rows(sheet_emb, "sheet");
  RowMat a_hat = normalized_rows(audio_emb, "audio");
  RowMat sim = s_hat * a_hat.transpose();  // sim(i,j) = s(S_i, A_j)

  const double inv_n = 1.0 / static_cast<double>(n);
  double loss_val = 0.0;
  RowMat dsim = RowMat::Zero(static_cast<Eigen::Index>(n),
                             static_cast<Eigen::Index>(n));
  const bool sheet_side = anchor != HingeAnchor::Audio;
  const bool audio_side = anchor != HingeAnchor::Sheet;
  const double scale = anchor == HingeAnchor::Both ? 0.5 : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto ii = static_cast<Eigen::Index>(i);
      const auto jj = static_cast<Eigen::Index>(j);
      if (sheet_side) {
        // sheet anchor i, audio negative j
        const double h = margin - sim(ii, ii) + sim(ii, jj);
        if (h > 0.0) {
          loss_val += scale * inv_n * h;
          dsim(ii, jj) += scale * inv_n;
          dsim(ii, ii) -= scale * inv_n;
        }
      }
      if (audio_side) {
        // audio anchor j, sheet negative i
        const double h = margin - sim(jj, jj) + sim(ii, jj);
        if (h > 0.0) {
          loss_val += scale * inv_n * h;
          dsim(ii, jj) += scale * inv_n;
          dsim(jj, jj) -= scale * inv_n;
        }
      }
    }
  }

  nd::Tensor loss = nd::Tensor::scalar(loss_val);
  nd::ensure_finite(loss, "ranking_loss");

  if (g && (sheet_emb.requires_grad() || audio_emb.requires_grad())) {
    loss.set_requires_grad();
    nd::Tensor sc = sheet_emb, ac = audio_emb, lc = loss;
    g->record("ranking_loss", [sc, ac, lc, s_hat, a_hat, dsim, n, d]() mutable {
      const double* gl = lc.grad_if();
      if (!gl) return;
      const double go = gl[0];
      RowMat ds_hat = dsim * a_hat;              // d loss / d s_hat
      RowMat da_hat = dsim.transpose() * s_hat;  // d loss / d a_hat
      auto through_norm = [go](const nd::Tensor& raw, const RowMat& hat,
                               const RowMat& dhat, nd::Tensor& dst) {
        const std::size_t rows = raw.dim(0), cols = raw.dim(1);
        if (!dst.requires_grad()) return;
        double* grad = dst.grad();
        for (std::size_t i = 0; i < rows; ++i) {
          Eigen::Map<const Eigen::RowVectorXd> row(raw.data() + i * cols, cols);
          const double norm = row.norm();
          const auto ii = static_cast<Eigen::Index>(i);
          const double dot = dhat.row(ii).dot(hat.row(ii));
          for (std::size_t k = 0; k < cols; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            grad[i * cols + k] +=
                go * (dhat(ii, kk) - hat(ii, kk) * dot) / norm;
          }
        }
      };
      through_norm(sc, s_hat, ds_hat, sc);
      through_norm(ac, a_hat, da_hat, ac);
    });
  }
  return loss;
}

void adam_step(nd::Tensor& param, AdamState& state, double lr, long step,
               double beta1, double beta2, double eps) {
  if (step < 1) throw std::invalid_argument("adam_step: step counts from 1");
  const std::size_t n = param.size();
  if (state.m.size() != n) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  const double* g = param.grad_if();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  double* p = param.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g ? g[i] : 0.0;
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

nd::Tensor scale_image(const nd::Tensor& img, double factor) {
  if (img.rank() != 3 || img.dim(0) != 1) {
    throw std::invalid_argument("scale_image: expected [1,H,W]");
  }
  if (factor <= 0.0) throw std::invalid_argument("scale_image: bad factor");
  const std::size_t H = img.dim(1), W = img.dim(2);
  const double cy = (static_cast<double>(H) - 1.0) / 2.0;
  const double cx = (static_cast<double>(W) - 1.0) / 2.0;
  nd::Tensor out({1, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      // bilinear sample of the source at the inverse-scaled position
      const double sy = cy + (static_cast<double>(y) - cy) / factor;
      const double sx = cx + (static_cast<double>(x) - cx) / factor;
      if (sy < 0.0 || sx < 0.0 || sy > static_cast<double>(H - 1) ||
          sx > static_cast<double>(W - 1)) {
        continue;  // outside: background
      }
      const std::size_t y0 = static_cast<std::size_t>(sy);
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, H - 1);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wy = sy - static_cast<double>(y0);
      const double wx = sx - static_cast<double>(x0);
      out.at(0, y, x) = (1.0 - wy) * ((1.0 - wx) * img.at(0, y0, x0) +
                                      wx * img.at(0, y0, x1)) +
                        wy * ((1.0 - wx) * img.at(0, y1, x0) +
                              wx * img.at(0, y1, x1));
    }
  }
  return out;
}

nd::Tensor shift_image(const nd::Tensor& img, int shift_y, int shift_x) {
  if (img.rank() != 3 || img.dim(0) != 1) {
    throw std::invalid_argument("shift_image: expected [1,H,W]");
  }
  const int H = static_cast<int>(img.dim(1)), W = static_cast<int>(img.dim(2));
  nd::Tensor out({1, img.dim(1), img.dim(2)});
  for (int y = 0; y < H; ++y) {
    const int sy = y - shift_y;
    if (sy < 0 || sy >= H) continue;
    for (int x = 0; x < W; ++x) {
      const int sx = x - shift_x;
      if (sx < 0 || sx >= W) continue;
      out.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
          img.at(0, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
    }
  }
  return out;
}

AugmentedPair augment_pair(const PairDataset& data, const PairRecord& rec,
                           int context_frames, Rng& rng,
                           const AugmentConfig& cfg) {
  AugmentedPair out;
  if (!cfg.enabled) {
    out.sheet = data.load_sheet(rec);
    out.audio = data.load_audio(rec, context_frames);
    return out;
  }
  const double tempo_factor = rng.uniform(cfg.tempo_lo, cfg.tempo_hi);
  const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const int dy = rng.uniform_int(-cfg.max_shift_px, cfg.max_shift_px);
  const int dx = rng.uniform_int(-cfg.max_shift_px, cfg.max_shift_px);
  const int preset = cfg.presets[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(cfg.presets.size()) - 1))];

  const Piece& piece = data.piece(rec.piece_id);
  AudioRendering audio =
      render_spectrogram(piece, rec.rho * tempo_factor, timbre_preset(preset));
  auto window = extract_audio_window(audio, rec.anchor, context_frames, true);
  if (!window) {
    // piece shorter than the window at this tempo: keep the stored excerpt
    out.audio = data.load_audio(rec, context_frames);
  } else {
    out.audio = std::move(*window);
  }
  out.sheet = shift_image(scale_image(data.load_sheet(rec), scale), dy, dx);
  return out;
}

EmbeddedSplit embed_records(Model& model, const PairDataset& data,
                            std::span<const PairRecord* const> records,
                            int context_frames, int threads) {
  const std::size_t n = records.size();
  const int d = model.config().embed_dim;
  EmbeddedSplit out;
  out.sheet.resize(static_cast<Eigen::Index>(n), d);
  out.audio.resize(static_cast<Eigen::Index>(n), d);
  out.ids.resize(n);

  int nthreads = threads > 0 ? threads
                             : static_cast<int>(std::max(
                                   1u, std::thread::hardware_concurrency()));
  nthreads = std::min<int>(nthreads, static_cast<int>(std::max<std::size_t>(n, 1)));

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const PairRecord& rec = *records[i];
      out.sheet.row(static_cast<Eigen::Index>(i)) =
          model.embed_sheet(data.load_sheet(rec)).transpose();
      out.audio.row(static_cast<Eigen::Index>(i)) =
          model.embed_audio(data.load_audio(rec, context_frames))
              .first.transpose();
      out.ids[i] = rec.pair_id;
    }
  };
  if (nthreads <= 1 || n < 2) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + static_cast<std::size_t>(nthreads) - 1) /
                              static_cast<std::size_t>(nthreads);
    for (int t = 0; t < nthreads; ++t) {
      const std::size_t b = static_cast<std::size_t>(t) * chunk;
      const std::size_t e = std::min(n, b + chunk);
      if (b >= e) break;
      pool.emplace_back(work, b, e);
    }
    for (std::thread& th : pool) th.join();
  }
  return out;
}

CcaProjection cca_refine(Model& model, const PairDataset& data, double ridge) {
  auto records = data.split("train");
  if (records.empty()) {
    throw std::invalid_argument("cca_refine: empty training split");
  }
  EmbeddedSplit emb = embed_records(model, data, records,
                                    model.config().frames(), 0);
  return cca_fit(emb.sheet, emb.audio, ridge);
}

namespace {

struct ValidationScore {
  double mrr = 0.0;
  double r1 = 0.0;
};

ValidationScore validate_split(Model& model, const PairDataset& data,
                               std::span<const PairRecord* const> records,
                               const TrainConfig& cfg,
                               const CcaProjection& fallback) {
  EmbeddedSplit emb = embed_records(model, data, records,
                                    model.config().frames(), cfg.eval_threads);
  const Eigen::Index n = emb.sheet.rows();
  Eigen::MatrixXd sheet_proj, audio_proj;
  if (n >= emb.sheet.cols() + 1) {
    CcaProjection proj = cca_fit(emb.sheet, emb.audio, cfg.cca_ridge);
    sheet_proj = cca_apply(proj, emb.sheet, View::Sheet);
    audio_proj = cca_apply(proj, emb.audio, View::Audio);
  } else if (fallback.defined()) {
    sheet_proj = cca_apply(fallback, emb.sheet, View::Sheet);
    audio_proj = cca_apply(fallback, emb.audio, View::Audio);
  } else {
    sheet_proj = emb.sheet;
    audio_proj = emb.audio;
  }
  EmbedIndex index = EmbedIndex::build(sheet_proj, emb.ids);
  std::vector<std::size_t> ranks(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    ranks[static_cast<std::size_t>(i)] = index.rank_of(
        audio_proj.row(i).transpose(), emb.ids[static_cast<std::size_t>(i)]);
  }
  RetrievalRun run = evaluate(std::move(ranks), static_cast<std::size_t>(n));
  return {run.mrr, run.r1};
}

}  // namespace

TrainResult train(Model& model, const PairDataset& data, const TrainConfig& cfg) {
  cfg.validate();
#ifdef __GLIBC__
  // Activation tapes allocate and free hundreds of MB per batch; without this
  // glibc hands the blocks back to the kernel and every epoch re-faults them.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
  const int T = model.config().frames();
  auto train_recs = data.split("train");
  auto valid_recs = data.split("valid");
  if (train_recs.empty()) throw std::invalid_argument("train: empty train split");
  if (valid_recs.empty()) throw std::invalid_argument("train: empty valid split");
  if (cfg.max_valid_pairs > 0 &&
      static_cast<int>(valid_recs.size()) > cfg.max_valid_pairs) {
    valid_recs.resize(static_cast<std::size_t>(cfg.max_valid_pairs));
  }

  const std::size_t bins = static_cast<std::size_t>(model.config().spec_bins);
  const std::size_t sh = static_cast<std::size_t>(model.config().sheet_h);
  const std::size_t sw = static_cast<std::size_t>(model.config().sheet_w);

  Rng shuffle_rng(mix_seed(cfg.seed, "shuffle"));
  std::map<std::string, AdamState> adam;
  long global_step = 0;

  TrainResult result;
  Model::State best_state = model.snapshot();
  CcaProjection best_batch_proj;
  CcaProjection last_proj;
  double best_mrr = -1.0;
  int best_epoch = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<const PairRecord*> order = train_recs;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(
                                  shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n = end - start;
      if (static_cast<int>(n) <= 32) break;  // leftover too small for the CCA fit

      nd::Tensor sheets = nd::Tensor::uninitialized({n, 1, sh, sw});
      nd::Tensor audios = nd::Tensor::uninitialized({n, 1, bins, static_cast<std::size_t>(T)});
      for (std::size_t k = 0; k < n; ++k) {
        const PairRecord& rec = *order[start + k];
        Rng aug_rng(mix_seed(cfg.seed, "aug:" + rec.pair_id + ":" +
                                           std::to_string(epoch)));
        AugmentedPair pair = augment_pair(data, rec, T, aug_rng, cfg.augment);
        std::memcpy(sheets.data() + k * sh * sw, pair.sheet.data(),
                    sh * sw * sizeof(double));
        std::memcpy(audios.data() + k * bins * static_cast<std::size_t>(T),
                    pair.audio.data(),
                    bins * static_cast<std::size_t>(T) * sizeof(double));
      }

      try {
        nd::Graph graph;
        nd::Tensor s_emb = model.sheet_forward(&graph, sheets, nd::Mode::Train);
        nd::Tensor a_emb =
            model.audio_forward(&graph, audios, nd::Mode::Train).embedding;

        const std::size_t ed = s_emb.dim(1);
        Eigen::MatrixXd s_mat(static_cast<Eigen::Index>(n),
                              static_cast<Eigen::Index>(ed));
        Eigen::MatrixXd a_mat(static_cast<Eigen::Index>(n),
                              static_cast<Eigen::Index>(ed));
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < ed; ++j) {
            s_mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                s_emb.at(i, j);
            a_mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                a_emb.at(i, j);
          }
        }
        last_proj = cca_fit(s_mat, a_mat, cfg.cca_ridge);

        nd::Tensor s_proj = project_batch(&graph, s_emb, last_proj, View::Sheet);
        nd::Tensor a_proj = project_batch(&graph, a_emb, last_proj, View::Audio);
        nd::Tensor loss =
            ranking_loss(&graph, s_proj, a_proj, cfg.margin, cfg.anchor);

        model.zero_param_grads();
        graph.backward(loss);
        ++global_step;
        for (auto& [name, p] : model.params()) {
          adam_step(p, adam[name], cfg.lr, global_step);
        }
        loss_sum += loss.item();
        ++batches;
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches) + ": " + e.what());
      }
    }
    if (batches == 0) {
      throw std::invalid_argument("train: batch_size exceeds the training split");
    }

    ValidationScore score = validate_split(model, data, valid_recs, cfg, last_proj);
    result.log.push_back(
        {epoch, loss_sum / batches, score.mrr, score.r1});

    if (score.mrr > best_mrr) {
      best_mrr = score.mrr;
      best_epoch = epoch;
      best_state = model.snapshot();
      best_batch_proj = last_proj;
    } else if (epoch - best_epoch >= cfg.patience) {
      break;
    }
  }

  if (cfg.max_epochs > 0) {
    model.restore(best_state);
  } else {
    best_batch_proj = CcaProjection{};
  }
  result.best_epoch = best_epoch;
  result.best_valid_mrr = std::max(best_mrr, 0.0);
  result.cca_batch = best_batch_proj;
  result.cca_refined = cca_refine(model, data, cfg.cca_ridge);
  return result;
}

}  // namespace asr
