#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "asr/errors.hpp"
#include "asr/ops.hpp"
#include "asr/rng.hpp"
#include "asr/trainer.hpp"

using namespace asr;
using nd::Graph;
using nd::Tensor;
namespace fs = std::filesystem;

namespace {

Tensor rows_tensor(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
    }
  }
  return t;
}

Eigen::MatrixXd gauss(int n, int d, Rng& rng) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  }
  return m;
}

double cos_sim(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) / (a.norm() * b.norm());
}

// brute-force double loop, written independently of the fused op
double brute_force_loss(const Eigen::MatrixXd& S, const Eigen::MatrixXd& A,
                        double margin, HingeAnchor anchor) {
  const int n = static_cast<int>(S.rows());
  double total = 0.0;
  const double scale = anchor == HingeAnchor::Both ? 0.5 : 1.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      if (anchor != HingeAnchor::Audio) {
        total += scale * std::max(0.0, margin - cos_sim(S.row(i), A.row(i)) +
                                           cos_sim(S.row(i), A.row(j)));
      }
      if (anchor != HingeAnchor::Sheet) {
        total += scale * std::max(0.0, margin - cos_sim(S.row(j), A.row(j)) +
                                           cos_sim(S.row(i), A.row(j)));
      }
    }
  }
  return total / n;
}

fs::path make_tiny_dataset(const char* name, int n_pieces, int cap) {
  DatasetParams params;
  params.n_pieces = n_pieces;
  params.measures = 6;
  params.densities = {1.0, 2.0};
  params.excerpt_frames = 42;  // SC-sized training data keeps the smoke fast
  params.pairs_per_piece_train = cap;
  params.seed = 51;
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  gen_dataset(params, dir);
  return dir;
}

}  // namespace

TEST_CASE("ranking loss: separated pairs cost nothing") {
  // S_i == A_i, pairs mutually orthogonal: hinge max(0, 0.7 - 1 + 0) = 0
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(2, 4);
  S(0, 0) = 1.0;
  S(1, 1) = 1.0;
  Tensor loss = ranking_loss(nullptr, rows_tensor(S), rows_tensor(S), 0.7);
  CHECK(loss.item() == 0.0);
}

TEST_CASE("ranking loss: identical negatives cost the margin") {
  Eigen::MatrixXd S(2, 3), A(2, 3);
  S << 1, 0, 0, 0, 1, 0;
  A << 1, 1, 0, 1, 1, 0;  // both audio rows identical
  const double margin = 0.7;
  Tensor loss = ranking_loss(nullptr, rows_tensor(S), rows_tensor(A), margin);
  CHECK(loss.item() == doctest::Approx(margin).epsilon(1e-12));
}

TEST_CASE("ranking loss matches the brute-force double loop") {
  Rng rng(61);
  for (HingeAnchor anchor : {HingeAnchor::Sheet, HingeAnchor::Audio, HingeAnchor::Both}) {
    Eigen::MatrixXd S = gauss(8, 32, rng);
    Eigen::MatrixXd A = 0.4 * S + 0.8 * gauss(8, 32, rng);
    Tensor loss = ranking_loss(nullptr, rows_tensor(S), rows_tensor(A), 0.7, anchor);
    CHECK(loss.item() ==
          doctest::Approx(brute_force_loss(S, A, 0.7, anchor)).epsilon(1e-12));
    CHECK(loss.item() >= 0.0);
  }
}

TEST_CASE("ranking loss rejects zero-norm embeddings") {
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(3, 4);
  S(0, 0) = 1.0;
  S(2, 1) = 1.0;  // row 1 stays zero
  Eigen::MatrixXd A = Eigen::MatrixXd::Ones(3, 4);
  CHECK_THROWS_AS(ranking_loss(nullptr, rows_tensor(S), rows_tensor(A), 0.7),
                  NumericError);
}

TEST_CASE("ranking loss is invariant to a common rotation") {
  Rng rng(62);
  Eigen::MatrixXd S = gauss(6, 16, rng);
  Eigen::MatrixXd A = 0.5 * S + gauss(6, 16, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss(16, 16, rng));
  Eigen::MatrixXd Q = qr.householderQ();
  const double base = ranking_loss(nullptr, rows_tensor(S), rows_tensor(A), 0.7).item();
  const double rotated =
      ranking_loss(nullptr, rows_tensor(S * Q), rows_tensor(A * Q), 0.7).item();
  CHECK(std::abs(base - rotated) < 1e-9);
}

TEST_CASE("ranking loss gradients match finite differences") {
  Rng rng(63);
  for (HingeAnchor anchor : {HingeAnchor::Sheet, HingeAnchor::Both}) {
    Tensor S = rows_tensor(gauss(5, 8, rng));
    Tensor A = rows_tensor(gauss(5, 8, rng));
    double err = nd::grad_check(
        [anchor](Graph& g, std::vector<Tensor>& in) {
          return ranking_loss(&g, in[0], in[1], 0.7, anchor);
        },
        {S, A});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("adam: first step moves a unit-gradient scalar by about -lr") {
  Tensor p({1}, std::vector<double>{2.0});
  p.set_requires_grad();
  p.accumulate_grad(std::vector<double>{1.0});
  AdamState state;
  adam_step(p, state, 0.01, 1);
  CHECK(p.data()[0] == doctest::Approx(2.0 - 0.01).epsilon(1e-7));
}

TEST_CASE("adam: zero gradient from a fresh state changes nothing") {
  Tensor p({3}, std::vector<double>{1.0, -2.0, 0.5});
  p.set_requires_grad();
  AdamState state;
  adam_step(p, state, 0.1, 1);  // no gradient accumulated at all
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == -2.0);
  CHECK(p.data()[2] == 0.5);

  // with momentum in flight, a zero-grad step decays the moments
  p.accumulate_grad(std::vector<double>{1.0, 1.0, 1.0});
  adam_step(p, state, 0.1, 2);
  const double m_before = state.m[0];
  const double v_before = state.v[0];
  p.zero_grad();
  adam_step(p, state, 0.1, 3);
  CHECK(state.m[0] == doctest::Approx(0.9 * m_before).epsilon(1e-12));
  CHECK(state.v[0] == doctest::Approx(0.999 * v_before).epsilon(1e-12));
}

TEST_CASE("adam is deterministic across runs") {
  auto run = []() {
    Tensor p({4}, std::vector<double>{0.1, 0.2, 0.3, 0.4});
    p.set_requires_grad();
    AdamState st;
    for (long t = 1; t <= 10; ++t) {
      p.zero_grad();
      std::vector<double> g = {0.01 * static_cast<double>(t), -0.02, 0.5, 0.0};
      p.accumulate_grad(g);
      adam_step(p, st, 1e-3, t);
    }
    return std::vector<double>(p.data(), p.data() + 4);
  };
  CHECK(run() == run());
}

TEST_CASE("image augmentation primitives") {
  Tensor img({1, 12, 16});
  Rng rng(64);
  for (std::size_t y = 3; y < 9; ++y) {
    for (std::size_t x = 5; x < 11; ++x) {
      img.at(0, y, x) = 1.0;
    }
  }
  // identity settings are bit-exact
  Tensor same = shift_image(scale_image(img, 1.0), 0, 0);
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(same.data()[i] == img.data()[i]);
  }
  // in-bounds shifts preserve the ink mass
  double ink = 0.0;
  for (double v : img.values()) ink += v;
  for (auto [dy, dx] : {std::pair{2, 3}, std::pair{-3, -2}, std::pair{1, -4}}) {
    Tensor shifted = shift_image(img, dy, dx);
    double moved = 0.0;
    for (double v : shifted.values()) moved += v;
    CHECK(moved == doctest::Approx(ink));
    CHECK(shifted.at(0, static_cast<std::size_t>(3 + dy),
                     static_cast<std::size_t>(5 + dx)) == 1.0);
  }
  // scaling keeps the canvas size
  CHECK(scale_image(img, 1.05).shape() == img.shape());
  CHECK(scale_image(img, 0.95).shape() == img.shape());
}

TEST_CASE("augment_pair: identity config reproduces the stored pair bit for bit") {
  fs::path dir = make_tiny_dataset("asr_aug_ds", 6, 3);
  PairDataset data = PairDataset::open(dir);
  const PairRecord& rec = *data.split("train").front();

  AugmentConfig cfg;
  cfg.tempo_lo = cfg.tempo_hi = 1.0;
  cfg.scale_lo = cfg.scale_hi = 1.0;
  cfg.max_shift_px = 0;
  cfg.presets = {rec.preset};
  Rng rng(1);
  AugmentedPair pair = augment_pair(data, rec, 42, rng, cfg);

  Tensor sheet = data.load_sheet(rec);
  Tensor audio = data.load_audio(rec, 42);
  REQUIRE(pair.sheet.shape() == sheet.shape());
  REQUIRE(pair.audio.shape() == audio.shape());
  for (std::size_t i = 0; i < sheet.size(); ++i) {
    CHECK(pair.sheet.data()[i] == sheet.data()[i]);
  }
  for (std::size_t i = 0; i < audio.size(); ++i) {
    CHECK(pair.audio.data()[i] == audio.data()[i]);
  }
  fs::remove_all(dir);
}

TEST_CASE("augment_pair: faster playback packs at least as many onsets") {
  fs::path dir = make_tiny_dataset("asr_aug_ds2", 6, 4);
  PairDataset data = PairDataset::open(dir);
  const PairRecord& rec = *data.split("train").back();
  const Piece& piece = data.piece(rec.piece_id);

  auto onsets_at = [&](double factor) {
    AudioRendering audio =
        render_spectrogram(piece, factor, timbre_preset(rec.preset));
    const int center = audio.onset_frames[static_cast<std::size_t>(rec.anchor)];
    int count = 0;
    for (int f : audio.onset_frames) {
      if (f >= center - 21 && f < center + 21) ++count;
    }
    return count;
  };
  CHECK(onsets_at(1.10) >= onsets_at(1.0));
  fs::remove_all(dir);
}

TEST_CASE("training learns, validates and stays reproducible") {
  fs::path dir = make_tiny_dataset("asr_train_ds", 16, 4);
  PairDataset data = PairDataset::open(dir);
  REQUIRE(data.split("train").size() >= 40);

  ModelConfig mc;
  mc.context = Context::SC;
  mc.head = Head::DENSE;

  TrainConfig tc;
  tc.batch_size = 40;
  tc.max_epochs = 4;
  tc.patience = 10;
  tc.lr = 2e-3;
  tc.seed = 9;
  tc.augment.enabled = false;

  // untrained-model baseline on the validation split via a fresh model
  Model fresh = Model::build(mc, 9);
  TrainConfig probe = tc;
  probe.max_epochs = 0;
  TrainResult untrained = train(fresh, data, probe);
  CHECK(untrained.cca_refined.defined());

  Model model = Model::build(mc, 9);
  TrainResult result = train(model, data, tc);
  REQUIRE(result.log.size() == 4);
  CHECK(result.log.back().train_loss < result.log.front().train_loss);
  CHECK(result.best_valid_mrr >= result.log.front().valid_mrr - 1e-12);
  CHECK(result.cca_batch.defined());
  CHECK(result.cca_refined.defined());

  // same seed, same dataset: identical loss curves
  Model model2 = Model::build(mc, 9);
  TrainResult result2 = train(model2, data, tc);
  REQUIRE(result2.log.size() == result.log.size());
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    CHECK(result.log[i].train_loss == result2.log[i].train_loss);
    CHECK(result.log[i].valid_mrr == result2.log[i].valid_mrr);
  }
  fs::remove_all(dir);
}

TEST_CASE("train config invariants are enforced") {
  TrainConfig tc;
  tc.batch_size = 32;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.batch_size = 50;
  tc.margin = 2.5;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.margin = 0.7;
  tc.lr = 0.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.lr = 1e-3;
  tc.augment.tempo_lo = 1.02;  // range must contain 1.0
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.augment.tempo_lo = 0.95;
  CHECK_NOTHROW(tc.validate());
}
