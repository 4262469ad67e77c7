#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asr/tensor.hpp"

namespace asr {

struct Note {
  double onset_beats = 0.0;
  int pitch = 60;  // MIDI, 36..96
  double duration_beats = 1.0;
};

struct Piece {
  std::string id;
  std::vector<Note> notes;  // onsets non-decreasing
  double tempo_bpm = 106.0;
  std::uint64_t seed = 0;
};

struct PieceParams {
  int measures = 8;                     // 4/4 bars
  double density_per_beat = 1.0;        // grid notes per beat: 0.5, 1, 2 or 4
  std::optional<double> tempo_bpm;      // overrides the sampled tempo
};

/// Random piece on a 4/4 grid: onsets on the density grid with 10% rests,
/// pitch a bounded random walk (steps within +-5 semitones, MIDI 36..96),
/// tempo ~ N(106, 25^2) clipped to [40, 200] unless overridden.
Piece gen_piece(std::uint64_t seed, const PieceParams& params);

constexpr int kScoreHeight = 160;
constexpr int kNoteAdvancePx = 16;
constexpr int kScoreMarginPx = 110;  // >= half a snippet so no sheet-side cuts

struct ScoreRendering {
  int width = 0;
  std::vector<double> image;   // kScoreHeight x width, row-major, ink = 1
  std::vector<int> notehead_x; // one x coordinate per note

  double& px(int y, int x) { return image[static_cast<std::size_t>(y) * width + x]; }
  double px(int y, int x) const {
    return image[static_cast<std::size_t>(y) * width + x];
  }
};

/// Five staff lines, filled 6x4 px noteheads, 16 px horizontal advance per
/// note, vertical position linear in pitch (diatonic approximation) with
/// ledger lines outside the staff. Tempo never enters: notehead density on
/// the page is tempo-independent.
ScoreRendering render_score(const Piece& piece);

constexpr int kSpecBins = 92;
constexpr double kFramesPerSecond = 20.0;  // 42 frames = 2.1 s
constexpr int kMidiOfBin0 = 24;            // bin k covers MIDI 24+k

struct TimbrePreset {
  int id = 1;  // presets 1..3 train, 4 is the held-out test timbre
  std::array<double, 5> harmonic_weights{};
  double decay_per_second = 1.0;
};

const std::array<TimbrePreset, 4>& timbre_presets();
const TimbrePreset& timbre_preset(int id);

struct AudioRendering {
  int frames = 0;
  std::vector<double> spectrogram;  // kSpecBins x frames, row-major
  std::vector<int> onset_frames;    // one frame index per note
  double tempo_ratio = 1.0;

  double& cell(int bin, int frame) {
    return spectrogram[static_cast<std::size_t>(bin) * frames + frame];
  }
  double cell(int bin, int frame) const {
    return spectrogram[static_cast<std::size_t>(bin) * frames + frame];
  }
};

/// Additive log-frequency rendering at effective tempo tempo_bpm * rho:
/// each note contributes harmonics 1..5 at MIDI-rounded bins with magnitude
/// w_h * exp(-lambda * t_since_onset); the sum is log(1+x) compressed and
/// max-normalized to [0, 1] per recording.
AudioRendering render_spectrogram(const Piece& piece, double rho,
                                  const TimbrePreset& timbre);

struct AlignedPair {
  nd::Tensor sheet;   // [1, 160, 200]
  nd::Tensor audio;   // [1, 92, T]
  std::string piece_id;
  int anchor = 0;       // note index both views are centered on
  int onset_count = 0;  // onsets inside the audio window
};

/// All pairs whose sheet snippet and audio excerpt fit fully inside the
/// renderings. Snippets are 200 px centered on the anchor notehead; excerpts
/// are T frames centered on the anchor onset.
std::vector<AlignedPair> extract_pairs(const ScoreRendering& score,
                                       const AudioRendering& audio,
                                       const Piece& piece, int context_frames);

/// Single-anchor variant used by augmentation and tempo sweeps. With
/// clamp_window the excerpt window is shifted to stay inside a long-enough
/// rendering; otherwise out-of-range anchors yield nullopt.
std::optional<AlignedPair> extract_pair_at(const ScoreRendering& score,
                                           const AudioRendering& audio,
                                           const Piece& piece, int anchor,
                                           int context_frames,
                                           bool clamp_window = false);

/// Audio-only window extraction (augmentation re-renders only that side).
std::optional<nd::Tensor> extract_audio_window(const AudioRendering& audio,
                                               int anchor, int context_frames,
                                               bool clamp_window = false);

struct DatasetParams {
  int n_pieces = 200;
  int measures = 12;
  std::vector<double> densities = {0.5, 1.0, 2.0, 4.0};  // sampled per piece
  int excerpt_frames = 168;  // stored window; shorter contexts slice its center
  int pairs_per_piece_train = 0;  // 0 = keep all; test pieces always keep all
  std::uint64_t seed = 1;
};

/// Disjoint 80/10/10 piece splits. Train/valid render with a per-piece train
/// preset (1..3); test renders with the held-out preset 4 at rho = 1. Writes
/// index.tsv, pieces.jsonl and one NDT1 file per tensor.
void gen_dataset(const DatasetParams& params, const std::filesystem::path& dir);

struct PairRecord {
  std::string pair_id;  // "<piece_id>:<anchor>"
  std::string piece_id;
  std::string split;    // train | valid | test
  double rho = 1.0;
  int preset = 1;
  int onset_count = 0;
  std::string sheet_file;
  std::string audio_file;
  int anchor = 0;
};

class PairDataset {
 public:
  static PairDataset open(const std::filesystem::path& dir);

  const std::vector<PairRecord>& records() const { return records_; }
  std::vector<const PairRecord*> split(std::string_view name) const;
  const Piece& piece(const std::string& id) const;
  const std::filesystem::path& dir() const { return dir_; }
  int excerpt_frames() const { return excerpt_frames_; }

  nd::Tensor load_sheet(const PairRecord& r) const;
  /// Loads the stored excerpt and slices its centered context_frames window.
  nd::Tensor load_audio(const PairRecord& r, int context_frames) const;

  /// Onsets inside the centered context window (recomputed from the piece;
  /// the index column refers to the full stored excerpt).
  int onset_count_in_context(const PairRecord& r, int context_frames) const;

 private:
  std::filesystem::path dir_;
  std::vector<PairRecord> records_;
  std::map<std::string, Piece> pieces_;
  int excerpt_frames_ = 168;
};

/// Center slice along the time axis: [1,92,T0] -> [1,92,T].
nd::Tensor slice_center_frames(const nd::Tensor& audio, int context_frames);

}  // namespace asr
