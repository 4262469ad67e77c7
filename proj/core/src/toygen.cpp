#include "asr/toygen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "asr/errors.hpp"
#include "asr/ndt.hpp"
#include "asr/rng.hpp"

namespace asr {

namespace {

using nlohmann::json;

int pitch_degree(int midi) {
  // diatonic approximation: 7 staff steps per octave, anchored at C4
  return static_cast<int>(std::lround((midi - 60) * 7.0 / 12.0));
}

constexpr int kDegreeY0 = 96;   // y of C4
constexpr int kStepPx = 4;      // px per staff step (staff lines 8 px apart)

int degree_y(int deg) { return kDegreeY0 - kStepPx * deg; }

// harmonic offsets in semitones for h = 1..5, rounded to the nearest bin
constexpr int kHarmonicOffset[5] = {0, 12, 19, 24, 28};

}  // namespace

Piece gen_piece(std::uint64_t seed, const PieceParams& params) {
  if (params.measures <= 0) {
    throw std::invalid_argument("gen_piece: measures must be positive");
  }
  if (params.density_per_beat <= 0.0) {
    throw std::invalid_argument("gen_piece: density must be positive");
  }
  Rng rng(mix_seed(seed, "piece"));
  Piece piece;
  piece.seed = seed;
  {
    std::ostringstream os;
    os << "p" << std::hex << seed;
    piece.id = os.str();
  }
  piece.tempo_bpm = params.tempo_bpm
                        ? *params.tempo_bpm
                        : std::clamp(rng.normal(106.0, 25.0), 40.0, 200.0);

  const double step_beats = 1.0 / params.density_per_beat;
  const int positions =
      static_cast<int>(std::lround(params.measures * 4 * params.density_per_beat));
  int pitch = 60 + rng.uniform_int(-12, 12);
  for (int i = 0; i < positions; ++i) {
    const bool rest = rng.uniform() < 0.1;
    pitch = std::clamp(pitch + rng.uniform_int(-5, 5), 36, 96);
    if (rest) continue;
    piece.notes.push_back({i * step_beats, pitch, step_beats});
  }
  return piece;
}

ScoreRendering render_score(const Piece& piece) {
  const int n = static_cast<int>(piece.notes.size());
  ScoreRendering score;
  score.width = 2 * kScoreMarginPx + kNoteAdvancePx * n;
  score.image.assign(static_cast<std::size_t>(kScoreHeight) * score.width, 0.0);

  // staff lines at degrees 2,4,6,8,10 (E4..F5)
  for (int deg = 2; deg <= 10; deg += 2) {
    const int y = degree_y(deg);
    for (int x = 0; x < score.width; ++x) score.px(y, x) = 1.0;
  }

  for (int i = 0; i < n; ++i) {
    const int cx = kScoreMarginPx + kNoteAdvancePx * i + kNoteAdvancePx / 2;
    score.notehead_x.push_back(cx);
    const int deg = pitch_degree(piece.notes[i].pitch);
    const int cy = degree_y(deg);
    // filled 6x4 px ellipse
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -3; dx <= 3; ++dx) {
        const double r = dx * dx / 9.0 + dy * dy / 4.0;
        if (r <= 1.0 + 1e-9) score.px(cy + dy, cx + dx) = 1.0;
      }
    }
    // ledger lines beyond the staff at even degrees
    for (int l = 0; l >= deg; l -= 2) {
      for (int dx = -5; dx <= 5; ++dx) score.px(degree_y(l), cx + dx) = 1.0;
    }
    for (int l = 12; l <= deg; l += 2) {
      for (int dx = -5; dx <= 5; ++dx) score.px(degree_y(l), cx + dx) = 1.0;
    }
  }
  return score;
}

const std::array<TimbrePreset, 4>& timbre_presets() {
  static const std::array<TimbrePreset, 4> presets = {{
      {1, {1.00, 0.80, 0.60, 0.40, 0.30}, 1.2},  // bright
      {2, {1.00, 0.50, 0.25, 0.12, 0.06}, 0.8},  // mellow
      {3, {1.00, 0.70, 0.45, 0.30, 0.15}, 2.2},  // plucked
      {4, {1.00, 0.30, 0.65, 0.20, 0.35}, 1.5},  // held-out test timbre
  }};
  return presets;
}

const TimbrePreset& timbre_preset(int id) {
  for (const TimbrePreset& p : timbre_presets()) {
    if (p.id == id) return p;
  }
  throw std::invalid_argument("unknown timbre preset " + std::to_string(id));
}

AudioRendering render_spectrogram(const Piece& piece, double rho,
                                  const TimbrePreset& timbre) {
  if (rho <= 0.0) {
    throw std::invalid_argument("render_spectrogram: tempo ratio must be > 0");
  }
  const double sec_per_beat = 60.0 / (piece.tempo_bpm * rho);
  double last_beats = 0.0;
  for (const Note& note : piece.notes) {
    last_beats = std::max(last_beats, note.onset_beats + note.duration_beats);
  }
  const double tail_sec = 1.0;
  AudioRendering audio;
  audio.tempo_ratio = rho;
  audio.frames = static_cast<int>(
                     std::ceil((last_beats * sec_per_beat + tail_sec) *
                               kFramesPerSecond)) + 1;
  audio.spectrogram.assign(
      static_cast<std::size_t>(kSpecBins) * audio.frames, 0.0);

  for (const Note& note : piece.notes) {
    const double onset_sec = note.onset_beats * sec_per_beat;
    const int onset_frame =
        static_cast<int>(std::llround(onset_sec * kFramesPerSecond));
    audio.onset_frames.push_back(std::min(onset_frame, audio.frames - 1));
    for (int h = 0; h < 5; ++h) {
      const double w = timbre.harmonic_weights[static_cast<std::size_t>(h)];
      if (w <= 0.0) continue;
      const int bin = note.pitch + kHarmonicOffset[h] - kMidiOfBin0;
      if (bin < 0 || bin >= kSpecBins) continue;
      // ring until the contribution falls below threshold
      const double span_sec =
          std::log(std::max(w, 1e-12) / 1e-4) / timbre.decay_per_second;
      const int last = std::min(
          audio.frames - 1,
          onset_frame + static_cast<int>(std::ceil(
                            std::max(0.0, span_sec) * kFramesPerSecond)));
      for (int f = onset_frame; f <= last; ++f) {
        const double t_since = (f - onset_frame) / kFramesPerSecond;
        audio.cell(bin, f) += w * std::exp(-timbre.decay_per_second * t_since);
      }
    }
  }

  double peak = 0.0;
  for (double& v : audio.spectrogram) {
    v = std::log1p(v);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (double& v : audio.spectrogram) v /= peak;
  }
  return audio;
}

namespace {

AlignedPair make_pair(const ScoreRendering& score, const AudioRendering& audio,
                      const Piece& piece, int anchor, int T, int audio_start) {
  AlignedPair pair;
  pair.piece_id = piece.id;
  pair.anchor = anchor;

  const int cx = score.notehead_x[static_cast<std::size_t>(anchor)];
  const int x0 = cx - 100;
  pair.sheet = nd::Tensor({1, static_cast<std::size_t>(kScoreHeight), 200});
  for (int y = 0; y < kScoreHeight; ++y) {
    for (int x = 0; x < 200; ++x) {
      pair.sheet.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
          score.px(y, x0 + x);
    }
  }

  pair.audio = nd::Tensor(
      {1, static_cast<std::size_t>(kSpecBins), static_cast<std::size_t>(T)});
  for (int bin = 0; bin < kSpecBins; ++bin) {
    for (int t = 0; t < T; ++t) {
      pair.audio.at(0, static_cast<std::size_t>(bin), static_cast<std::size_t>(t)) =
          audio.cell(bin, audio_start + t);
    }
  }

  pair.onset_count = 0;
  for (int of : audio.onset_frames) {
    if (of >= audio_start && of < audio_start + T) ++pair.onset_count;
  }
  return pair;
}

}  // namespace

std::optional<AlignedPair> extract_pair_at(const ScoreRendering& score,
                                           const AudioRendering& audio,
                                           const Piece& piece, int anchor,
                                           int context_frames,
                                           bool clamp_window) {
  const int n = static_cast<int>(piece.notes.size());
  if (anchor < 0 || anchor >= n) {
    throw std::invalid_argument("extract_pair_at: anchor out of range");
  }
  const int T = context_frames;
  const int cx = score.notehead_x[static_cast<std::size_t>(anchor)];
  if (cx - 100 < 0 || cx + 100 > score.width) return std::nullopt;

  int start = audio.onset_frames[static_cast<std::size_t>(anchor)] - T / 2;
  if (clamp_window) {
    if (audio.frames < T) return std::nullopt;
    start = std::clamp(start, 0, audio.frames - T);
  } else if (start < 0 || start + T > audio.frames) {
    return std::nullopt;
  }
  return make_pair(score, audio, piece, anchor, T, start);
}

std::optional<nd::Tensor> extract_audio_window(const AudioRendering& audio,
                                               int anchor, int context_frames,
                                               bool clamp_window) {
  if (anchor < 0 || anchor >= static_cast<int>(audio.onset_frames.size())) {
    throw std::invalid_argument("extract_audio_window: anchor out of range");
  }
  const int T = context_frames;
  int start = audio.onset_frames[static_cast<std::size_t>(anchor)] - T / 2;
  if (clamp_window) {
    if (audio.frames < T) return std::nullopt;
    start = std::clamp(start, 0, audio.frames - T);
  } else if (start < 0 || start + T > audio.frames) {
    return std::nullopt;
  }
  nd::Tensor out(
      {1, static_cast<std::size_t>(kSpecBins), static_cast<std::size_t>(T)});
  for (int bin = 0; bin < kSpecBins; ++bin) {
    for (int t = 0; t < T; ++t) {
      out.at(0, static_cast<std::size_t>(bin), static_cast<std::size_t>(t)) =
          audio.cell(bin, start + t);
    }
  }
  return out;
}

std::vector<AlignedPair> extract_pairs(const ScoreRendering& score,
                                       const AudioRendering& audio,
                                       const Piece& piece, int context_frames) {
  std::vector<AlignedPair> pairs;
  for (int i = 0; i < static_cast<int>(piece.notes.size()); ++i) {
    if (auto p = extract_pair_at(score, audio, piece, i, context_frames, false)) {
      pairs.push_back(std::move(*p));
    }
  }
  return pairs;
}

namespace {

json piece_to_json(const Piece& piece) {
  json notes = json::array();
  for (const Note& n : piece.notes) {
    notes.push_back({n.onset_beats, n.pitch, n.duration_beats});
  }
  return json{{"id", piece.id},
              {"tempo_bpm", piece.tempo_bpm},
              {"seed", piece.seed},
              {"notes", std::move(notes)}};
}

Piece piece_from_json(const json& j) {
  Piece piece;
  piece.id = j.at("id").get<std::string>();
  piece.tempo_bpm = j.at("tempo_bpm").get<double>();
  piece.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& n : j.at("notes")) {
    piece.notes.push_back(
        {n.at(0).get<double>(), n.at(1).get<int>(), n.at(2).get<double>()});
  }
  return piece;
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

void gen_dataset(const DatasetParams& params, const std::filesystem::path& dir) {
  if (params.n_pieces < 3) {
    throw std::invalid_argument("gen_dataset: need at least 3 pieces");
  }
  if (params.densities.empty()) {
    throw std::invalid_argument("gen_dataset: densities must be non-empty");
  }
  namespace fs = std::filesystem;
  fs::create_directories(dir / "tensors");

  Rng rng(mix_seed(params.seed, "dataset"));

  // disjoint piece splits 80/10/10 via a seed-pinned Fisher-Yates shuffle
  std::vector<int> order(static_cast<std::size_t>(params.n_pieces));
  for (int i = 0; i < params.n_pieces; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = params.n_pieces - 1; i > 0; --i) {
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }
  const int n_train = params.n_pieces * 8 / 10;
  const int n_valid = params.n_pieces / 10;
  std::vector<std::string> split_of(static_cast<std::size_t>(params.n_pieces));
  for (int k = 0; k < params.n_pieces; ++k) {
    const char* s = k < n_train ? "train" : (k < n_train + n_valid ? "valid" : "test");
    split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = s;
  }

  std::ofstream index(dir / "index.tsv");
  std::ofstream pieces_out(dir / "pieces.jsonl");
  if (!index || !pieces_out) {
    throw IoError("gen_dataset: cannot write to " + dir.string());
  }
  index << "pair_id\tpiece_id\tsplit\trho\tpreset\tonset_count\tsheet_file\t"
           "audio_file\n";

  for (int i = 0; i < params.n_pieces; ++i) {
    PieceParams pp;
    pp.measures = params.measures;
    pp.density_per_beat = params.densities[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(params.densities.size()) - 1))];
    Piece piece = gen_piece(mix_seed(params.seed, static_cast<std::uint64_t>(i)), pp);
    piece.id = "p" + zero_pad(i, 4);
    const std::string& split = split_of[static_cast<std::size_t>(i)];
    const int preset = split == "test" ? 4 : 1 + rng.uniform_int(0, 2);

    pieces_out << piece_to_json(piece).dump() << "\n";

    ScoreRendering score = render_score(piece);
    AudioRendering audio = render_spectrogram(piece, 1.0, timbre_preset(preset));

    std::vector<int> anchors;
    for (int a = 0; a < static_cast<int>(piece.notes.size()); ++a) {
      if (extract_pair_at(score, audio, piece, a, params.excerpt_frames, false)) {
        anchors.push_back(a);
      }
    }
    const int cap = params.pairs_per_piece_train;
    if (split != "test" && cap > 0 && static_cast<int>(anchors.size()) > cap) {
      std::vector<int> kept;
      for (int k = 0; k < cap; ++k) {
        kept.push_back(anchors[static_cast<std::size_t>(
            k * static_cast<int>(anchors.size()) / cap)]);
      }
      anchors = std::move(kept);
    }

    for (int a : anchors) {
      AlignedPair pair =
          *extract_pair_at(score, audio, piece, a, params.excerpt_frames, false);
      const std::string stem = piece.id + "_a" + zero_pad(a, 3);
      const std::string sheet_file = "tensors/" + stem + "_sheet.ndt";
      const std::string audio_file = "tensors/" + stem + "_audio.ndt";
      write_tensor(dir / sheet_file, pair.sheet);
      write_tensor(dir / audio_file, pair.audio);
      index << piece.id << ":" << a << "\t" << piece.id << "\t" << split << "\t1\t"
            << preset << "\t" << pair.onset_count << "\t" << sheet_file << "\t"
            << audio_file << "\n";
    }
  }

  json meta{{"excerpt_frames", params.excerpt_frames},
            {"n_pieces", params.n_pieces},
            {"measures", params.measures},
            {"densities", params.densities},
            {"pairs_per_piece_train", params.pairs_per_piece_train},
            {"seed", params.seed}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

PairDataset PairDataset::open(const std::filesystem::path& dir) {
  PairDataset ds;
  ds.dir_ = dir;

  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw IoError("dataset: missing meta.json in " + dir.string());
  json meta = json::parse(meta_in, nullptr, false);
  if (meta.is_discarded()) throw IoError("dataset: malformed meta.json");
  ds.excerpt_frames_ = meta.at("excerpt_frames").get<int>();

  std::ifstream pieces_in(dir / "pieces.jsonl");
  if (!pieces_in) throw IoError("dataset: missing pieces.jsonl");
  std::string line;
  while (std::getline(pieces_in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IoError("dataset: malformed pieces.jsonl line");
    Piece piece = piece_from_json(j);
    ds.pieces_.emplace(piece.id, std::move(piece));
  }

  std::ifstream index_in(dir / "index.tsv");
  if (!index_in) throw IoError("dataset: missing index.tsv");
  if (!std::getline(index_in, line)) throw IoError("dataset: empty index.tsv");
  while (std::getline(index_in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    PairRecord r;
    std::string rho, preset, onsets;
    if (!std::getline(row, r.pair_id, '\t') ||
        !std::getline(row, r.piece_id, '\t') || !std::getline(row, r.split, '\t') ||
        !std::getline(row, rho, '\t') || !std::getline(row, preset, '\t') ||
        !std::getline(row, onsets, '\t') ||
        !std::getline(row, r.sheet_file, '\t') ||
        !std::getline(row, r.audio_file, '\t')) {
      throw IoError("dataset: malformed index row: " + line);
    }
    r.rho = std::stod(rho);
    r.preset = std::stoi(preset);
    r.onset_count = std::stoi(onsets);
    const auto colon = r.pair_id.rfind(':');
    if (colon == std::string::npos) {
      throw IoError("dataset: pair_id without anchor: " + r.pair_id);
    }
    r.anchor = std::stoi(r.pair_id.substr(colon + 1));
    if (!ds.pieces_.contains(r.piece_id)) {
      throw IoError("dataset: pair references unknown piece " + r.piece_id);
    }
    ds.records_.push_back(std::move(r));
  }
  return ds;
}

std::vector<const PairRecord*> PairDataset::split(std::string_view name) const {
  std::vector<const PairRecord*> out;
  for (const PairRecord& r : records_) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

const Piece& PairDataset::piece(const std::string& id) const {
  auto it = pieces_.find(id);
  if (it == pieces_.end()) {
    throw std::invalid_argument("dataset: unknown piece " + id);
  }
  return it->second;
}

nd::Tensor PairDataset::load_sheet(const PairRecord& r) const {
  nd::Tensor t = read_tensor(dir_ / r.sheet_file);
  if (t.shape() != nd::Shape{1, 160, 200}) {
    throw IoError("dataset: sheet tensor has shape " + nd::shape_str(t.shape()));
  }
  return t;
}

nd::Tensor slice_center_frames(const nd::Tensor& audio, int context_frames) {
  if (audio.rank() != 3 || audio.dim(0) != 1) {
    throw std::invalid_argument("slice_center_frames: expected [1,F,T]");
  }
  const int T0 = static_cast<int>(audio.dim(2));
  const int T = context_frames;
  if (T > T0) {
    throw std::invalid_argument("slice_center_frames: window longer than excerpt");
  }
  if (T == T0) return audio;
  const int start = (T0 - T) / 2;
  const std::size_t F = audio.dim(1);
  nd::Tensor out({1, F, static_cast<std::size_t>(T)});
  for (std::size_t f = 0; f < F; ++f) {
    for (int t = 0; t < T; ++t) {
      out.at(0, f, static_cast<std::size_t>(t)) =
          audio.at(0, f, static_cast<std::size_t>(start + t));
    }
  }
  return out;
}

nd::Tensor PairDataset::load_audio(const PairRecord& r, int context_frames) const {
  nd::Tensor t = read_tensor(dir_ / r.audio_file);
  if (t.rank() != 3 || t.dim(0) != 1 ||
      t.dim(1) != static_cast<std::size_t>(kSpecBins)) {
    throw IoError("dataset: audio tensor has shape " + nd::shape_str(t.shape()));
  }
  return slice_center_frames(t, context_frames);
}

int PairDataset::onset_count_in_context(const PairRecord& r,
                                        int context_frames) const {
  const Piece& p = piece(r.piece_id);
  const double spb = 60.0 / (p.tempo_bpm * r.rho);
  auto frame_of = [&](int idx) {
    return static_cast<int>(std::llround(
        p.notes[static_cast<std::size_t>(idx)].onset_beats * spb *
        kFramesPerSecond));
  };
  const int center = frame_of(r.anchor);
  const int start = center - context_frames / 2;
  int count = 0;
  for (int i = 0; i < static_cast<int>(p.notes.size()); ++i) {
    const int f = frame_of(i);
    if (f >= start && f < start + context_frames) ++count;
  }
  return count;
}

}  // namespace asr
