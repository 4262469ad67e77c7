#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asr/model.hpp"
#include "asr/tensor.hpp"
#include "asr/toygen.hpp"

namespace asr {

/// Shannon entropy in nats, with 0*ln(0) = 0.
double attention_entropy(std::span<const double> weights);
double attention_entropy(const AttentionDistribution& a);

struct SpearmanResult {
  double rho = 0.0;
  bool degenerate = false;  // one variable had no rank variance
};

/// Spearman rank correlation with average-rank tie handling.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

struct EntropyRecord {
  std::string pair_id;
  int onset_count = 0;
  double entropy = 0.0;
  double rho = 1.0;
};

struct EntropyReport {
  std::vector<EntropyRecord> records;
  SpearmanResult correlation;  // onset count vs entropy
  int context_frames = 0;
};

/// One record per pair of the split: attention entropy against the onset
/// count inside the model's context window. Requires an attention model.
EntropyReport entropy_onset_report(Model& model, const PairDataset& data,
                                   std::string_view split);

/// CSV `pair_id,onset_count,entropy,rho` with a provenance header comment.
void write_entropy_csv(const std::filesystem::path& path,
                       const EntropyReport& report,
                       std::string_view provenance);

/// Standalone SVG with three stacked panels: the sheet snippet (embedded
/// grayscale raster), the attention curve normalized to peak 1, and the
/// spectrogram heat raster.
void render_attention_svg(const nd::Tensor& sheet, const nd::Tensor& spec,
                          std::span<const double> attention,
                          const std::filesystem::path& out_path);

// PNG helpers (grayscale / RGB8), exposed for the report tests.
std::vector<unsigned char> encode_png_gray8(int width, int height,
                                            const std::vector<unsigned char>& pixels);
std::vector<unsigned char> encode_png_rgb8(int width, int height,
                                           const std::vector<unsigned char>& pixels);
std::string base64_encode(const std::vector<unsigned char>& bytes);

}  // namespace asr
