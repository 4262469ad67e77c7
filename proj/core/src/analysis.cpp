#include "asr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "asr/errors.hpp"

namespace asr {

double attention_entropy(std::span<const double> weights) {
  double h = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw NumericError("attention_entropy: negative weight");
    if (w > 0.0) h -= w * std::log(w);
  }
  return h;
}

double attention_entropy(const AttentionDistribution& a) {
  return attention_entropy(std::span<const double>(a.weights));
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("spearman: length mismatch");
  }
  if (x.size() < 2) return {0.0, true};
  std::vector<double> rx = average_ranks(x);
  std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = rx[i] - mean, b = ry[i] - mean;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, true};
  return {sxy / std::sqrt(sxx * syy), false};
}

EntropyReport entropy_onset_report(Model& model, const PairDataset& data,
                                   std::string_view split) {
  if (!model.config().attention) {
    throw std::invalid_argument("entropy report needs an attention model");
  }
  const int T = model.config().frames();
  EntropyReport report;
  report.context_frames = T;
  for (const PairRecord* r : data.split(split)) {
    nd::Tensor audio = data.load_audio(*r, T);
    AttentionDistribution att = model.attention_forward(audio);
    EntropyRecord rec;
    rec.pair_id = r->pair_id;
    rec.onset_count = data.onset_count_in_context(*r, T);
    rec.entropy = attention_entropy(att);
    rec.rho = r->rho;
    report.records.push_back(std::move(rec));
  }
  std::vector<double> onsets, entropies;
  for (const EntropyRecord& rec : report.records) {
    onsets.push_back(static_cast<double>(rec.onset_count));
    entropies.push_back(rec.entropy);
  }
  report.correlation = spearman(onsets, entropies);
  return report;
}

void write_entropy_csv(const std::filesystem::path& path,
                       const EntropyReport& report, std::string_view provenance) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  if (!provenance.empty()) f << "# " << provenance << "\n";
  f << "# spearman=" << report.correlation.rho
    << " degenerate=" << (report.correlation.degenerate ? 1 : 0)
    << " context_frames=" << report.context_frames << "\n";
  f << "pair_id,onset_count,entropy,rho\n";
  for (const EntropyRecord& rec : report.records) {
    f << rec.pair_id << ',' << rec.onset_count << ',' << rec.entropy << ','
      << rec.rho << "\n";
  }
}

namespace {

std::string png_data_uri(const std::vector<unsigned char>& png) {
  return "data:image/png;base64," + base64_encode(png);
}

std::vector<unsigned char> sheet_to_gray(const nd::Tensor& sheet) {
  // ink = 1 renders black on white
  const std::size_t h = sheet.dim(1), w = sheet.dim(2);
  std::vector<unsigned char> px(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(sheet.data()[i], 0.0, 1.0);
    px[i] = static_cast<unsigned char>(std::lround(255.0 * (1.0 - v)));
  }
  return px;
}

std::vector<unsigned char> spec_to_heat(const nd::Tensor& spec) {
  // low energy dark blue, high energy warm; frequency bin 0 at the bottom
  const std::size_t bins = spec.dim(1), frames = spec.dim(2);
  std::vector<unsigned char> px(bins * frames * 3);
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t row = bins - 1 - b;  // flip vertically
    for (std::size_t t = 0; t < frames; ++t) {
      const double v = std::clamp(spec.at(0, b, t), 0.0, 1.0);
      const std::size_t o = (row * frames + t) * 3;
      px[o + 0] = static_cast<unsigned char>(std::lround(255.0 * std::min(1.0, 2.0 * v)));
      px[o + 1] = static_cast<unsigned char>(std::lround(255.0 * std::max(0.0, 2.0 * v - 1.0)));
      px[o + 2] = static_cast<unsigned char>(std::lround(60.0 + 80.0 * (1.0 - v)));
    }
  }
  return px;
}

}  // namespace

void render_attention_svg(const nd::Tensor& sheet, const nd::Tensor& spec,
                          std::span<const double> attention,
                          const std::filesystem::path& out_path) {
  if (sheet.rank() != 3 || spec.rank() != 3) {
    throw std::invalid_argument("render_attention_svg: expected [1,H,W] inputs");
  }
  const int sheet_w = static_cast<int>(sheet.dim(2));
  const int sheet_h = static_cast<int>(sheet.dim(1));
  const int bins = static_cast<int>(spec.dim(1));
  const int frames = static_cast<int>(spec.dim(2));
  if (attention.size() != static_cast<std::size_t>(frames)) {
    throw std::invalid_argument("render_attention_svg: attention length mismatch");
  }

  double peak = 0.0;
  for (double w : attention) peak = std::max(peak, w);
  if (peak <= 0.0) throw NumericError("render_attention_svg: empty attention");

  const int margin = 12;
  const int gap = 16;
  const int att_h = 60;
  const int width = 2 * margin + std::max(sheet_w, frames);
  const int height = 2 * margin + sheet_h + gap + att_h + gap + bins;
  const int att_y = margin + sheet_h + gap;
  const int spec_y = att_y + att_h + gap;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n"
      << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";

  svg << "<image x=\"" << margin << "\" y=\"" << margin << "\" width=\""
      << sheet_w << "\" height=\"" << sheet_h
      << "\" preserveAspectRatio=\"none\" href=\""
      << png_data_uri(encode_png_gray8(sheet_w, sheet_h, sheet_to_gray(sheet)))
      << "\"/>\n";

  // attention curve, normalized to its peak
  svg << "<rect x=\"" << margin << "\" y=\"" << att_y << "\" width=\"" << frames
      << "\" height=\"" << att_h
      << "\" fill=\"none\" stroke=\"#888\" stroke-width=\"0.5\"/>\n"
      << "<polyline fill=\"none\" stroke=\"#c62828\" stroke-width=\"1\" points=\"";
  for (int t = 0; t < frames; ++t) {
    const double xn = margin + t + 0.5;
    const double yn = att_y + att_h * (1.0 - attention[static_cast<std::size_t>(t)] / peak);
    svg << xn << ',' << yn << (t + 1 < frames ? " " : "");
  }
  svg << "\"/>\n";

  svg << "<image x=\"" << margin << "\" y=\"" << spec_y << "\" width=\""
      << frames << "\" height=\"" << bins
      << "\" preserveAspectRatio=\"none\" href=\""
      << png_data_uri(encode_png_rgb8(frames, bins, spec_to_heat(spec)))
      << "\"/>\n";

  svg << "</svg>\n";

  std::ofstream f(out_path);
  if (!f) throw IoError("cannot write " + out_path.string());
  f << svg.str();
}

}  // namespace asr
