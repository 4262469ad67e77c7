#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "asr/analysis.hpp"
#include "asr/errors.hpp"
#include "asr/rng.hpp"

using namespace asr;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream f(p);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// minimal well-formedness check: tags balance and nest properly
bool xml_well_formed(const std::string& text) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = text.find('<', i)) != std::string::npos) {
    const std::size_t end = text.find('>', i);
    if (end == std::string::npos) return false;
    std::string tag = text.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;  // declaration / comment
    if (tag[0] == '/') {
      if (stack.empty()) return false;
      std::string name = tag.substr(1);
      if (stack.back() != name) return false;
      stack.pop_back();
      continue;
    }
    const bool self_closing = tag.back() == '/';
    std::string name = tag.substr(0, tag.find_first_of(" \t\n/"));
    if (!self_closing) stack.push_back(name);
  }
  return stack.empty();
}

// O(n^2) tie-aware ranks, independent of the sort-based implementation
std::vector<double> counting_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0.0, equal = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      less += v[j] < v[i];
      equal += j != i && v[j] == v[i];
    }
    r[i] = 1.0 + less + equal / 2.0;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> polyline_ys(const std::string& svg, double& x_of_min_y) {
  const std::size_t p = svg.find("points=\"");
  REQUIRE(p != std::string::npos);
  const std::size_t e = svg.find('"', p + 8);
  std::istringstream pts(svg.substr(p + 8, e - p - 8));
  std::vector<double> ys;
  std::string pair;
  double best_y = 1e18;
  x_of_min_y = -1.0;
  while (pts >> pair) {
    const std::size_t comma = pair.find(',');
    const double x = std::stod(pair.substr(0, comma));
    const double y = std::stod(pair.substr(comma + 1));
    ys.push_back(y);
    if (y < best_y) {
      best_y = y;
      x_of_min_y = x;
    }
  }
  return ys;
}

}  // namespace

TEST_CASE("attention entropy closed forms") {
  std::vector<double> uniform(168, 1.0 / 168.0);
  CHECK(attention_entropy(uniform) == doctest::Approx(std::log(168.0)).epsilon(1e-12));
  CHECK(attention_entropy(uniform) == doctest::Approx(5.1240).epsilon(1e-4));

  std::vector<double> onehot(42, 0.0);
  onehot[17] = 1.0;
  CHECK(attention_entropy(onehot) == 0.0);

  std::vector<double> peaks(16, 0.0);
  peaks[3] = 0.5;
  peaks[11] = 0.5;
  CHECK(attention_entropy(peaks) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  std::vector<double> bad = {0.5, -0.1, 0.6};
  CHECK_THROWS_AS(attention_entropy(bad), NumericError);
}

TEST_CASE("entropy bounds hold for arbitrary distributions") {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t t = 2 + static_cast<std::size_t>(rng.uniform_int(0, 166));
    std::vector<double> w(t);
    double s = 0.0;
    for (double& v : w) {
      v = -std::log(1.0 - rng.uniform());
      s += v;
    }
    for (double& v : w) v /= s;
    const double h = attention_entropy(w);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(t)) + 1e-12);
  }
}

TEST_CASE("spearman hand cases") {
  std::vector<double> inc = {1, 2, 3, 4, 5};
  std::vector<double> dec = {9, 7, 5, 3, 1};
  SpearmanResult inv = spearman(inc, dec);
  CHECK(!inv.degenerate);
  CHECK(inv.rho == doctest::Approx(-1.0));
  CHECK(spearman(inc, inc).rho == doctest::Approx(1.0));

  std::vector<double> flat = {2, 2, 2, 2, 2};
  SpearmanResult deg = spearman(flat, inc);
  CHECK(deg.degenerate);
  CHECK(deg.rho == 0.0);
}

TEST_CASE("spearman matches a brute-force rank-and-pearson oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x(100), y(100);
    for (std::size_t i = 0; i < 100; ++i) {
      x[i] = rng.uniform_int(0, 12);  // ties on purpose
      y[i] = rng.uniform_int(0, 9) + 0.5 * x[i];
    }
    SpearmanResult got = spearman(x, y);
    const double want = pearson(counting_ranks(x), counting_ranks(y));
    CHECK(got.rho == doctest::Approx(want).epsilon(1e-12));
    CHECK(got.rho >= -1.0);
    CHECK(got.rho <= 1.0);
  }
}

TEST_CASE("spearman is invariant under strictly monotone transforms") {
  Rng rng(7);
  std::vector<double> x(60), y(60), ex(60), y3(60);
  for (std::size_t i = 0; i < 60; ++i) {
    x[i] = rng.normal();
    y[i] = rng.normal() - 0.4 * x[i];
    ex[i] = std::exp(x[i]);
    y3[i] = y[i] * y[i] * y[i];
  }
  CHECK(spearman(x, y).rho == doctest::Approx(spearman(ex, y3).rho).epsilon(1e-12));
}

TEST_CASE("png and base64 helpers produce valid containers") {
  CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
  CHECK(base64_encode({'M', 'a'}) == "TWE=");
  CHECK(base64_encode({'M'}) == "TQ==");

  std::vector<unsigned char> gray(16 * 9, 128);
  std::vector<unsigned char> png = encode_png_gray8(16, 9, gray);
  REQUIRE(png.size() > 20);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  for (int i = 0; i < 8; ++i) CHECK(png[static_cast<std::size_t>(i)] == sig[i]);
  // IHDR width/height big-endian at offsets 16 and 20
  CHECK(png[19] == 16);
  CHECK(png[23] == 9);
  CHECK_THROWS_AS(encode_png_gray8(4, 4, gray), std::invalid_argument);
}

TEST_CASE("attention SVG: flat curve for uniform attention, well-formed XML") {
  nd::Tensor sheet({1, 20, 30});
  nd::Tensor spec({1, 12, 24});
  Rng rng(8);
  for (double& v : spec.values()) v = rng.uniform();
  std::vector<double> uniform(24, 1.0 / 24.0);

  fs::path out = fs::temp_directory_path() / "asr_att_uniform.svg";
  render_attention_svg(sheet, spec, uniform, out);
  std::string svg = read_file(out);
  CHECK(xml_well_formed(svg));
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("data:image/png;base64,") != std::string::npos);

  double x_min_y = 0.0;
  std::vector<double> ys = polyline_ys(svg, x_min_y);
  REQUIRE(ys.size() == 24);
  for (double y : ys) CHECK(y == doctest::Approx(ys[0]).epsilon(1e-12));
  fs::remove(out);
}

TEST_CASE("attention SVG: curve peak lands on the argmax column") {
  nd::Tensor sheet({1, 20, 30});
  nd::Tensor spec({1, 12, 48});
  for (double& v : spec.values()) v = 0.3;
  std::vector<double> att(48, 0.5 / 47.0);
  att[31] = 0.5;  // clear peak

  fs::path out = fs::temp_directory_path() / "asr_att_peak.svg";
  render_attention_svg(sheet, spec, att, out);
  std::string svg = read_file(out);
  CHECK(xml_well_formed(svg));
  double x_min_y = 0.0;
  polyline_ys(svg, x_min_y);
  const double margin = 12.0;
  CHECK(std::abs((x_min_y - margin) - (31 + 0.5)) <= 1.0);
  fs::remove(out);
}

TEST_CASE("entropy CSV layout") {
  EntropyReport report;
  report.context_frames = 42;
  report.records = {{"p0001:3", 5, 3.2, 1.0}, {"p0001:4", 9, 2.1, 1.0}};
  report.correlation = {-1.0, false};
  fs::path out = fs::temp_directory_path() / "asr_entropy.csv";
  write_entropy_csv(out, report, "config_hash=deadbeef seed=1");
  std::string text = read_file(out);
  CHECK(text.find("# config_hash=deadbeef seed=1\n") != std::string::npos);
  CHECK(text.find("pair_id,onset_count,entropy,rho\n") != std::string::npos);
  CHECK(text.find("p0001:3,5,3.2,1\n") != std::string::npos);
  fs::remove(out);
}
