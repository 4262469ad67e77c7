#include "asr/model.hpp"

#include <cmath>
#include <stdexcept>

#include "asr/errors.hpp"
#include "asr/rng.hpp"

namespace asr {

int context_frames(Context c) {
  switch (c) {
    case Context::SC: return 42;
    case Context::MC: return 84;
    case Context::LC: return 168;
  }
  throw std::invalid_argument("bad context");
}

std::string to_string(Context c) {
  switch (c) {
    case Context::SC: return "SC";
    case Context::MC: return "MC";
    case Context::LC: return "LC";
  }
  return "?";
}

Context parse_context(const std::string& s) {
  if (s == "SC") return Context::SC;
  if (s == "MC") return Context::MC;
  if (s == "LC") return Context::LC;
  throw ConfigError("unknown context '" + s + "' (expected SC, MC or LC)");
}

std::string to_string(Head h) { return h == Head::GAP ? "GAP" : "DENSE"; }

Head parse_head(const std::string& s) {
  if (s == "GAP") return Head::GAP;
  if (s == "DENSE") return Head::DENSE;
  throw ConfigError("unknown head '" + s + "' (expected GAP or DENSE)");
}

std::string ModelConfig::name() const {
  std::string n = head == Head::GAP ? "BL1-" : "BL2-";
  n += asr::to_string(context);
  if (attention) n += "+AT";
  return n;
}

void ModelConfig::validate() const {
  if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
  if (spec_bins <= 16) throw ConfigError("spec_bins too small for four pools");
  if (sheet_h <= 16 || sheet_w <= 16) throw ConfigError("sheet size too small");
  if (frames() < 32) throw ConfigError("context too short for four pools");
}

void AttentionDistribution::validate() const {
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) {
      throw NumericError("attention weight negative or NaN");
    }
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-6) {
    throw NumericError("attention weights sum to " + std::to_string(s));
  }
}

namespace {

constexpr int kTrunkChannels[4] = {24, 48, 96, 96};

nd::Tensor init_tensor(nd::Shape shape, double stddev, std::uint64_t seed,
                       const std::string& name) {
  nd::Tensor t(std::move(shape));
  if (stddev > 0.0) {
    Rng rng(mix_seed(seed, name));
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
  }
  t.set_requires_grad();
  return t;
}

nd::Tensor as_image_batch(const nd::Tensor& x, std::size_t h, std::size_t w,
                          const char* what) {
  nd::Tensor b;
  if (x.rank() == 2) {
    b = x.reshaped({1, 1, x.dim(0), x.dim(1)});
  } else if (x.rank() == 3) {
    b = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  } else if (x.rank() == 4) {
    b = x;
  } else {
    throw std::invalid_argument(std::string(what) + ": bad rank " +
                                nd::shape_str(x.shape()));
  }
  if (b.dim(1) != 1 || b.dim(2) != h || b.dim(3) != w) {
    throw std::invalid_argument(std::string(what) + ": expected [N,1," +
                                std::to_string(h) + "," + std::to_string(w) +
                                "], got " + nd::shape_str(x.shape()));
  }
  return b;
}

Eigen::VectorXd row_to_vector(const nd::Tensor& m, std::size_t row) {
  Eigen::VectorXd v(m.dim(1));
  for (std::size_t j = 0; j < m.dim(1); ++j) {
    v[static_cast<Eigen::Index>(j)] = m.at(row, j);
  }
  return v;
}

}  // namespace

std::pair<std::size_t, std::size_t> Model::pooled_hw(std::size_t h,
                                                     std::size_t w) {
  for (int i = 0; i < 4; ++i) {
    h /= 2;
    w /= 2;
  }
  return {h, w};
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;

  auto add_trunk = [&](const std::string& prefix, int in_channels) {
    int cin = in_channels;
    for (int blk = 0; blk < 4; ++blk) {
      const int cout = kTrunkChannels[blk];
      for (int conv = 1; conv <= 2; ++conv) {
        const int ci = conv == 1 ? cin : cout;
        const std::string base =
            prefix + ".b" + std::to_string(blk + 1) + ".conv" + std::to_string(conv);
        const double stddev = std::sqrt(2.0 / (9.0 * ci));  // He, ELU trunk
        m.params_[base + ".w"] = init_tensor(
            {static_cast<std::size_t>(cout), static_cast<std::size_t>(ci), 3, 3},
            stddev, seed, base + ".w");
        m.params_[base + ".b"] =
            init_tensor({static_cast<std::size_t>(cout)}, 0.0, seed, base + ".b");
        const std::string bn =
            prefix + ".b" + std::to_string(blk + 1) + ".bn" + std::to_string(conv);
        m.params_[bn + ".gamma"] =
            nd::Tensor::full({static_cast<std::size_t>(cout)}, 1.0)
                .set_requires_grad();
        m.params_[bn + ".beta"] =
            init_tensor({static_cast<std::size_t>(cout)}, 0.0, seed, bn + ".beta");
        m.bn_states_.emplace(bn, nd::BatchNormState(cout));
      }
      cin = cout;
    }
  };

  const std::size_t ed = static_cast<std::size_t>(config.embed_dim);
  auto add_embed_head = [&](const std::string& prefix, std::size_t out_h,
                            std::size_t out_w) {
    const std::string ec = prefix + ".embed";
    m.params_[ec + ".w"] = init_tensor({ed, 96, 1, 1}, std::sqrt(1.0 / 96.0),
                                       seed, ec + ".w");
    m.params_[ec + ".b"] = init_tensor({ed}, 0.0, seed, ec + ".b");
    const std::string bn = prefix + ".embed_bn";
    m.params_[bn + ".gamma"] = nd::Tensor::full({ed}, 1.0).set_requires_grad();
    m.params_[bn + ".beta"] = init_tensor({ed}, 0.0, seed, bn + ".beta");
    m.bn_states_.emplace(bn, nd::BatchNormState(config.embed_dim));
    if (config.head == Head::DENSE) {
      const std::size_t d = ed * out_h * out_w;
      m.params_[prefix + ".head.w"] =
          init_tensor({ed, d}, std::sqrt(1.0 / static_cast<double>(d)), seed,
                      prefix + ".head.w");
      m.params_[prefix + ".head.b"] =
          init_tensor({ed}, 0.0, seed, prefix + ".head.b");
    }
  };

  add_trunk("sheet", 1);
  auto [sh, sw] = pooled_hw(config.sheet_h, config.sheet_w);
  add_embed_head("sheet", sh, sw);

  add_trunk("audio", 1);
  auto [ah, aw] = pooled_hw(config.spec_bins, config.frames());
  add_embed_head("audio", ah, aw);

  if (config.attention) {
    add_trunk("attn", 1);
    // zero start: constant logits, uniform attention, identity frame scaling
    m.params_["attn.out.w"] = init_tensor({ed, 96, 1, 1}, 0.0, seed, "attn.out.w");
    m.params_["attn.out.b"] = init_tensor({ed}, 0.0, seed, "attn.out.b");
  }
  return m;
}

nd::Tensor& Model::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw std::invalid_argument("unknown parameter '" + name + "'");
  }
  return it->second;
}

nd::Tensor Model::trunk_forward(nd::Graph* g, nd::Tensor x,
                                const std::string& prefix, nd::Mode mode) {
  for (int blk = 1; blk <= 4; ++blk) {
    for (int conv = 1; conv <= 2; ++conv) {
      const std::string base =
          prefix + ".b" + std::to_string(blk) + ".conv" + std::to_string(conv);
      const std::string bn =
          prefix + ".b" + std::to_string(blk) + ".bn" + std::to_string(conv);
      x = nd::conv2d_3x3(g, x, param(base + ".w"), param(base + ".b"));
      x = nd::batchnorm2d(g, x, param(bn + ".gamma"), param(bn + ".beta"),
                          bn_states_.at(bn), mode);
      x = nd::elu_inplace(g, x);
    }
    x = nd::maxpool2(g, x);
  }
  return x;
}

nd::Tensor Model::embed_pathway(nd::Graph* g, const nd::Tensor& x,
                                const std::string& prefix, nd::Mode mode) {
  nd::Tensor t = trunk_forward(g, x, prefix, mode);
  t = nd::conv1x1(g, t, param(prefix + ".embed.w"), param(prefix + ".embed.b"));
  const std::string bn = prefix + ".embed_bn";
  t = nd::batchnorm2d(g, t, param(bn + ".gamma"), param(bn + ".beta"),
                      bn_states_.at(bn), mode);
  if (config_.head == Head::DENSE) {
    return nd::dense(g, nd::flatten_batch(g, t), param(prefix + ".head.w"),
                     param(prefix + ".head.b"));
  }
  return nd::global_avg_pool(g, t);
}

nd::Tensor Model::sheet_forward(nd::Graph* g, const nd::Tensor& imgs,
                                nd::Mode mode) {
  nd::Tensor x = as_image_batch(imgs, config_.sheet_h, config_.sheet_w, "sheet");
  return embed_pathway(g, x, "sheet", mode);
}

nd::Tensor Model::attention_weights(nd::Graph* g, const nd::Tensor& specs,
                                    nd::Mode mode) {
  if (!config_.attention) {
    throw std::logic_error("attention_weights: attention disabled in config");
  }
  nd::Tensor x = as_image_batch(specs, config_.spec_bins, config_.frames(),
                                "attention");
  nd::Tensor t = trunk_forward(g, x, "attn", mode);
  t = nd::conv1x1(g, t, param("attn.out.w"), param("attn.out.b"));
  nd::Tensor logits = nd::mean_over_cf(g, t);  // [N, T/16]
  nd::Tensor up = nd::upsample_linear_1d(
      g, logits, static_cast<std::size_t>(config_.frames()));
  return nd::softmax_1d(g, up);
}

Model::AudioForward Model::audio_forward(nd::Graph* g, const nd::Tensor& specs,
                                         nd::Mode mode) {
  nd::Tensor x =
      as_image_batch(specs, config_.spec_bins, config_.frames(), "audio");
  AudioForward out;
  if (config_.attention) {
    out.attention = attention_weights(g, x, mode);
    x = nd::scale_frames(g, x, out.attention);
  }
  out.embedding = embed_pathway(g, x, "audio", mode);
  return out;
}

Eigen::VectorXd Model::embed_sheet(const nd::Tensor& img) {
  nd::Tensor e = sheet_forward(nullptr, img, nd::Mode::Eval);
  return row_to_vector(e.rank() == 1 ? e.reshaped({1, e.dim(0)}) : e, 0);
}

std::pair<Eigen::VectorXd, std::optional<AttentionDistribution>>
Model::embed_audio(const nd::Tensor& spec) {
  AudioForward fwd = audio_forward(nullptr, spec, nd::Mode::Eval);
  nd::Tensor e = fwd.embedding.rank() == 1
                     ? fwd.embedding.reshaped({1, fwd.embedding.dim(0)})
                     : fwd.embedding;
  std::optional<AttentionDistribution> att;
  if (config_.attention) {
    AttentionDistribution d;
    nd::Tensor a = fwd.attention.rank() == 1
                       ? fwd.attention.reshaped({1, fwd.attention.dim(0)})
                       : fwd.attention;
    d.weights.assign(a.data(), a.data() + a.dim(1));
    d.coarse_len = pooled_hw(config_.spec_bins, config_.frames()).second;
    d.validate();
    att = std::move(d);
  }
  return {row_to_vector(e, 0), std::move(att)};
}

AttentionDistribution Model::attention_forward(const nd::Tensor& spec) {
  nd::Tensor a = attention_weights(nullptr, spec, nd::Mode::Eval);
  nd::Tensor ar = a.rank() == 1 ? a.reshaped({1, a.dim(0)}) : a;
  AttentionDistribution d;
  d.weights.assign(ar.data(), ar.data() + ar.dim(1));
  d.coarse_len = pooled_hw(config_.spec_bins, config_.frames()).second;
  d.validate();
  return d;
}

void Model::zero_param_grads() {
  for (auto& [name, p] : params_) p.zero_grad();
}

std::size_t Model::num_parameters() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.size();
  return n;
}

Model::State Model::snapshot() const {
  State s;
  for (const auto& [name, p] : params_) {
    s.params.emplace(name, std::vector<double>(p.data(), p.data() + p.size()));
  }
  s.bn_states = bn_states_;
  return s;
}

void Model::restore(const State& state) {
  for (auto& [name, p] : params_) {
    auto it = state.params.find(name);
    if (it == state.params.end() || it->second.size() != p.size()) {
      throw std::invalid_argument("restore: state mismatch for '" + name + "'");
    }
    std::copy(it->second.begin(), it->second.end(), p.data());
  }
  bn_states_ = state.bn_states;
}

}  // namespace asr
