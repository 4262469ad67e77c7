#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "asr/ops.hpp"
#include "asr/tensor.hpp"

namespace asr {

/// Temporal context of the audio excerpt: 42, 84 or 168 frames (2.1/4.2/8.4 s
/// at 20 fps).
enum class Context { SC, MC, LC };

int context_frames(Context c);
std::string to_string(Context c);
Context parse_context(const std::string& s);

/// Embedding head: global average pooling (the BL1 baseline) or a dense
/// linear layer (BL2).
enum class Head { GAP, DENSE };
std::string to_string(Head h);
Head parse_head(const std::string& s);

struct ModelConfig {
  Context context = Context::SC;
  bool attention = false;
  Head head = Head::DENSE;
  int embed_dim = 32;
  int spec_bins = 92;
  int sheet_h = 160;
  int sheet_w = 200;

  int frames() const { return context_frames(context); }
  /// Short label like "BL2-LC+AT" used in report rows.
  std::string name() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Per-frame attention over an excerpt's T frames.
struct AttentionDistribution {
  std::vector<double> weights;  // length T, nonnegative, sums to 1
  std::size_t coarse_len = 0;   // logits before upsampling (T/16)

  /// Enforces the distribution invariants (tolerance 1e-6 on the sum).
  void validate() const;
};

/// The two embedding pathways plus the optional attention pathway, assembled
/// exactly as the architecture table: four [2x conv3x3+BN+ELU, maxpool2]
/// blocks with 24/48/96/96 maps, a linear 1x1 conv to 32 maps (+BN on the
/// embedding pathways), then the head. The attention pathway ends in a linear
/// 1x1 conv whose per-frame means are upsampled to T logits and softmaxed.
class Model {
 public:
  Model() = default;
  Model(const Model&) = delete;  // parameters alias; copy via snapshot()
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Deterministic build: He-style initialization for the conv trunks,
  /// 1/sqrt(fan_in) for the linear layers, zero biases. The attention output
  /// conv starts at zero, so a fresh model attends uniformly.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::map<std::string, nd::Tensor>& params() { return params_; }
  const std::map<std::string, nd::Tensor>& params() const { return params_; }
  std::map<std::string, nd::BatchNormState>& bn_states() { return bn_states_; }
  const std::map<std::string, nd::BatchNormState>& bn_states() const {
    return bn_states_;
  }
  nd::Tensor& param(const std::string& name);

  // Batched forwards. imgs: [N,1,160,200]; specs: [N,1,92,T].
  nd::Tensor sheet_forward(nd::Graph* g, const nd::Tensor& imgs, nd::Mode mode);
  struct AudioForward {
    nd::Tensor embedding;  // [N,32]
    nd::Tensor attention;  // [N,T]; undefined when attention is disabled
  };
  AudioForward audio_forward(nd::Graph* g, const nd::Tensor& specs, nd::Mode mode);
  /// Attention weights [N,T]. Throws when attention is disabled.
  nd::Tensor attention_weights(nd::Graph* g, const nd::Tensor& specs,
                               nd::Mode mode);

  // Single-sample eval-mode conveniences. spec: [1,92,T] or [92,T];
  // img: [1,160,200] or [160,200].
  Eigen::VectorXd embed_sheet(const nd::Tensor& img);
  std::pair<Eigen::VectorXd, std::optional<AttentionDistribution>> embed_audio(
      const nd::Tensor& spec);
  AttentionDistribution attention_forward(const nd::Tensor& spec);

  void zero_param_grads();
  std::size_t num_parameters() const;

  /// Deep copies of everything training mutates, for early-stopping snapshots.
  struct State {
    std::map<std::string, std::vector<double>> params;
    std::map<std::string, nd::BatchNormState> bn_states;
  };
  State snapshot() const;
  void restore(const State& state);

  /// Spatial size of a trunk's conv output before the head (four 2x2 pools).
  static std::pair<std::size_t, std::size_t> pooled_hw(std::size_t h,
                                                       std::size_t w);

 private:
  nd::Tensor trunk_forward(nd::Graph* g, nd::Tensor x, const std::string& prefix,
                           nd::Mode mode);
  nd::Tensor embed_pathway(nd::Graph* g, const nd::Tensor& x,
                           const std::string& prefix, nd::Mode mode);

  ModelConfig config_;
  std::map<std::string, nd::Tensor> params_;
  std::map<std::string, nd::BatchNormState> bn_states_;
};

}  // namespace asr
