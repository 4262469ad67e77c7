#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "asr/tensor.hpp"

namespace asr::nd {

enum class Mode { Train, Eval };

/// Running statistics for one batch-norm layer. Updated in Train mode,
/// read in Eval mode. Not part of the autodiff tape.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// ---- Table-1 layer vocabulary ----------------------------------------------
// Every op takes an optional Graph. With a non-null graph and at least one
// gradient-bearing input, the op records its backward step; with nullptr it
// runs inference-only. Spatial ops accept [C,H,W] or batched [N,C,H,W].

/// 3x3 convolution, zero-padding 1, stride 1. Output spatial size == input.
Tensor conv2d_3x3(Graph* g, const Tensor& x, const Tensor& kernels,
                  const Tensor& bias);

/// 1x1 convolution (per-pixel linear map across channels).
Tensor conv1x1(Graph* g, const Tensor& x, const Tensor& kernels,
               const Tensor& bias);

/// 2x2 non-overlapping max pooling; odd trailing row/column dropped.
/// Backward routes to the first maximum in row-major window order.
Tensor maxpool2(Graph* g, const Tensor& x);

/// Per-channel batch normalization over (N,H,W). Train mode normalizes with
/// batch statistics (eps 1e-5) and updates running stats (momentum 0.1,
/// unbiased variance); Eval mode applies the running statistics.
Tensor batchnorm2d(Graph* g, const Tensor& x, const Tensor& gamma,
                   const Tensor& beta, BatchNormState& state, Mode mode);

/// ELU, alpha = 1.
Tensor elu(Graph* g, const Tensor& x);

/// ELU computed in place over x's storage. Safe only when the producer of x
/// does not need x's values in its backward step (true for batchnorm2d, which
/// recomputes its normalized input from its own input).
Tensor elu_inplace(Graph* g, Tensor x);

/// y = W x + b. x may be [D] or batched [N,D].
Tensor dense(Graph* g, const Tensor& x, const Tensor& weight,
             const Tensor& bias);

/// Mean over H,W per channel: [.,C,H,W] -> [.,C].
Tensor global_avg_pool(Graph* g, const Tensor& x);

/// Shift-invariant softmax over the last axis of a [T] or [N,T] tensor.
Tensor softmax_1d(Graph* g, const Tensor& logits);

/// Multiplies spectrogram column t by a_t * T. spec is [1,F,T] or [N,1,F,T],
/// a is [T] or [N,T]. With uniform attention this is exactly the identity.
Tensor scale_frames(Graph* g, const Tensor& spec, const Tensor& a);

/// Linear interpolation of the last axis from L to out_len points
/// (endpoints aligned). x is [L] or [N,L].
Tensor upsample_linear_1d(Graph* g, const Tensor& x, std::size_t out_len);

/// Collapses all but the leading axis: [N,...] -> [N,D]. Data is shared.
Tensor flatten_batch(Graph* g, const Tensor& x);

/// Mean over channels and rows, keeping the last (time) axis:
/// [N,C,F,T] -> [N,T] (or [C,F,T] -> [T]).
Tensor mean_over_cf(Graph* g, const Tensor& x);

// ---- small algebra (composition and test oracles) --------------------------

Tensor add(Graph* g, const Tensor& a, const Tensor& b);
Tensor mul(Graph* g, const Tensor& a, const Tensor& b);
Tensor scale(Graph* g, const Tensor& a, double c);
Tensor vlog(Graph* g, const Tensor& a);
Tensor sum(Graph* g, const Tensor& a);  // -> rank-0 scalar

// ---- gradient checking ------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  /// 0 = check every coordinate; otherwise a deterministic random subset
  /// of at most this many coordinates per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

/// Central-difference check of d(f)/d(inputs). f must return a scalar tensor
/// built on the supplied graph. Returns the maximum relative error with
/// denominator max(1e-8, |analytic| + |numeric|).
double grad_check(
    const std::function<Tensor(Graph&, std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, GradCheckOptions opt = {});

}  // namespace asr::nd
