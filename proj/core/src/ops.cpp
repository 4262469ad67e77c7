#include "asr/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "asr/errors.hpp"
#include "asr/rng.hpp"

namespace asr::nd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// Views a rank-3 tensor as a single-sample batch; rank-4 passes through.
Tensor as_batched(const Tensor& x, const char* op) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) {
    return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  }
  throw std::invalid_argument(std::string(op) + ": expected rank 3 or 4, got " +
                              shape_str(x.shape()));
}

Tensor as_rows(const Tensor& x, const char* op) {
  if (x.rank() == 2) return x;
  if (x.rank() == 1) return x.reshaped({1, x.dim(0)});
  throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " +
                              shape_str(x.shape()));
}

bool wants_grad(Graph* g, std::initializer_list<const Tensor*> ins) {
  if (!g) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Reused scratch for the unfolded convolution operands. Conv layers would
// otherwise allocate and fault in tens of megabytes per call.
double* conv_scratch(std::size_t n) {
  thread_local AlignedVector buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// im2col for a 3x3 kernel with zero-padding 1: row (ci*9 + kh*3 + kw) of the
// output holds the shifted image plane, columns indexed by h*W+w. Only the
// padding borders are zeroed; the interior is copied over whatever the
// scratch held before.
void im2col_3x3(const double* x, std::size_t C, std::size_t H, std::size_t W,
                double* col) {
  const std::size_t HW = H * W;
  for (std::size_t ci = 0; ci < C; ++ci) {
    const double* plane = x + ci * HW;
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        double* row = col + (ci * 9 + static_cast<std::size_t>(kh * 3 + kw)) * HW;
        const int dh = kh - 1, dw = kw - 1;
        const std::size_t h0 = dh < 0 ? 1 : 0;
        const std::size_t h1 = dh > 0 ? H - 1 : H;
        const std::size_t w0 = dw < 0 ? 1 : 0;
        const std::size_t w1 = dw > 0 ? W - 1 : W;
        if (h0 > 0) std::memset(row, 0, W * sizeof(double));
        if (h1 < H) std::memset(row + h1 * W, 0, W * sizeof(double));
        for (std::size_t h = h0; h < h1; ++h) {
          double* dst = row + h * W;
          if (w0 > 0) dst[0] = 0.0;
          if (w1 < W) dst[W - 1] = 0.0;
          std::memcpy(dst + w0, plane + (h + static_cast<std::size_t>(dh)) * W +
                                    (w0 + static_cast<std::size_t>(dw)),
                      (w1 - w0) * sizeof(double));
        }
      }
    }
  }
}

void col2im_3x3_add(const double* col, std::size_t C, std::size_t H,
                    std::size_t W, double* dx) {
  const std::size_t HW = H * W;
  for (std::size_t ci = 0; ci < C; ++ci) {
    double* plane = dx + ci * HW;
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        const double* row =
            col + (ci * 9 + static_cast<std::size_t>(kh * 3 + kw)) * HW;
        const int dh = kh - 1, dw = kw - 1;
        const std::size_t h0 = dh < 0 ? 1 : 0;
        const std::size_t h1 = dh > 0 ? H - 1 : H;
        const std::size_t w0 = dw < 0 ? 1 : 0;
        const std::size_t w1 = dw > 0 ? W - 1 : W;
        for (std::size_t h = h0; h < h1; ++h) {
          double* dst = plane + (h + static_cast<std::size_t>(dh)) * W +
                        (w0 + static_cast<std::size_t>(dw));
          const double* src = row + h * W + w0;
          for (std::size_t w = 0; w < w1 - w0; ++w) dst[w] += src[w];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_3x3(Graph* g, const Tensor& x, const Tensor& kernels,
                  const Tensor& bias) {
  Tensor xb = as_batched(x, "conv2d_3x3");
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3) {
    throw std::invalid_argument("conv2d_3x3: kernels must be [Cout,Cin,3,3], got " +
                                shape_str(kernels.shape()));
  }
  const std::size_t N = xb.dim(0), C = xb.dim(1), H = xb.dim(2), W = xb.dim(3);
  const std::size_t Cout = kernels.dim(0);
  if (kernels.dim(1) != C) {
    throw std::invalid_argument("conv2d_3x3: input has " + std::to_string(C) +
                                " channels, kernels expect " +
                                std::to_string(kernels.dim(1)));
  }
  if (bias.size() != Cout) {
    throw std::invalid_argument("conv2d_3x3: bias size mismatch");
  }

  Tensor out = Tensor::uninitialized({N, Cout, H, W});
  const std::size_t HW = H * W;
  CMapRM kmap(kernels.data(), Cout, C * 9);
  for (std::size_t n = 0; n < N; ++n) {
    double* scratch = conv_scratch(C * 9 * HW);
    im2col_3x3(xb.data() + n * C * HW, C, H, W, scratch);
    CMapRM col(scratch, C * 9, HW);
    MapRM omap(out.data() + n * Cout * HW, Cout, HW);
    omap.noalias() = kmap * col;
    for (std::size_t c = 0; c < Cout; ++c) omap.row(c).array() += bias.data()[c];
  }
  ensure_finite(out, "conv2d_3x3");

  if (wants_grad(g, {&x, &kernels, &bias})) {
    out.set_requires_grad();
    Tensor xc = xb, kc = kernels, bc = bias, oc = out;
    g->record("conv2d_3x3", [xc, kc, bc, oc, N, C, H, W, Cout]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      const std::size_t HW = H * W;
      const bool need_dx = xc.requires_grad();
      const bool need_dk = kc.requires_grad();
      const bool need_db = bc.requires_grad();
      for (std::size_t n = 0; n < N; ++n) {
        CMapRM gmap(gy + n * Cout * HW, Cout, HW);
        if (need_dk || need_dx) {
          CMapRM kmap(kc.data(), Cout, C * 9);
          double* scratch = conv_scratch(C * 9 * HW);
          if (need_dk) {
            im2col_3x3(xc.data() + n * C * HW, C, H, W, scratch);
            CMapRM col(scratch, C * 9, HW);
            MapRM dk(kc.grad(), Cout, C * 9);
            dk.noalias() += gmap * col.transpose();
          }
          if (need_dx) {
            // the unfolded activations are consumed; reuse the scratch
            MapRM dcol(scratch, C * 9, HW);
            dcol.noalias() = kmap.transpose() * gmap;
            col2im_3x3_add(scratch, C, H, W, xc.grad() + n * C * HW);
          }
        }
        if (need_db) {
          double* db = bc.grad();
          for (std::size_t c = 0; c < Cout; ++c) db[c] += gmap.row(c).sum();
        }
      }
    });
  }
  return x.rank() == 3 ? out.reshaped({Cout, H, W}) : out;
}

Tensor conv1x1(Graph* g, const Tensor& x, const Tensor& kernels,
               const Tensor& bias) {
  Tensor xb = as_batched(x, "conv1x1");
  if (kernels.rank() != 4 || kernels.dim(2) != 1 || kernels.dim(3) != 1) {
    throw std::invalid_argument("conv1x1: kernels must be [Cout,Cin,1,1], got " +
                                shape_str(kernels.shape()));
  }
  const std::size_t N = xb.dim(0), C = xb.dim(1), H = xb.dim(2), W = xb.dim(3);
  const std::size_t Cout = kernels.dim(0);
  if (kernels.dim(1) != C) {
    throw std::invalid_argument("conv1x1: channel mismatch");
  }
  if (bias.size() != Cout) {
    throw std::invalid_argument("conv1x1: bias size mismatch");
  }

  Tensor out = Tensor::uninitialized({N, Cout, H, W});
  const std::size_t HW = H * W;
  CMapRM kmap(kernels.data(), Cout, C);
  for (std::size_t n = 0; n < N; ++n) {
    CMapRM xmap(xb.data() + n * C * HW, C, HW);
    MapRM omap(out.data() + n * Cout * HW, Cout, HW);
    omap.noalias() = kmap * xmap;
    for (std::size_t c = 0; c < Cout; ++c) omap.row(c).array() += bias.data()[c];
  }
  ensure_finite(out, "conv1x1");

  if (wants_grad(g, {&x, &kernels, &bias})) {
    out.set_requires_grad();
    Tensor xc = xb, kc = kernels, bc = bias, oc = out;
    g->record("conv1x1", [xc, kc, bc, oc, N, C, H, W, Cout]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      const std::size_t HW = H * W;
      for (std::size_t n = 0; n < N; ++n) {
        CMapRM gmap(gy + n * Cout * HW, Cout, HW);
        CMapRM xmap(xc.data() + n * C * HW, C, HW);
        if (kc.requires_grad()) {
          MapRM dk(kc.grad(), Cout, C);
          dk.noalias() += gmap * xmap.transpose();
        }
        if (xc.requires_grad()) {
          CMapRM kmap(kc.data(), Cout, C);
          MapRM dx(xc.grad() + n * C * HW, C, HW);
          dx.noalias() += kmap.transpose() * gmap;
        }
        if (bc.requires_grad()) {
          double* db = bc.grad();
          for (std::size_t c = 0; c < Cout; ++c) db[c] += gmap.row(c).sum();
        }
      }
    });
  }
  return x.rank() == 3 ? out.reshaped({Cout, H, W}) : out;
}

Tensor maxpool2(Graph* g, const Tensor& x) {
  Tensor xb = as_batched(x, "maxpool2");
  const std::size_t N = xb.dim(0), C = xb.dim(1), H = xb.dim(2), W = xb.dim(3);
  if (H < 2 || W < 2) {
    throw std::invalid_argument("maxpool2: input " + shape_str(x.shape()) +
                                " smaller than 2 in a pooled dimension");
  }
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out = Tensor::uninitialized({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());

  const double* xd = xb.data();
  double* od = out.data();
  std::size_t oi = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * H * W;
      for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          // first maximum in row-major window order wins
          std::size_t best = base + (2 * ho) * W + 2 * wo;
          double bv = xd[best];
          const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
          for (std::size_t k = 0; k < 3; ++k) {
            if (xd[cand[k]] > bv) {
              bv = xd[cand[k]];
              best = cand[k];
            }
          }
          od[oi] = bv;
          (*argmax)[oi] = static_cast<std::uint32_t>(best);
          ++oi;
        }
      }
    }
  }
  ensure_finite(out, "maxpool2");

  if (wants_grad(g, {&x})) {
    out.set_requires_grad();
    Tensor xc = xb, oc = out;
    g->record("maxpool2", [xc, oc, argmax]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      double* dx = xc.grad();
      for (std::size_t i = 0; i < oc.size(); ++i) dx[(*argmax)[i]] += gy[i];
    });
  }
  return x.rank() == 3 ? out.reshaped({C, Ho, Wo}) : out;
}

Tensor batchnorm2d(Graph* g, const Tensor& x, const Tensor& gamma,
                   const Tensor& beta, BatchNormState& state, Mode mode) {
  Tensor xb = as_batched(x, "batchnorm2d");
  const std::size_t N = xb.dim(0), C = xb.dim(1), H = xb.dim(2), W = xb.dim(3);
  const std::size_t M = N * H * W;
  if (M == 0) throw std::invalid_argument("batchnorm2d: zero-size batch");
  if (gamma.size() != C || beta.size() != C) {
    throw std::invalid_argument("batchnorm2d: gamma/beta must have C elements");
  }
  if (state.running_mean.size() != C) {
    throw std::invalid_argument("batchnorm2d: state has wrong channel count");
  }
  if (mode == Mode::Train && M < 2) {
    throw std::invalid_argument("batchnorm2d: train mode needs N*H*W >= 2");
  }

  const std::size_t HW = H * W;
  auto mu = std::make_shared<std::vector<double>>(C);
  auto sigma = std::make_shared<std::vector<double>>(C);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xb.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          s += p[i];
          s2 += p[i] * p[i];
        }
      }
      const double m = s / static_cast<double>(M);
      const double var = std::max(0.0, s2 / static_cast<double>(M) - m * m);
      (*mu)[c] = m;
      (*sigma)[c] = std::sqrt(var + state.eps);
      const double unbiased =
          var * static_cast<double>(M) / static_cast<double>(M - 1);
      state.running_mean[c] =
          (1.0 - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] =
          (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      (*mu)[c] = state.running_mean[c];
      (*sigma)[c] = std::sqrt(state.running_var[c] + state.eps);
    }
  }

  Tensor out = Tensor::uninitialized({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xb.data() + (n * C + c) * HW;
      double* q = out.data() + (n * C + c) * HW;
      const double inv = 1.0 / (*sigma)[c];
      const double gam = gamma.data()[c], bet = beta.data()[c], m = (*mu)[c];
      for (std::size_t i = 0; i < HW; ++i) q[i] = gam * (p[i] - m) * inv + bet;
    }
  }
  ensure_finite(out, "batchnorm2d");

  if (wants_grad(g, {&x, &gamma, &beta})) {
    out.set_requires_grad();
    Tensor xc = xb, gc = gamma, bc = beta, oc = out;
    const bool train = mode == Mode::Train;
    g->record("batchnorm2d", [xc, gc, bc, oc, mu, sigma, N, C, HW, M, train]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      for (std::size_t c = 0; c < C; ++c) {
        const double inv = 1.0 / (*sigma)[c];
        const double m = (*mu)[c];
        double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
        for (std::size_t n = 0; n < N; ++n) {
          const double* gp = gy + (n * C + c) * HW;
          const double* xp = xc.data() + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            s1 += gp[i];
            s2 += gp[i] * (xp[i] - m) * inv;
          }
        }
        if (gc.requires_grad()) gc.grad()[c] += s2;
        if (bc.requires_grad()) bc.grad()[c] += s1;
        if (xc.requires_grad()) {
          const double gam = gc.data()[c];
          const double k = gam * inv;
          const double mm = static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n) {
            const double* gp = gy + (n * C + c) * HW;
            const double* xp = xc.data() + (n * C + c) * HW;
            double* dp = xc.grad() + (n * C + c) * HW;
            if (train) {
              for (std::size_t i = 0; i < HW; ++i) {
                const double xhat = (xp[i] - m) * inv;
                dp[i] += k * (gp[i] - s1 / mm - xhat * s2 / mm);
              }
            } else {
              for (std::size_t i = 0; i < HW; ++i) dp[i] += k * gp[i];
            }
          }
        }
      }
    });
  }
  return x.rank() == 3 ? out.reshaped({C, H, W}) : out;
}

namespace {

Tensor elu_impl(Graph* g, const Tensor& x, bool in_place) {
  Tensor out = in_place ? x : Tensor::uninitialized(x.shape());
  const double* xd = x.data();
  double* od = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    od[i] = xd[i] > 0.0 ? xd[i] : std::expm1(xd[i]);
  }
  ensure_finite(out, "elu");

  if (wants_grad(g, {&x})) {
    out.set_requires_grad();
    Tensor oc = out;
    if (in_place) {
      g->record("elu_", [oc]() mutable {
        // shared storage: transform dz into dx in place
        double* gd = const_cast<double*>(oc.grad_if());
        if (!gd) return;
        const double* z = oc.data();
        for (std::size_t i = 0; i < oc.size(); ++i) {
          gd[i] *= z[i] > 0.0 ? 1.0 : z[i] + 1.0;
        }
      });
    } else {
      Tensor xc = x;
      g->record("elu", [xc, oc]() mutable {
        const double* gz = oc.grad_if();
        if (!gz) return;
        const double* z = oc.data();
        double* dx = xc.grad();
        for (std::size_t i = 0; i < oc.size(); ++i) {
          dx[i] += gz[i] * (z[i] > 0.0 ? 1.0 : z[i] + 1.0);
        }
      });
    }
  }
  return out;
}

}  // namespace

Tensor elu(Graph* g, const Tensor& x) { return elu_impl(g, x, false); }
Tensor elu_inplace(Graph* g, Tensor x) { return elu_impl(g, x, true); }

Tensor dense(Graph* g, const Tensor& x, const Tensor& weight,
             const Tensor& bias) {
  Tensor xr = as_rows(x, "dense");
  if (weight.rank() != 2) {
    throw std::invalid_argument("dense: weight must be rank 2");
  }
  const std::size_t N = xr.dim(0), D = xr.dim(1), Dout = weight.dim(0);
  if (weight.dim(1) != D) {
    throw std::invalid_argument("dense: input dim " + std::to_string(D) +
                                " vs weight " + shape_str(weight.shape()));
  }
  if (bias.size() != Dout) {
    throw std::invalid_argument("dense: bias size mismatch");
  }

  Tensor out = Tensor::uninitialized({N, Dout});
  CMapRM xm(xr.data(), N, D), wm(weight.data(), Dout, D);
  MapRM om(out.data(), N, Dout);
  om.noalias() = xm * wm.transpose();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < Dout; ++c) om(n, c) += bias.data()[c];
  }
  ensure_finite(out, "dense");

  if (wants_grad(g, {&x, &weight, &bias})) {
    out.set_requires_grad();
    Tensor xc = xr, wc = weight, bc = bias, oc = out;
    g->record("dense", [xc, wc, bc, oc, N, D, Dout]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      CMapRM gm(gy, N, Dout);
      if (wc.requires_grad()) {
        CMapRM xm(xc.data(), N, D);
        MapRM dw(wc.grad(), Dout, D);
        dw.noalias() += gm.transpose() * xm;
      }
      if (xc.requires_grad()) {
        CMapRM wm(wc.data(), Dout, D);
        MapRM dx(xc.grad(), N, D);
        dx.noalias() += gm * wm;
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (std::size_t c = 0; c < Dout; ++c) db[c] += gm.col(c).sum();
      }
    });
  }
  return x.rank() == 1 ? out.reshaped({Dout}) : out;
}

Tensor global_avg_pool(Graph* g, const Tensor& x) {
  Tensor xb = as_batched(x, "global_avg_pool");
  const std::size_t N = xb.dim(0), C = xb.dim(1), HW = xb.dim(2) * xb.dim(3);
  Tensor out = Tensor::uninitialized({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xb.data() + (n * C + c) * HW;
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) s += p[i];
      out.at(n, c) = s / static_cast<double>(HW);
    }
  }
  ensure_finite(out, "global_avg_pool");

  if (wants_grad(g, {&x})) {
    out.set_requires_grad();
    Tensor xc = xb, oc = out;
    g->record("global_avg_pool", [xc, oc, N, C, HW]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      const double inv = 1.0 / static_cast<double>(HW);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          double* dp = xc.grad() + (n * C + c) * HW;
          const double gv = gy[n * C + c] * inv;
          for (std::size_t i = 0; i < HW; ++i) dp[i] += gv;
        }
      }
    });
  }
  return x.rank() == 3 ? out.reshaped({C}) : out;
}

Tensor softmax_1d(Graph* g, const Tensor& logits) {
  Tensor xr = as_rows(logits, "softmax_1d");
  const std::size_t N = xr.dim(0), T = xr.dim(1);
  if (T == 0) throw std::invalid_argument("softmax_1d: empty input");
  Tensor out = Tensor::uninitialized({N, T});
  for (std::size_t n = 0; n < N; ++n) {
    const double* p = xr.data() + n * T;
    double* q = out.data() + n * T;
    double mx = p[0];
    for (std::size_t t = 1; t < T; ++t) mx = std::max(mx, p[t]);
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      q[t] = std::exp(p[t] - mx);
      s += q[t];
    }
    for (std::size_t t = 0; t < T; ++t) q[t] /= s;
  }
  ensure_finite(out, "softmax_1d");

  if (wants_grad(g, {&logits})) {
    out.set_requires_grad();
    Tensor xc = xr, oc = out;
    g->record("softmax_1d", [xc, oc, N, T]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      for (std::size_t n = 0; n < N; ++n) {
        const double* a = oc.data() + n * T;
        const double* gp = gy + n * T;
        double* dx = xc.grad() + n * T;
        double dot = 0.0;
        for (std::size_t t = 0; t < T; ++t) dot += gp[t] * a[t];
        for (std::size_t t = 0; t < T; ++t) dx[t] += a[t] * (gp[t] - dot);
      }
    });
  }
  return logits.rank() == 1 ? out.reshaped({T}) : out;
}

Tensor scale_frames(Graph* g, const Tensor& spec, const Tensor& a) {
  Tensor sb = as_batched(spec, "scale_frames");
  Tensor ar = as_rows(a, "scale_frames");
  const std::size_t N = sb.dim(0), C = sb.dim(1), F = sb.dim(2), T = sb.dim(3);
  if (C != 1) {
    throw std::invalid_argument("scale_frames: expected one channel, got " +
                                shape_str(spec.shape()));
  }
  if (ar.dim(0) != N || ar.dim(1) != T) {
    throw std::invalid_argument(
        "scale_frames: attention length " + shape_str(a.shape()) +
        " does not match spectrogram " + shape_str(spec.shape()));
  }

  Tensor out = Tensor::uninitialized({N, 1, F, T});
  const double tt = static_cast<double>(T);
  for (std::size_t n = 0; n < N; ++n) {
    const double* av = ar.data() + n * T;
    const double* sp = sb.data() + n * F * T;
    double* op = out.data() + n * F * T;
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < T; ++t) {
        op[f * T + t] = sp[f * T + t] * (av[t] * tt);
      }
    }
  }
  ensure_finite(out, "scale_frames");

  if (wants_grad(g, {&spec, &a})) {
    out.set_requires_grad();
    Tensor sc = sb, ac = ar, oc = out;
    g->record("scale_frames", [sc, ac, oc, N, F, T, tt]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      for (std::size_t n = 0; n < N; ++n) {
        const double* av = ac.data() + n * T;
        const double* sp = sc.data() + n * F * T;
        const double* gp = gy + n * F * T;
        if (sc.requires_grad()) {
          double* ds = sc.grad() + n * F * T;
          for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t t = 0; t < T; ++t) {
              ds[f * T + t] += gp[f * T + t] * (av[t] * tt);
            }
          }
        }
        if (ac.requires_grad()) {
          double* da = ac.grad() + n * T;
          for (std::size_t t = 0; t < T; ++t) {
            double s = 0.0;
            for (std::size_t f = 0; f < F; ++f) s += gp[f * T + t] * sp[f * T + t];
            da[t] += s * tt;
          }
        }
      }
    });
  }
  return spec.rank() == 3 ? out.reshaped({1, F, T}) : out;
}

Tensor upsample_linear_1d(Graph* g, const Tensor& x, std::size_t out_len) {
  Tensor xr = as_rows(x, "upsample_linear_1d");
  const std::size_t N = xr.dim(0), L = xr.dim(1);
  if (L == 0 || out_len == 0) {
    throw std::invalid_argument("upsample_linear_1d: empty axis");
  }
  // endpoint-aligned positions; lo/hi indices and weights are shared by rows
  auto lo = std::make_shared<std::vector<std::size_t>>(out_len);
  auto whi = std::make_shared<std::vector<double>>(out_len);
  for (std::size_t t = 0; t < out_len; ++t) {
    double pos = (L == 1 || out_len == 1)
                     ? 0.0
                     : static_cast<double>(t) * static_cast<double>(L - 1) /
                           static_cast<double>(out_len - 1);
    std::size_t i = std::min(static_cast<std::size_t>(pos), L - 1);
    if (i + 1 >= L) i = L - 1;
    (*lo)[t] = i;
    (*whi)[t] = i + 1 < L ? pos - static_cast<double>(i) : 0.0;
  }

  Tensor out = Tensor::uninitialized({N, out_len});
  for (std::size_t n = 0; n < N; ++n) {
    const double* p = xr.data() + n * L;
    double* q = out.data() + n * out_len;
    for (std::size_t t = 0; t < out_len; ++t) {
      const std::size_t i = (*lo)[t];
      const double w = (*whi)[t];
      q[t] = (1.0 - w) * p[i] + (i + 1 < L ? w * p[i + 1] : 0.0);
    }
  }
  ensure_finite(out, "upsample_linear_1d");

  if (wants_grad(g, {&x})) {
    out.set_requires_grad();
    Tensor xc = xr, oc = out;
    g->record("upsample_linear_1d", [xc, oc, lo, whi, N, L, out_len]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      for (std::size_t n = 0; n < N; ++n) {
        double* dx = xc.grad() + n * L;
        const double* gp = gy + n * out_len;
        for (std::size_t t = 0; t < out_len; ++t) {
          const std::size_t i = (*lo)[t];
          const double w = (*whi)[t];
          dx[i] += (1.0 - w) * gp[t];
          if (i + 1 < L) dx[i + 1] += w * gp[t];
        }
      }
    });
  }
  return x.rank() == 1 ? out.reshaped({out_len}) : out;
}

Tensor flatten_batch(Graph*, const Tensor& x) {
  if (x.rank() < 2) {
    throw std::invalid_argument("flatten_batch: expected rank >= 2");
  }
  std::size_t rest = 1;
  for (std::size_t i = 1; i < x.rank(); ++i) rest *= x.dim(i);
  return x.reshaped({x.dim(0), rest});
}

Tensor mean_over_cf(Graph* g, const Tensor& x) {
  Tensor xb = as_batched(x, "mean_over_cf");
  const std::size_t N = xb.dim(0), C = xb.dim(1), F = xb.dim(2), T = xb.dim(3);
  Tensor out = Tensor::uninitialized({N, T});
  const double inv = 1.0 / static_cast<double>(C * F);
  for (std::size_t n = 0; n < N; ++n) {
    double* q = out.data() + n * T;
    for (std::size_t t = 0; t < T; ++t) q[t] = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t f = 0; f < F; ++f) {
        const double* p = xb.data() + ((n * C + c) * F + f) * T;
        for (std::size_t t = 0; t < T; ++t) q[t] += p[t];
      }
    }
    for (std::size_t t = 0; t < T; ++t) q[t] *= inv;
  }
  ensure_finite(out, "mean_over_cf");

  if (wants_grad(g, {&x})) {
    out.set_requires_grad();
    Tensor xc = xb, oc = out;
    g->record("mean_over_cf", [xc, oc, N, C, F, T, inv]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      for (std::size_t n = 0; n < N; ++n) {
        const double* gp = gy + n * T;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t f = 0; f < F; ++f) {
            double* dp = xc.grad() + ((n * C + c) * F + f) * T;
            for (std::size_t t = 0; t < T; ++t) dp[t] += gp[t] * inv;
          }
        }
      }
    });
  }
  return x.rank() == 3 ? out.reshaped({T}) : out;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(Graph* g, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = a.data()[i] + b.data()[i];
  }
  ensure_finite(out, "add");
  if (wants_grad(g, {&a, &b})) {
    out.set_requires_grad();
    Tensor ac = a, bc = b, oc = out;
    g->record("add", [ac, bc, oc]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      if (ac.requires_grad()) ac.accumulate_grad({gy, oc.size()});
      if (bc.requires_grad()) bc.accumulate_grad({gy, oc.size()});
    });
  }
  return out;
}

Tensor mul(Graph* g, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = a.data()[i] * b.data()[i];
  }
  ensure_finite(out, "mul");
  if (wants_grad(g, {&a, &b})) {
    out.set_requires_grad();
    Tensor ac = a, bc = b, oc = out;
    g->record("mul", [ac, bc, oc]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      if (ac.requires_grad()) {
        double* da = ac.grad();
        for (std::size_t i = 0; i < oc.size(); ++i) da[i] += gy[i] * bc.data()[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (std::size_t i = 0; i < oc.size(); ++i) db[i] += gy[i] * ac.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(Graph* g, const Tensor& a, double c) {
  Tensor out = Tensor::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  ensure_finite(out, "scale");
  if (wants_grad(g, {&a})) {
    out.set_requires_grad();
    Tensor ac = a, oc = out;
    g->record("scale", [ac, oc, c]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      double* da = ac.grad();
      for (std::size_t i = 0; i < oc.size(); ++i) da[i] += gy[i] * c;
    });
  }
  return out;
}

Tensor vlog(Graph* g, const Tensor& a) {
  Tensor out = Tensor::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::log(a.data()[i]);
  ensure_finite(out, "vlog");
  if (wants_grad(g, {&a})) {
    out.set_requires_grad();
    Tensor ac = a, oc = out;
    g->record("vlog", [ac, oc]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      double* da = ac.grad();
      for (std::size_t i = 0; i < oc.size(); ++i) da[i] += gy[i] / ac.data()[i];
    });
  }
  return out;
}

Tensor sum(Graph* g, const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  Tensor out = Tensor::scalar(s);
  ensure_finite(out, "sum");
  if (wants_grad(g, {&a})) {
    out.set_requires_grad();
    Tensor ac = a, oc = out;
    g->record("sum", [ac, oc]() mutable {
      const double* gy = oc.grad_if();
      if (!gy) return;
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) da[i] += gy[0];
    });
  }
  return out;
}

double grad_check(
    const std::function<Tensor(Graph&, std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, GradCheckOptions opt) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    Tensor loss = f(g, inputs);
    if (loss.size() != 1) {
      throw std::invalid_argument("grad_check: f must return a scalar");
    }
    g.backward(loss);
    for (Tensor& t : inputs) {
      const double* gp = t.grad_if();
      analytic.emplace_back(gp ? std::vector<double>(gp, gp + t.size())
                               : std::vector<double>(t.size(), 0.0));
    }
  }

  auto eval = [&]() {
    Graph g;
    return f(g, inputs).item();
  };

  Rng rng(opt.seed);
  double max_rel = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_input == 0 || t.size() <= opt.max_coords_per_input) {
      coords.resize(t.size());
      for (std::size_t c = 0; c < t.size(); ++c) coords[c] = c;
    } else {
      for (std::size_t c = 0; c < opt.max_coords_per_input; ++c) {
        coords.push_back(static_cast<std::size_t>(
            rng.next_u64() % static_cast<std::uint64_t>(t.size())));
      }
    }
    for (std::size_t c : coords) {
      const double orig = t.data()[c];
      t.data()[c] = orig + opt.eps;
      const double fp = eval();
      t.data()[c] = orig - opt.eps;
      const double fm = eval();
      t.data()[c] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[i][c];
      const double rel =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace asr::nd
