#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "kd/core/graph.hpp"
#include "kd/core/parallel.hpp"
#include "kd/core/tensor.hpp"

namespace kd {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using CMatMap = Eigen::Map<const RowMat<S>>;

// Closed-form spatial law shared by convolutions and pooling.
inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Unfolds one image into a (Cin*Kh*Kw) x (Ho*Wo) row-major patch matrix.
// Every cell is written, padding cells with zero.
template <typename S>
void im2col(const S* x, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, S* col) {
  const int64_t plane = h * w;
  for (int64_t c = 0; c < cin; ++c) {
    const S* xc = x + c * plane;
    for (int64_t p = 0; p < kh; ++p) {
      for (int64_t q = 0; q < kw; ++q) {
        S* row = col + ((c * kh + p) * kw + q) * (ho * wo);
        for (int64_t oh = 0; oh < ho; ++oh) {
          const int64_t ih = oh * stride + p - pad;
          S* dst = row + oh * wo;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + wo, S(0));
            continue;
          }
          const S* src = xc + ih * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            const int64_t iw = ow * stride + q - pad;
            dst[ow] = (iw >= 0 && iw < w) ? src[iw] : S(0);
          }
        }
      }
    }
  }
}

// Scatter-adds a patch-matrix gradient back onto one image.
template <typename S>
void col2im_add(const S* col, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, S* gx) {
  const int64_t plane = h * w;
  for (int64_t c = 0; c < cin; ++c) {
    S* gc = gx + c * plane;
    for (int64_t p = 0; p < kh; ++p) {
      for (int64_t q = 0; q < kw; ++q) {
        const S* row = col + ((c * kh + p) * kw + q) * (ho * wo);
        for (int64_t oh = 0; oh < ho; ++oh) {
          const int64_t ih = oh * stride + p - pad;
          if (ih < 0 || ih >= h) continue;
          S* dst = gc + ih * w;
          const S* src = row + oh * wo;
          for (int64_t ow = 0; ow < wo; ++ow) {
            const int64_t iw = ow * stride + q - pad;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D cross-correlation. weights (Cout, Cin, Kh, Kw); optional bias (Cout).
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, int64_t stride, int64_t pad) {
  const Tensor<S>& X = x->value;
  const Tensor<S>& W = w->value;
  if (X.shape.rank() != 4) throw ShapeError("conv2d: input must be rank 4, got " + X.shape.str());
  if (W.shape.rank() != 4) throw ShapeError("conv2d: weights must be rank 4, got " + W.shape.str());
  const int64_t n = X.shape[0], cin = X.shape[1], h = X.shape[2], wd = X.shape[3];
  const int64_t cout = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  if (W.shape[1] != cin)
    throw ShapeError("conv2d: weight expects " + std::to_string(W.shape[1]) + " input channels, input has " +
                     std::to_string(cin));
  if (bias && bias->value.numel() != cout) throw ShapeError("conv2d: bias length must equal Cout");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  const int64_t ho = conv_out_dim(h, kh, stride, pad), wo = conv_out_dim(wd, kw, stride, pad);
  if (ho < 1 || wo < 1)
    throw ConfigError("conv2d: non-positive output dims for input " + X.shape.str());

  const int64_t K = cin * kh * kw, M = ho * wo;
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
  const bool rec = grad_enabled() && (x->requires_grad || w->requires_grad || (bias && bias->requires_grad));

  Tensor<S> out({n, cout, ho, wo});
  // Patch matrices are cached for the backward pass; pointwise convolutions
  // use the input itself as the patch matrix.
  std::shared_ptr<std::vector<S>> cols;
  if (!pointwise && rec) cols = std::make_shared<std::vector<S>>(static_cast<size_t>(n * K * M));

  CMatMap<S> wm(W.ptr(), cout, K);
  parallel_for_chunks(n, [&](int64_t, int64_t b, int64_t e) {
    std::vector<S> scratch;
    if (!pointwise && !rec) scratch.resize(static_cast<size_t>(K * M));
    for (int64_t i = b; i < e; ++i) {
      const S* xi = X.ptr() + i * cin * h * wd;
      MatMap<S> om(out.ptr() + i * cout * M, cout, M);
      if (pointwise) {
        om.noalias() = wm * CMatMap<S>(xi, K, M);
      } else {
        S* col = rec ? cols->data() + i * K * M : scratch.data();
        detail::im2col(xi, cin, h, wd, kh, kw, stride, pad, ho, wo, col);
        om.noalias() = wm * CMatMap<S>(col, K, M);
      }
      if (bias) {
        const S* bp = bias->value.ptr();
        S* op = out.ptr() + i * cout * M;
        for (int64_t c = 0; c < cout; ++c)
          for (int64_t s = 0; s < M; ++s) op[c * M + s] += bp[c];
      }
    }
  });

  std::vector<Var<S>> parents{x, w};
  if (bias) parents.push_back(bias);
  auto back = [stride, pad, cols, pointwise, n, cin, h, wd, cout, kh, kw, ho, wo, K,
               M](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    Node<S>& wn = *self.parents[1];
    Node<S>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const Tensor<S>& G = self.grad;
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      S* gb = bn->grad.ptr();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < cout; ++c) {
          const S* gp = G.ptr() + (i * cout + c) * M;
          S acc(0);
          for (int64_t s = 0; s < M; ++s) acc += gp[s];
          gb[c] += acc;
        }
    }
    if (wn.requires_grad) {
      const int64_t chunks = parallel_chunk_count(n);
      std::vector<Tensor<S>> partial(static_cast<size_t>(chunks), Tensor<S>(wn.value.shape));
      parallel_for_chunks(n, [&](int64_t c, int64_t b, int64_t e) {
        MatMap<S> gw(partial[static_cast<size_t>(c)].ptr(), cout, K);
        for (int64_t i = b; i < e; ++i) {
          CMatMap<S> gm(G.ptr() + i * cout * M, cout, M);
          const S* col = pointwise ? xn.value.ptr() + i * K * M : cols->data() + i * K * M;
          gw.noalias() += gm * CMatMap<S>(col, K, M).transpose();
        }
      });
      wn.ensure_grad();
      for (const auto& p : partial) accumulate_grad(wn, p);
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      CMatMap<S> wm(wn.value.ptr(), cout, K);
      parallel_for_chunks(n, [&](int64_t, int64_t b, int64_t e) {
        std::vector<S> gcol;
        if (!pointwise) gcol.resize(static_cast<size_t>(K * M));
        for (int64_t i = b; i < e; ++i) {
          CMatMap<S> gm(G.ptr() + i * cout * M, cout, M);
          if (pointwise) {
            MatMap<S> gx(xn.grad.ptr() + i * K * M, K, M);
            gx.noalias() += wm.transpose() * gm;
          } else {
            MatMap<S> gc(gcol.data(), K, M);
            gc.noalias() = wm.transpose() * gm;
            detail::col2im_add(gcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                               xn.grad.ptr() + i * cin * h * wd);
          }
        }
      });
    }
  };
  return op_node(std::move(out), std::move(parents), std::move(back));
}

// Per-channel convolution (multiplier 1). weights (C, 1, Kh, Kw).
template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& w, int64_t stride, int64_t pad) {
  const Tensor<S>& X = x->value;
  const Tensor<S>& W = w->value;
  if (X.shape.rank() != 4) throw ShapeError("depthwise_conv2d: input must be rank 4");
  if (W.shape.rank() != 4 || W.shape[1] != 1)
    throw ShapeError("depthwise_conv2d: weights must be (C,1,Kh,Kw), got " + W.shape.str());
  const int64_t n = X.shape[0], c = X.shape[1], h = X.shape[2], wd = X.shape[3];
  const int64_t kh = W.shape[2], kw = W.shape[3];
  if (W.shape[0] != c)
    throw ShapeError("depthwise_conv2d: weight channels " + std::to_string(W.shape[0]) +
                     " != input channels " + std::to_string(c));
  if (stride < 1 || pad < 0) throw ConfigError("depthwise_conv2d: bad stride/pad");
  const int64_t ho = conv_out_dim(h, kh, stride, pad), wo = conv_out_dim(wd, kw, stride, pad);
  if (ho < 1 || wo < 1) throw ConfigError("depthwise_conv2d: non-positive output dims");

  Tensor<S> out({n, c, ho, wo});
  parallel_for_chunks(n, [&](int64_t, int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const S* xp = X.ptr() + (i * c + ch) * h * wd;
        const S* wp = W.ptr() + ch * kh * kw;
        S* op = out.ptr() + (i * c + ch) * ho * wo;
        for (int64_t oh = 0; oh < ho; ++oh) {
          for (int64_t ow = 0; ow < wo; ++ow) {
            S acc(0);
            for (int64_t p = 0; p < kh; ++p) {
              const int64_t ih = oh * stride + p - pad;
              if (ih < 0 || ih >= h) continue;
              for (int64_t q = 0; q < kw; ++q) {
                const int64_t iw = ow * stride + q - pad;
                if (iw >= 0 && iw < wd) acc += xp[ih * wd + iw] * wp[p * kw + q];
              }
            }
            op[oh * wo + ow] = acc;
          }
        }
      }
    }
  });

  auto back = [stride, pad, n, c, h, wd, kh, kw, ho, wo](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    Node<S>& wn = *self.parents[1];
    const Tensor<S>& G = self.grad;
    if (wn.requires_grad) {
      const int64_t chunks = parallel_chunk_count(n);
      std::vector<Tensor<S>> partial(static_cast<size_t>(chunks), Tensor<S>(wn.value.shape));
      parallel_for_chunks(n, [&](int64_t ck, int64_t b, int64_t e) {
        S* gw = partial[static_cast<size_t>(ck)].ptr();
        for (int64_t i = b; i < e; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            const S* xp = xn.value.ptr() + (i * c + ch) * h * wd;
            const S* gp = G.ptr() + (i * c + ch) * ho * wo;
            S* gwc = gw + ch * kh * kw;
            for (int64_t oh = 0; oh < ho; ++oh)
              for (int64_t ow = 0; ow < wo; ++ow) {
                const S g = gp[oh * wo + ow];
                if (g == S(0)) continue;
                for (int64_t p = 0; p < kh; ++p) {
                  const int64_t ih = oh * stride + p - pad;
                  if (ih < 0 || ih >= h) continue;
                  for (int64_t q = 0; q < kw; ++q) {
                    const int64_t iw = ow * stride + q - pad;
                    if (iw >= 0 && iw < wd) gwc[p * kw + q] += g * xp[ih * wd + iw];
                  }
                }
              }
          }
      });
      wn.ensure_grad();
      for (const auto& p : partial) accumulate_grad(wn, p);
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      parallel_for_chunks(n, [&](int64_t, int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            S* gx = xn.grad.ptr() + (i * c + ch) * h * wd;
            const S* wp = wn.value.ptr() + ch * kh * kw;
            const S* gp = G.ptr() + (i * c + ch) * ho * wo;
            for (int64_t oh = 0; oh < ho; ++oh)
              for (int64_t ow = 0; ow < wo; ++ow) {
                const S g = gp[oh * wo + ow];
                if (g == S(0)) continue;
                for (int64_t p = 0; p < kh; ++p) {
                  const int64_t ih = oh * stride + p - pad;
                  if (ih < 0 || ih >= h) continue;
                  for (int64_t q = 0; q < kw; ++q) {
                    const int64_t iw = ow * stride + q - pad;
                    if (iw >= 0 && iw < wd) gx[ih * wd + iw] += g * wp[p * kw + q];
                  }
                }
              }
          }
      });
    }
  };
  return op_node(std::move(out), {x, w}, std::move(back));
}

// Batch normalization over (N,H,W) per channel. Training mode normalizes by
// batch statistics and updates the running buffers in place (running variance
// uses the unbiased estimate); eval mode normalizes by the running buffers.
template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                  Tensor<S>& running_mean, Tensor<S>& running_var, S momentum, S eps,
                  bool training) {
  const Tensor<S>& X = x->value;
  if (X.shape.rank() != 4) throw ShapeError("batch_norm: input must be rank 4");
  const int64_t n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw ShapeError("batch_norm: gamma/beta length must equal channel count");
  if (running_mean.numel() != c || running_var.numel() != c)
    throw ShapeError("batch_norm: running stats length must equal channel count");
  const int64_t plane = h * w, cnt = n * plane;
  if (training && cnt <= 1)
    throw ConfigError("batch_norm: training mode needs more than one value per channel");

  // Per-channel statistics actually used for normalization; captured for the
  // backward pass so later mutation of the running buffers cannot leak in.
  std::vector<S> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
  if (training) {
    parallel_for_chunks(c, [&](int64_t, int64_t b, int64_t e) {
      for (int64_t ch = b; ch < e; ++ch) {
        S sum(0);
        for (int64_t i = 0; i < n; ++i) {
          const S* xp = X.ptr() + (i * c + ch) * plane;
          for (int64_t s = 0; s < plane; ++s) sum += xp[s];
        }
        const S mu = sum / static_cast<S>(cnt);
        S sq(0);
        for (int64_t i = 0; i < n; ++i) {
          const S* xp = X.ptr() + (i * c + ch) * plane;
          for (int64_t s = 0; s < plane; ++s) {
            const S d = xp[s] - mu;
            sq += d * d;
          }
        }
        const S var = sq / static_cast<S>(cnt);
        mean[static_cast<size_t>(ch)] = mu;
        invstd[static_cast<size_t>(ch)] = S(1) / std::sqrt(var + eps);
        running_mean[ch] = (S(1) - momentum) * running_mean[ch] + momentum * mu;
        running_var[ch] = (S(1) - momentum) * running_var[ch] +
                          momentum * var * static_cast<S>(cnt) / static_cast<S>(cnt - 1);
      }
    });
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<size_t>(ch)] = running_mean[ch];
      invstd[static_cast<size_t>(ch)] = S(1) / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor<S> out(X.shape);
  parallel_for_chunks(n * c, [&](int64_t, int64_t b, int64_t e) {
    for (int64_t j = b; j < e; ++j) {
      const int64_t ch = j % c;
      const S mu = mean[static_cast<size_t>(ch)], is = invstd[static_cast<size_t>(ch)];
      const S g = gamma->value[ch], bt = beta->value[ch];
      const S* xp = X.ptr() + j * plane;
      S* op = out.ptr() + j * plane;
      for (int64_t s = 0; s < plane; ++s) op[s] = (xp[s] - mu) * is * g + bt;
    }
  });

  auto back = [mean, invstd, training, n, c, plane, cnt](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    Node<S>& gn = *self.parents[1];
    Node<S>& bn = *self.parents[2];
    const Tensor<S>& G = self.grad;
    // Channel reductions of g and g*xhat feed all three gradients.
    std::vector<S> sum_g(static_cast<size_t>(c), S(0)), sum_gx(static_cast<size_t>(c), S(0));
    parallel_for_chunks(c, [&](int64_t, int64_t b, int64_t e) {
      for (int64_t ch = b; ch < e; ++ch) {
        const S mu = mean[static_cast<size_t>(ch)], is = invstd[static_cast<size_t>(ch)];
        S sg(0), sgx(0);
        for (int64_t i = 0; i < n; ++i) {
          const S* gp = G.ptr() + (i * c + ch) * plane;
          const S* xp = xn.value.ptr() + (i * c + ch) * plane;
          for (int64_t s = 0; s < plane; ++s) {
            sg += gp[s];
            sgx += gp[s] * (xp[s] - mu) * is;
          }
        }
        sum_g[static_cast<size_t>(ch)] = sg;
        sum_gx[static_cast<size_t>(ch)] = sgx;
      }
    });
    if (gn.requires_grad) {
      gn.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) gn.grad[ch] += sum_gx[static_cast<size_t>(ch)];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) bn.grad[ch] += sum_g[static_cast<size_t>(ch)];
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      parallel_for_chunks(n * c, [&](int64_t, int64_t b, int64_t e) {
        for (int64_t j = b; j < e; ++j) {
          const int64_t ch = j % c;
          const S mu = mean[static_cast<size_t>(ch)], is = invstd[static_cast<size_t>(ch)];
          const S gm = gn.value[ch];
          const S* gp = G.ptr() + j * plane;
          const S* xp = xn.value.ptr() + j * plane;
          S* gx = xn.grad.ptr() + j * plane;
          if (training) {
            const S mg = sum_g[static_cast<size_t>(ch)] / static_cast<S>(cnt);
            const S mgx = sum_gx[static_cast<size_t>(ch)] / static_cast<S>(cnt);
            for (int64_t s = 0; s < plane; ++s) {
              const S xh = (xp[s] - mu) * is;
              gx[s] += gm * is * (gp[s] - mg - xh * mgx);
            }
          } else {
            for (int64_t s = 0; s < plane; ++s) gx[s] += gp[s] * gm * is;
          }
        }
      });
    }
  };
  return op_node(std::move(out), {x, gamma, beta}, std::move(back));
}

template <typename S>
Var<S> relu(const Var<S>& x) {
  Tensor<S> out(x->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = x->value[i] > S(0) ? x->value[i] : S(0);
  auto back = [n](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      if (xn.value[i] > S(0)) xn.grad[i] += self.grad[i];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> relu6(const Var<S>& x) {
  Tensor<S> out(x->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::min(std::max(x->value[i], S(0)), S(6));
  auto back = [n](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      if (xn.value[i] > S(0) && xn.value[i] < S(6)) xn.grad[i] += self.grad[i];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> max_pool(const Var<S>& x, int64_t k, int64_t stride, int64_t pad = 0) {
  const Tensor<S>& X = x->value;
  if (X.shape.rank() != 4) throw ShapeError("max_pool: input must be rank 4");
  const int64_t n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  if (k > h + 2 * pad || k > w + 2 * pad)
    throw ConfigError("max_pool: window exceeds input " + X.shape.str());
  const int64_t ho = conv_out_dim(h, k, stride, pad), wo = conv_out_dim(w, k, stride, pad);
  if (ho < 1 || wo < 1) throw ConfigError("max_pool: non-positive output dims");

  Tensor<S> out({n, c, ho, wo});
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * ho * wo));
  parallel_for_chunks(n * c, [&](int64_t, int64_t b, int64_t e) {
    for (int64_t j = b; j < e; ++j) {
      const S* xp = X.ptr() + j * h * w;
      S* op = out.ptr() + j * ho * wo;
      int64_t* ip = idx->data() + j * ho * wo;
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          S best = -std::numeric_limits<S>::infinity();
          int64_t bi = -1;
          for (int64_t p = 0; p < k; ++p) {
            const int64_t ih = oh * stride + p - pad;
            if (ih < 0 || ih >= h) continue;
            for (int64_t q = 0; q < k; ++q) {
              const int64_t iw = ow * stride + q - pad;
              if (iw < 0 || iw >= w) continue;
              const S v = xp[ih * w + iw];
              if (v > best) {
                best = v;
                bi = ih * w + iw;
              }
            }
          }
          op[oh * wo + ow] = bi < 0 ? S(0) : best;
          ip[oh * wo + ow] = bi;
        }
    }
  });
  auto back = [idx, n, c, h, w, ho, wo](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    parallel_for_chunks(n * c, [&](int64_t, int64_t b, int64_t e) {
      for (int64_t j = b; j < e; ++j) {
        S* gx = xn.grad.ptr() + j * h * w;
        const S* gp = self.grad.ptr() + j * ho * wo;
        const int64_t* ip = idx->data() + j * ho * wo;
        for (int64_t s = 0; s < ho * wo; ++s)
          if (ip[s] >= 0) gx[ip[s]] += gp[s];
      }
    });
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> avg_pool(const Var<S>& x, int64_t k, int64_t stride) {
  const Tensor<S>& X = x->value;
  if (X.shape.rank() != 4) throw ShapeError("avg_pool: input must be rank 4");
  const int64_t n = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3];
  if (k > h || k > w) throw ConfigError("avg_pool: window exceeds input " + X.shape.str());
  const int64_t ho = conv_out_dim(h, k, stride, 0), wo = conv_out_dim(w, k, stride, 0);
  if (ho < 1 || wo < 1) throw ConfigError("avg_pool: non-positive output dims");
  const S inv = S(1) / static_cast<S>(k * k);

  Tensor<S> out({n, c, ho, wo});
  parallel_for_chunks(n * c, [&](int64_t, int64_t b, int64_t e) {
    for (int64_t j = b; j < e; ++j) {
      const S* xp = X.ptr() + j * h * w;
      S* op = out.ptr() + j * ho * wo;
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          S acc(0);
          for (int64_t p = 0; p < k; ++p)
            for (int64_t q = 0; q < k; ++q) acc += xp[(oh * stride + p) * w + ow * stride + q];
          op[oh * wo + ow] = acc * inv;
        }
    }
  });
  auto back = [k, stride, inv, n, c, h, w, ho, wo](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    parallel_for_chunks(n * c, [&](int64_t, int64_t b, int64_t e) {
      for (int64_t j = b; j < e; ++j) {
        S* gx = xn.grad.ptr() + j * h * w;
        const S* gp = self.grad.ptr() + j * ho * wo;
        for (int64_t oh = 0; oh < ho; ++oh)
          for (int64_t ow = 0; ow < wo; ++ow) {
            const S g = gp[oh * wo + ow] * inv;
            for (int64_t p = 0; p < k; ++p)
              for (int64_t q = 0; q < k; ++q) gx[(oh * stride + p) * w + ow * stride + q] += g;
          }
      }
    });
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
  const Tensor<S>& X = x->value;
  if (X.shape.rank() != 4) throw ShapeError("global_avg_pool: input must be rank 4");
  const int64_t n = X.shape[0], c = X.shape[1], plane = X.shape[2] * X.shape[3];
  const S inv = S(1) / static_cast<S>(plane);
  Tensor<S> out({n, c, 1, 1});
  for (int64_t j = 0; j < n * c; ++j) {
    const S* xp = X.ptr() + j * plane;
    S acc(0);
    for (int64_t s = 0; s < plane; ++s) acc += xp[s];
    out[j] = acc * inv;
  }
  auto back = [n, c, plane, inv](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t j = 0; j < n * c; ++j) {
      const S g = self.grad[j] * inv;
      S* gx = xn.grad.ptr() + j * plane;
      for (int64_t s = 0; s < plane; ++s) gx[s] += g;
    }
  };
  return op_node(std::move(out), {x}, std::move(back));
}

// Fully connected layer: out = x W^T + b. x (N,in), w (out,in), b (out).
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Tensor<S>& X = x->value;
  const Tensor<S>& W = w->value;
  if (X.shape.rank() != 2) throw ShapeError("linear: input must be rank 2, got " + X.shape.str());
  if (W.shape.rank() != 2) throw ShapeError("linear: weights must be rank 2");
  const int64_t n = X.shape[0], in = X.shape[1], out_f = W.shape[0];
  if (W.shape[1] != in)
    throw ShapeError("linear: weight expects " + std::to_string(W.shape[1]) + " features, input has " +
                     std::to_string(in));
  if (b && b->value.numel() != out_f) throw ShapeError("linear: bias length must equal out features");

  Tensor<S> out({n, out_f});
  MatMap<S>(out.ptr(), n, out_f).noalias() =
      CMatMap<S>(X.ptr(), n, in) * CMatMap<S>(W.ptr(), out_f, in).transpose();
  if (b)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < out_f; ++j) out[i * out_f + j] += b->value[j];

  std::vector<Var<S>> parents{x, w};
  if (b) parents.push_back(b);
  auto back = [n, in, out_f](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    Node<S>& wn = *self.parents[1];
    Node<S>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    CMatMap<S> gm(self.grad.ptr(), n, out_f);
    if (xn.requires_grad) {
      xn.ensure_grad();
      MatMap<S>(xn.grad.ptr(), n, in).noalias() += gm * CMatMap<S>(wn.value.ptr(), out_f, in);
    }
    if (wn.requires_grad) {
      wn.ensure_grad();
      MatMap<S>(wn.grad.ptr(), out_f, in).noalias() +=
          gm.transpose() * CMatMap<S>(xn.value.ptr(), n, in);
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < out_f; ++j) bn->grad[j] += self.grad[i * out_f + j];
    }
  };
  return op_node(std::move(out), std::move(parents), std::move(back));
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape target) {
  if (target.numel() != x->value.numel())
    throw ShapeError("reshape: cannot view " + x->value.shape.str() + " as " + target.str());
  Tensor<S> out(std::move(target), x->value.data);
  auto back = [](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const int64_t n = self.grad.numel();
    for (int64_t i = 0; i < n; ++i) xn.grad[i] += self.grad[i];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

// (N,C,1,1) or any rank-4 map to a (N, C*H*W) vector batch.
template <typename S>
Var<S> flatten(const Var<S>& x) {
  const Shape& s = x->value.shape;
  if (s.rank() != 4) throw ShapeError("flatten: input must be rank 4");
  return reshape(x, Shape{s[0], s[1] * s[2] * s[3]});
}

template <typename S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
  const Tensor<S>& A = a->value;
  const Tensor<S>& B = b->value;
  if (A.shape.rank() != 4 || B.shape.rank() != 4)
    throw ShapeError("concat_channels: inputs must be rank 4");
  if (A.shape[0] != B.shape[0] || A.shape[2] != B.shape[2] || A.shape[3] != B.shape[3])
    throw ShapeError("concat_channels: batch/spatial dims differ: " + A.shape.str() + " vs " +
                     B.shape.str());
  const int64_t n = A.shape[0], ca = A.shape[1], cb = B.shape[1], plane = A.shape[2] * A.shape[3];
  Tensor<S> out({n, ca + cb, A.shape[2], A.shape[3]});
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(A.ptr() + i * ca * plane, ca * plane, out.ptr() + i * (ca + cb) * plane);
    std::copy_n(B.ptr() + i * cb * plane, cb * plane, out.ptr() + (i * (ca + cb) + ca) * plane);
  }
  auto back = [n, ca, cb, plane](Node<S>& self) {
    Node<S>& an = *self.parents[0];
    Node<S>& bn = *self.parents[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const S* g = self.grad.ptr() + i * (ca + cb) * plane;
        S* ga = an.grad.ptr() + i * ca * plane;
        for (int64_t s = 0; s < ca * plane; ++s) ga[s] += g[s];
      }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const S* g = self.grad.ptr() + (i * (ca + cb) + ca) * plane;
        S* gb = bn.grad.ptr() + i * cb * plane;
        for (int64_t s = 0; s < cb * plane; ++s) gb[s] += g[s];
      }
    }
  };
  return op_node(std::move(out), {a, b}, std::move(back));
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (a->value.shape != b->value.shape)
    throw ShapeError("add: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
  Tensor<S> out(a->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  auto back = [n](Node<S>& self) {
    for (int p = 0; p < 2; ++p) {
      Node<S>& pn = *self.parents[static_cast<size_t>(p)];
      if (!pn.requires_grad) continue;
      pn.ensure_grad();
      for (int64_t i = 0; i < n; ++i) pn.grad[i] += self.grad[i];
    }
  };
  return op_node(std::move(out), {a, b}, std::move(back));
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (a->value.shape != b->value.shape)
    throw ShapeError("sub: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
  Tensor<S> out(a->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] - b->value[i];
  auto back = [n](Node<S>& self) {
    Node<S>& an = *self.parents[0];
    Node<S>& bn = *self.parents[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (int64_t i = 0; i < n; ++i) an.grad[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn.grad[i] -= self.grad[i];
    }
  };
  return op_node(std::move(out), {a, b}, std::move(back));
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (a->value.shape != b->value.shape)
    throw ShapeError("mul: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
  Tensor<S> out(a->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  auto back = [n](Node<S>& self) {
    Node<S>& an = *self.parents[0];
    Node<S>& bn = *self.parents[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (int64_t i = 0; i < n; ++i) an.grad[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t i = 0; i < n; ++i) bn.grad[i] += self.grad[i] * an.value[i];
    }
  };
  return op_node(std::move(out), {a, b}, std::move(back));
}

template <typename S>
Var<S> scale(const Var<S>& x, S factor) {
  Tensor<S> out(x->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = x->value[i] * factor;
  auto back = [n, factor](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i) xn.grad[i] += self.grad[i] * factor;
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> exp_op(const Var<S>& x) {
  Tensor<S> out(x->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(x->value[i]);
  auto back = [n](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i) xn.grad[i] += self.grad[i] * self.value[i];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

// Elementwise square root with a guarded derivative at zero (subgradient 0
// territory is mapped to a bounded slope).
template <typename S>
Var<S> sqrt_op(const Var<S>& x) {
  Tensor<S> out(x->value.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::sqrt(x->value[i]);
  auto back = [n](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const S denom = std::max(self.value[i], S(1e-12));
      xn.grad[i] += self.grad[i] * S(0.5) / denom;
    }
  };
  return op_node(std::move(out), {x}, std::move(back));
}

// Sum over the feature dimension of a (N,C) batch -> (N).
template <typename S>
Var<S> row_sum(const Var<S>& x) {
  const Tensor<S>& X = x->value;
  if (X.shape.rank() != 2) throw ShapeError("row_sum: input must be rank 2");
  const int64_t n = X.shape[0], c = X.shape[1];
  Tensor<S> out({n});
  for (int64_t i = 0; i < n; ++i) {
    S acc(0);
    for (int64_t j = 0; j < c; ++j) acc += X[i * c + j];
    out[i] = acc;
  }
  auto back = [n, c](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) xn.grad[i * c + j] += self.grad[i];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> mean_all(const Var<S>& x) {
  const int64_t n = x->value.numel();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  S acc(0);
  for (int64_t i = 0; i < n; ++i) acc += x->value[i];
  Tensor<S> out({1});
  out[0] = acc / static_cast<S>(n);
  auto back = [n](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const S g = self.grad[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) xn.grad[i] += g;
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> sum_all(const Var<S>& x) {
  const int64_t n = x->value.numel();
  S acc(0);
  for (int64_t i = 0; i < n; ++i) acc += x->value[i];
  Tensor<S> out({1});
  out[0] = acc;
  auto back = [n](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i) xn.grad[i] += self.grad[0];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

namespace detail {
template <typename S>
void check_softmax_input(const Tensor<S>& x, S tau, const char* who) {
  if (x.shape.rank() != 2) throw ShapeError(std::string(who) + ": logits must be rank 2");
  if (!(tau > S(0))) throw DomainError(std::string(who) + ": temperature must be > 0");
  if (!x.all_finite()) throw DomainError(std::string(who) + ": logits must be finite");
}
}  // namespace detail

// Temperature softmax with max-subtraction. Rows of x are (N,C) logits.
template <typename S>
Var<S> softmax_tau(const Var<S>& x, S tau) {
  detail::check_softmax_input(x->value, tau, "softmax_tau");
  const int64_t n = x->value.shape[0], c = x->value.shape[1];
  Tensor<S> out({n, c});
  for (int64_t i = 0; i < n; ++i) {
    const S* xi = x->value.ptr() + i * c;
    S* oi = out.ptr() + i * c;
    S mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    S sum(0);
    for (int64_t j = 0; j < c; ++j) {
      oi[j] = std::exp((xi[j] - mx) / tau);
      sum += oi[j];
    }
    for (int64_t j = 0; j < c; ++j) oi[j] /= sum;
  }
  auto back = [n, c, tau](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const S* s = self.value.ptr() + i * c;
      const S* g = self.grad.ptr() + i * c;
      S dot(0);
      for (int64_t j = 0; j < c; ++j) dot += g[j] * s[j];
      S* gx = xn.grad.ptr() + i * c;
      for (int64_t j = 0; j < c; ++j) gx[j] += s[j] * (g[j] - dot) / tau;
    }
  };
  return op_node(std::move(out), {x}, std::move(back));
}

template <typename S>
Var<S> log_softmax_tau(const Var<S>& x, S tau) {
  detail::check_softmax_input(x->value, tau, "log_softmax_tau");
  const int64_t n = x->value.shape[0], c = x->value.shape[1];
  Tensor<S> out({n, c});
  for (int64_t i = 0; i < n; ++i) {
    const S* xi = x->value.ptr() + i * c;
    S* oi = out.ptr() + i * c;
    S mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    S sum(0);
    for (int64_t j = 0; j < c; ++j) sum += std::exp((xi[j] - mx) / tau);
    const S lse = std::log(sum);
    for (int64_t j = 0; j < c; ++j) oi[j] = (xi[j] - mx) / tau - lse;
  }
  auto back = [n, c, tau](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const S* y = self.value.ptr() + i * c;
      const S* g = self.grad.ptr() + i * c;
      S gsum(0);
      for (int64_t j = 0; j < c; ++j) gsum += g[j];
      S* gx = xn.grad.ptr() + i * c;
      for (int64_t j = 0; j < c; ++j) gx[j] += (g[j] - std::exp(y[j]) * gsum) / tau;
    }
  };
  return op_node(std::move(out), {x}, std::move(back));
}

// Negative log likelihood of integer labels, averaged over the batch.
template <typename S>
Var<S> nll_loss(const Var<S>& logp, const std::vector<int>& labels) {
  const Tensor<S>& L = logp->value;
  if (L.shape.rank() != 2) throw ShapeError("nll_loss: log probabilities must be rank 2");
  const int64_t n = L.shape[0], c = L.shape[1];
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("nll_loss: label count must equal batch size");
  for (int y : labels)
    if (y < 0 || y >= c)
      throw DomainError("nll_loss: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(c) + ")");
  S acc(0);
  for (int64_t i = 0; i < n; ++i) acc -= L[i * c + labels[static_cast<size_t>(i)]];
  Tensor<S> out({1});
  out[0] = acc / static_cast<S>(n);
  auto back = [labels, n, c](Node<S>& self) {
    Node<S>& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    pn.ensure_grad();
    const S g = self.grad[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) pn.grad[i * c + labels[static_cast<size_t>(i)]] -= g;
  };
  return op_node(std::move(out), {logp}, std::move(back));
}

// One element of a (N,C) batch as a scalar variable.
template <typename S>
Var<S> select_scalar(const Var<S>& x, int64_t row, int64_t col) {
  const Tensor<S>& X = x->value;
  if (X.shape.rank() != 2) throw ShapeError("select_scalar: input must be rank 2");
  if (row < 0 || row >= X.shape[0] || col < 0 || col >= X.shape[1])
    throw ShapeError("select_scalar: index out of range");
  Tensor<S> out({1});
  const int64_t flat = row * X.shape[1] + col;
  out[0] = X[flat];
  auto back = [flat](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    xn.grad[flat] += self.grad[0];
  };
  return op_node(std::move(out), {x}, std::move(back));
}

}  // namespace kd
