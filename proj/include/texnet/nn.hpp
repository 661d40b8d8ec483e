#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "texnet/tensor.hpp"

namespace texnet {

enum class Padding { valid, same };

struct ConvGeometry {
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride_h = 1;
  Index stride_w = 1;
  Padding padding = Padding::valid;
  Index in_channels = 0;
  Index out_channels = 0;
};

inline void validate(const ConvGeometry& g) {
  if (g.kernel_h < 1 || g.kernel_w < 1 || g.stride_h < 1 || g.stride_w < 1)
    throw std::invalid_argument("conv geometry: kernel and stride extents must be >= 1");
  if (g.in_channels < 1 || g.out_channels < 1)
    throw std::invalid_argument("conv geometry: channel counts must be >= 1");
}

inline Index conv_out_extent(Index in, Index kernel, Index stride, Padding padding) {
  if (padding == Padding::valid) {
    if (in < kernel) throw std::invalid_argument("conv: input smaller than kernel under valid padding");
    return (in - kernel) / stride + 1;
  }
  return (in + stride - 1) / stride;
}

inline Index conv_pad_before(Index in, Index out, Index kernel, Index stride, Padding padding) {
  if (padding == Padding::valid) return 0;
  const Index total = std::max<Index>(0, (out - 1) * stride + kernel - in);
  return total / 2;
}

namespace detail {

// Gathers the im2col patch rows for output pixels [row_begin, row_end) of one
// batch item. Rows are output pixels in row-major (y,x) order; columns are
// (ky,kx,ci). Out-of-bounds taps are zero.
template <typename Scalar>
void im2col_rows(const Tensor<Scalar>& input, Index n, const ConvGeometry& g, Index out_w,
                 Index pad_h, Index pad_w, Index row_begin, Index row_end, Scalar* patches) {
  const Index in_h = input.dim(1), in_w = input.dim(2), cin = input.dim(3);
  const Index patch_cols = g.kernel_h * g.kernel_w * cin;
  const Scalar* in = input.data() + n * in_h * in_w * cin;
  for (Index r = row_begin; r < row_end; ++r) {
    const Index oy = r / out_w, ox = r % out_w;
    Scalar* row = patches + (r - row_begin) * patch_cols;
    const Index y0 = oy * g.stride_h - pad_h;
    const Index x0 = ox * g.stride_w - pad_w;
    for (Index ky = 0; ky < g.kernel_h; ++ky) {
      const Index y = y0 + ky;
      Scalar* dst = row + ky * g.kernel_w * cin;
      if (y < 0 || y >= in_h) {
        std::fill(dst, dst + g.kernel_w * cin, Scalar(0));
        continue;
      }
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        const Index x = x0 + kx;
        if (x < 0 || x >= in_w) {
          std::fill(dst + kx * cin, dst + (kx + 1) * cin, Scalar(0));
        } else {
          const Scalar* src = in + (y * in_w + x) * cin;
          std::copy(src, src + cin, dst + kx * cin);
        }
      }
    }
  }
}

// Scatter-adds patch-space gradients back onto the input gradient (col2im).
template <typename Scalar>
void col2im_rows(Tensor<Scalar>& grad_input, Index n, const ConvGeometry& g, Index out_w,
                 Index pad_h, Index pad_w, Index row_begin, Index row_end,
                 const Scalar* patches) {
  const Index in_h = grad_input.dim(1), in_w = grad_input.dim(2), cin = grad_input.dim(3);
  const Index patch_cols = g.kernel_h * g.kernel_w * cin;
  Scalar* out = grad_input.data() + n * in_h * in_w * cin;
  for (Index r = row_begin; r < row_end; ++r) {
    const Index oy = r / out_w, ox = r % out_w;
    const Scalar* row = patches + (r - row_begin) * patch_cols;
    const Index y0 = oy * g.stride_h - pad_h;
    const Index x0 = ox * g.stride_w - pad_w;
    for (Index ky = 0; ky < g.kernel_h; ++ky) {
      const Index y = y0 + ky;
      if (y < 0 || y >= in_h) continue;
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        const Index x = x0 + kx;
        if (x < 0 || x >= in_w) continue;
        Scalar* dst = out + (y * in_w + x) * cin;
        const Scalar* src = row + (ky * g.kernel_w + kx) * cin;
        for (Index c = 0; c < cin; ++c) dst[c] += src[c];
      }
    }
  }
}

// Output-pixel block size keeping the patch matrix within a fixed budget.
inline Index conv_block_rows(Index patch_cols, Index total_rows) {
  const Index budget = (Index(16) << 20) / static_cast<Index>(sizeof(double));
  return std::clamp<Index>(budget / std::max<Index>(1, patch_cols), 1, total_rows);
}

}  // namespace detail

template <typename Scalar>
void check_conv_args(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                     const Tensor<Scalar>& bias, const ConvGeometry& g) {
  validate(g);
  if (input.rank() != 4) throw std::invalid_argument("conv2d: input must be rank 4 [N,H,W,C]");
  if (input.dim(3) != g.in_channels)
    throw std::invalid_argument("conv2d: input channels do not match geometry");
  require_shape(weights, {g.kernel_h, g.kernel_w, g.in_channels, g.out_channels},
                "conv2d weights");
  require_shape(bias, {g.out_channels}, "conv2d bias");
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                      const Tensor<Scalar>& bias, const ConvGeometry& g) {
  check_conv_args(input, weights, bias, g);
  require_finite(input, "conv2d input");
  const Index batch = input.dim(0);
  const Index out_h = conv_out_extent(input.dim(1), g.kernel_h, g.stride_h, g.padding);
  const Index out_w = conv_out_extent(input.dim(2), g.kernel_w, g.stride_w, g.padding);
  const Index pad_h = conv_pad_before(input.dim(1), out_h, g.kernel_h, g.stride_h, g.padding);
  const Index pad_w = conv_pad_before(input.dim(2), out_w, g.kernel_w, g.stride_w, g.padding);

  Tensor<Scalar> output({batch, out_h, out_w, g.out_channels});
  const Index patch_cols = g.kernel_h * g.kernel_w * g.in_channels;
  const Index rows_total = out_h * out_w;
  const Index block = detail::conv_block_rows(patch_cols, rows_total);

  const auto wmat = as_matrix(weights, patch_cols, g.out_channels);
  const auto bvec = bias.values().matrix();
  std::vector<Scalar> patches(static_cast<std::size_t>(block * patch_cols));

  for (Index n = 0; n < batch; ++n) {
    for (Index r0 = 0; r0 < rows_total; r0 += block) {
      const Index r1 = std::min(rows_total, r0 + block);
      detail::im2col_rows(input, n, g, out_w, pad_h, pad_w, r0, r1, patches.data());
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
          pmat(patches.data(), r1 - r0, patch_cols);
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> omat(
          output.data() + (n * rows_total + r0) * g.out_channels, r1 - r0, g.out_channels);
      omat.noalias() = pmat * wmat;
      omat.rowwise() += bvec.transpose();
    }
  }
  require_finite(output, "conv2d output");
  return output;
}

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                    const ConvGeometry& g, const Tensor<Scalar>& grad_out) {
  validate(g);
  const Index batch = input.dim(0);
  const Index out_h = conv_out_extent(input.dim(1), g.kernel_h, g.stride_h, g.padding);
  const Index out_w = conv_out_extent(input.dim(2), g.kernel_w, g.stride_w, g.padding);
  const Index pad_h = conv_pad_before(input.dim(1), out_h, g.kernel_h, g.stride_h, g.padding);
  const Index pad_w = conv_pad_before(input.dim(2), out_w, g.kernel_w, g.stride_w, g.padding);
  require_shape(grad_out, {batch, out_h, out_w, g.out_channels}, "conv2d grad_out");

  Conv2dGrads<Scalar> grads{Tensor<Scalar>(input.shape()), Tensor<Scalar>(weights.shape()),
                            Tensor<Scalar>({g.out_channels})};
  const Index patch_cols = g.kernel_h * g.kernel_w * g.in_channels;
  const Index rows_total = out_h * out_w;
  const Index block = detail::conv_block_rows(patch_cols, rows_total);

  const auto wmat = as_matrix(weights, patch_cols, g.out_channels);
  auto dwmat = as_matrix(grads.weights, patch_cols, g.out_channels);
  auto dbias = grads.bias.values().matrix();
  std::vector<Scalar> patches(static_cast<std::size_t>(block * patch_cols));
  std::vector<Scalar> dpatches(static_cast<std::size_t>(block * patch_cols));

  for (Index n = 0; n < batch; ++n) {
    for (Index r0 = 0; r0 < rows_total; r0 += block) {
      const Index r1 = std::min(rows_total, r0 + block);
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
          gmat(grad_out.data() + (n * rows_total + r0) * g.out_channels, r1 - r0,
               g.out_channels);
      dbias += gmat.colwise().sum().transpose();

      detail::im2col_rows(input, n, g, out_w, pad_h, pad_w, r0, r1, patches.data());
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
          pmat(patches.data(), r1 - r0, patch_cols);
      dwmat.noalias() += pmat.transpose() * gmat;

      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dpmat(
          dpatches.data(), r1 - r0, patch_cols);
      dpmat.noalias() = gmat * wmat.transpose();
      detail::col2im_rows(grads.input, n, g, out_w, pad_h, pad_w, r0, r1, dpatches.data());
    }
  }
  return grads;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  if (input.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be rank 4");
  const Index batch = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (h < 1 || w < 1) throw std::invalid_argument("global_avg_pool: empty spatial extent");
  Tensor<Scalar> output({batch, 1, 1, c});
  const Scalar scale = Scalar(1) / static_cast<Scalar>(h * w);
  for (Index n = 0; n < batch; ++n) {
    auto in = as_matrix(input, batch * h * w, c).middleRows(n * h * w, h * w);
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> out(output.data() + n * c, c);
    out = in.colwise().sum().transpose() * scale;
  }
  return output;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input_shape, const Tensor<Scalar>& grad_out) {
  const Index batch = input_shape[0], h = input_shape[1], w = input_shape[2], c = input_shape[3];
  require_shape(grad_out, {batch, 1, 1, c}, "global_avg_pool grad_out");
  Tensor<Scalar> grad_in(input_shape);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(h * w);
  for (Index n = 0; n < batch; ++n)
    for (Index p = 0; p < h * w; ++p)
      for (Index ch = 0; ch < c; ++ch)
        grad_in[(n * h * w + p) * c + ch] = grad_out[n * c + ch] * scale;
  return grad_in;
}

template <typename Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                     const Tensor<Scalar>& bias) {
  if (input.rank() != 2) throw std::invalid_argument("dense: input must be rank 2 [N,Din]");
  const Index batch = input.dim(0), din = input.dim(1);
  if (weights.rank() != 2 || weights.dim(0) != din)
    throw std::invalid_argument("dense: weights must be [Din,Dout] with matching Din");
  const Index dout = weights.dim(1);
  require_shape(bias, {dout}, "dense bias");
  require_finite(input, "dense input");
  Tensor<Scalar> output({batch, dout});
  auto out = as_matrix(output, batch, dout);
  out.noalias() = as_matrix(input, batch, din) * as_matrix(weights, din, dout);
  out.rowwise() += bias.values().matrix().transpose();
  require_finite(output, "dense output");
  return output;
}

template <typename Scalar>
struct DenseGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                  const Tensor<Scalar>& grad_out) {
  const Index batch = input.dim(0), din = input.dim(1), dout = weights.dim(1);
  require_shape(grad_out, {batch, dout}, "dense grad_out");
  DenseGrads<Scalar> grads{Tensor<Scalar>({batch, din}), Tensor<Scalar>({din, dout}),
                           Tensor<Scalar>({dout})};
  const auto x = as_matrix(input, batch, din);
  const auto w = as_matrix(weights, din, dout);
  const auto dy = as_matrix(grad_out, batch, dout);
  as_matrix(grads.input, batch, din).noalias() = dy * w.transpose();
  as_matrix(grads.weights, din, dout).noalias() = x.transpose() * dy;
  grads.bias.values().matrix() = dy.colwise().sum().transpose();
  return grads;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  Tensor<Scalar> output(input.shape());
  output.values() = input.values().max(Scalar(0));
  return output;
}

// Zero gradient wherever the pre-activation input was <= 0.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_out) {
  require_shape(grad_out, input.shape(), "relu grad_out");
  Tensor<Scalar> grad_in(input.shape());
  grad_in.values() = (input.values() > Scalar(0)).select(grad_out.values(), Scalar(0));
  return grad_in;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax: logits must be rank 2 [N,K]");
  const Index batch = logits.dim(0), k = logits.dim(1);
  Tensor<Scalar> probs({batch, k});
  auto in = as_matrix(logits, batch, k);
  auto out = as_matrix(probs, batch, k);
  for (Index n = 0; n < batch; ++n) {
    const Scalar m = in.row(n).maxCoeff();
    out.row(n) = (in.row(n).array() - m).exp();
    out.row(n) /= out.row(n).sum();
  }
  return probs;
}

template <typename Scalar>
struct SoftmaxCrossEntropy {
  Scalar loss = 0;
  Tensor<Scalar> probabilities;
};

// Mean negative log-likelihood over the batch, computed via log-sum-exp so the
// loss stays finite for any finite logits.
template <typename Scalar>
SoftmaxCrossEntropy<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits,
                                                  const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [N,K]");
  const Index batch = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw std::invalid_argument("softmax_cross_entropy: need at least 2 classes");
  if (static_cast<Index>(labels.size()) != batch)
    throw std::invalid_argument("softmax_cross_entropy: one label per batch row required");
  SoftmaxCrossEntropy<Scalar> result;
  result.probabilities = Tensor<Scalar>({batch, k});
  auto in = as_matrix(logits, batch, k);
  auto out = as_matrix(result.probabilities, batch, k);
  Scalar total = 0;
  for (Index n = 0; n < batch; ++n) {
    const int label = labels[static_cast<std::size_t>(n)];
    if (label < 0 || label >= k)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const Scalar m = in.row(n).maxCoeff();
    const auto shifted = (in.row(n).array() - m).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    out.row(n) = (shifted - lse).exp();
    total += lse - shifted(label);
  }
  result.loss = total / static_cast<Scalar>(batch);
  return result;
}

// d loss / d logits = (softmax - onehot) / N.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy_backward(const Tensor<Scalar>& probabilities,
                                              const std::vector<int>& labels) {
  const Index batch = probabilities.dim(0), k = probabilities.dim(1);
  Tensor<Scalar> grad({batch, k});
  grad.values() = probabilities.values() / static_cast<Scalar>(batch);
  for (Index n = 0; n < batch; ++n)
    grad(n, labels[static_cast<std::size_t>(n)]) -= Scalar(1) / static_cast<Scalar>(batch);
  return grad;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Tensor<Scalar>& first = *inputs.front();
  if (first.rank() != 4) throw std::invalid_argument("concat_channels: inputs must be rank 4");
  const Index batch = first.dim(0), h = first.dim(1), w = first.dim(2);
  Index channels = 0;
  for (const auto* t : inputs) {
    if (t->dim(0) != batch || t->dim(1) != h || t->dim(2) != w)
      throw std::invalid_argument("concat_channels: spatial/batch extents differ across inputs");
    channels += t->dim(3);
  }
  Tensor<Scalar> output({batch, h, w, channels});
  const Index pixels = batch * h * w;
  Index offset = 0;
  for (const auto* t : inputs) {
    const Index c = t->dim(3);
    for (Index p = 0; p < pixels; ++p)
      std::copy(t->data() + p * c, t->data() + (p + 1) * c, output.data() + p * channels + offset);
    offset += c;
  }
  return output;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> concat_channels_backward(const std::vector<Shape>& input_shapes,
                                                     const Tensor<Scalar>& grad_out) {
  std::vector<Tensor<Scalar>> grads;
  grads.reserve(input_shapes.size());
  const Index batch = grad_out.dim(0), h = grad_out.dim(1), w = grad_out.dim(2);
  const Index channels = grad_out.dim(3);
  const Index pixels = batch * h * w;
  Index offset = 0;
  for (const Shape& s : input_shapes) {
    const Index c = s[3];
    Tensor<Scalar> g(s);
    for (Index p = 0; p < pixels; ++p)
      std::copy(grad_out.data() + p * channels + offset, grad_out.data() + p * channels + offset + c,
                g.data() + p * c);
    offset += c;
    grads.push_back(std::move(g));
  }
  if (offset != channels)
    throw std::invalid_argument("concat_channels_backward: channel extents do not cover gradient");
  return grads;
}

enum class NormMode { train, infer };

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> x_hat;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std;
};

// Per-channel normalization over (N,H,W). Train mode normalizes with batch
// statistics and updates the running averages in place; infer mode uses the
// running statistics only.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean,
                          Tensor<Scalar>& running_var, NormMode mode, Scalar momentum,
                          Scalar epsilon, BatchNormCache<Scalar>* cache = nullptr) {
  if (input.rank() != 4) throw std::invalid_argument("batch_norm: input must be rank 4");
  const Index batch = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (batch < 1) throw std::invalid_argument("batch_norm: zero-size batch");
  require_shape(gamma, {c}, "batch_norm gamma");
  require_shape(beta, {c}, "batch_norm beta");
  require_shape(running_mean, {c}, "batch_norm running_mean");
  require_shape(running_var, {c}, "batch_norm running_var");

  const Index rows = batch * h * w;
  const auto in = as_matrix(input, rows, c);
  using Vec = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  Vec mean(c), var(c);
  if (mode == NormMode::train) {
    mean = in.colwise().mean().transpose().array();
    var = (in.rowwise() - mean.matrix().transpose()).array().square().colwise().mean().transpose();
    running_mean.values() = momentum * running_mean.values() + (Scalar(1) - momentum) * mean;
    running_var.values() = momentum * running_var.values() + (Scalar(1) - momentum) * var;
  } else {
    mean = running_mean.values();
    var = running_var.values();
  }
  const Vec inv_std = (var + epsilon).sqrt().inverse();

  Tensor<Scalar> output(input.shape());
  auto out = as_matrix(output, rows, c);
  out = (in.rowwise() - mean.matrix().transpose()).array().rowwise() * inv_std.transpose();
  if (cache) {
    cache->x_hat = output;
    cache->inv_std = inv_std;
  }
  out = (out.array().rowwise() * gamma.values().transpose()).rowwise() +
        beta.values().transpose();
  require_finite(output, "batch_norm output");
  return output;
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const Tensor<Scalar>& gamma,
                                           const BatchNormCache<Scalar>& cache,
                                           const Tensor<Scalar>& grad_out) {
  const Shape& shape = cache.x_hat.shape();
  const Index rows = shape[0] * shape[1] * shape[2];
  const Index c = shape[3];
  require_shape(grad_out, shape, "batch_norm grad_out");

  BatchNormGrads<Scalar> grads{Tensor<Scalar>(shape), Tensor<Scalar>({c}), Tensor<Scalar>({c})};
  const auto dy = as_matrix(grad_out, rows, c);
  const auto xh = as_matrix(cache.x_hat, rows, c);
  using Vec = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  const Vec sum_dy = dy.colwise().sum().transpose().array();
  const Vec sum_dy_xh = (dy.array() * xh.array()).colwise().sum().transpose();
  grads.beta.values() = sum_dy;
  grads.gamma.values() = sum_dy_xh;

  // dX = gamma * inv_std / M * (M*dY - x_hat * sum(dY*x_hat) - sum(dY))
  const Scalar m = static_cast<Scalar>(rows);
  const Vec coef = gamma.values() * cache.inv_std / m;
  auto dx = as_matrix(grads.input, rows, c);
  dx = ((dy.array() * m) - (xh.array().rowwise() * sum_dy_xh.transpose())).rowwise() -
       sum_dy.transpose();
  dx = dx.array().rowwise() * coef.transpose();
  return grads;
}

}  // namespace texnet
