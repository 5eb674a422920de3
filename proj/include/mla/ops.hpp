#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mla/tensor.hpp"

// Differentiable tensor operations. Image tensors are NHWC; convolution
// kernels are [kh, kw, c_in, c_out].
namespace mla::ops {

// Guards zero vectors in l1/l2 normalization and zero variance in batch norm.
inline constexpr double kNormEps = 1e-12;

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);

// [.., m, k] x [.., k, n] -> [.., m, n]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor l2_normalize(const Tensor& x, int axis);
Tensor l1_normalize(const Tensor& x, int axis);

Tensor conv2d(const Tensor& input, const Tensor& kernel, const std::optional<Tensor>& bias,
              std::size_t stride, std::size_t zero_pad);

// [n, h, w, c] -> [n, c]
Tensor global_avg_pool(const Tensor& x);
// 2x2 average pooling with stride 2 on [n,h,w,c]; output extent is ceil(e/2)
// and a window on an odd border averages only its valid cells.
Tensor avg_pool2x2(const Tensor& x);

// Running statistics of one batch-norm layer. `mean`/`var` are plain
// (non-tape) tensors of shape [c].
struct BatchNormStats {
  Tensor mean;
  Tensor var;
  double momentum = 0.1;

  static BatchNormStats fresh(std::size_t channels);
};

// Normalizes every axis except the last. Training mode uses batch moments and
// updates `stats` in place; eval mode uses the running moments.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training);

// Mean cross-entropy of [b, K] logits against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace mla::ops
