#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Elementwise binary ops broadcast like numpy restricted to equal rank: each
// dimension must match or be 1 in one of the operands.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// 1 - x
Tensor one_minus(const Tensor& x);

Tensor relu(const Tensor& x);
/// Logistic function. Outputs are clamped to [DBL_MIN, 1 - 2^-53] so they stay
/// strictly inside (0, 1) even where the exact value rounds to 0 or 1.
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reductions along one axis keep that axis with extent 1.
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor max(const Tensor& x, std::size_t axis);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes to zero mean / unit variance along `axis` (no affine part).
Tensor layer_norm(const Tensor& x, std::size_t axis, double eps = 1e-5);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x: [N x in], weight: [in x out], bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// x: [C x H x W] or [N x C x H x W]; weight: [C_out x C_in x KH x KW]; bias [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, std::size_t stride = 1,
              std::size_t pad = 0);
/// x: [C x Z x H x W]; weight: [C_out x C_in x KD x KH x KW].
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, std::size_t stride = 1,
              std::size_t pad = 0);

/// out.flat[i] = x.flat[index[i]], or 0 where index[i] < 0.
Tensor take(const Tensor& x, std::vector<std::int64_t> index, Shape out_shape);
/// Row scatter-add: out[index[n]] += src[n] for src [N x C]; rows with index < 0 are dropped.
Tensor index_add(const Tensor& src, std::vector<std::int32_t> index, std::size_t rows);

/// Row-wise scaled dot-product attention on [B x T x C] queries and
/// [B x S x C] / [B x S x Cv] keys / values. When `probs` is given, the
/// softmax matrix ([B x T x S]) is copied into it.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                 std::vector<double>* probs = nullptr);

}  // namespace bevfuse
