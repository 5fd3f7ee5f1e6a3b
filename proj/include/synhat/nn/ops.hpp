// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "synhat/nn/tensor.hpp"

// Differentiable operators. Sequence tensors are laid out [batch, channels,
// width]; feature matrices are [rows, features].
namespace synhat::nn {

// ----- elementwise -----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

// ----- broadcasting over the width axis -----
/// x[B,C,W] + v[B,C] (v broadcast along W).
Tensor add_channel(const Tensor& x, const Tensor& v);
/// x[B,C,W] * v[B,C].
Tensor mul_channel(const Tensor& x, const Tensor& v);
/// x[B,C,W] * m[B,1,W].
Tensor mul_position(const Tensor& x, const Tensor& m);

// ----- layout -----
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, int begin, int end);
Tensor slice_width(const Tensor& x, int begin, int end);
/// Right-pads the width axis by repeating the last column.
Tensor pad_replicate(const Tensor& x, int width);
Tensor upsample_nearest2(const Tensor& x);
/// x[B,C,W] -> [B,1,W]: variance over the window {t-1, t, t+1} (edges
/// replicated), averaged over channels.
Tensor window_variance(const Tensor& x);

// ----- convolution / dense -----
struct Conv1dSpec {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};
/// x[B,Cin,W], weight[Cout,Cin/groups,K], bias[Cout] or undefined.
/// groups must be 1 or equal to Cin (depthwise).
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv1dSpec& spec);
int conv1d_output_width(int width, int kernel, const Conv1dSpec& spec);

/// x[N,in] * weight[out,in]^T + bias[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ----- normalization -----
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ----- sequence / attention -----
/// Scaled dot-product attention over q,k,v[S,D] split into `heads`.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
Tensor mean_rows(const Tensor& x);
/// x[1,D] repeated to [n,D].
Tensor repeat_rows(const Tensor& x, int n);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);

// ----- reductions / losses -----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean(w * (pred - target)^2). `target` and `weight` carry no gradient;
/// `weight` may be undefined (all ones), [B,1,W] broadcast over channels or
/// the full shape of `pred`.
Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& weight);

}  // namespace synhat::nn
