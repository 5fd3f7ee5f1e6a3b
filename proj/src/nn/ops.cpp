// SPDX-License-Identifier: Apache-2.0
#include "synhat/nn/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace synhat::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

void require_rank(const Tensor& t, int rank, const char* op) {
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(t.shape()));
}

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(in.data[i], self.data[i]);
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

// ----- elementwise -----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      auto& g = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

// ----- broadcasting -----

Tensor add_channel(const Tensor& x, const Tensor& v) {
  require_rank(x, 3, "add_channel");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(v.shape() == Shape{B, C}, "add_channel: vector shape " + shape_str(v.shape()));
  std::vector<double> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double add = v.at(static_cast<std::size_t>(b * C + c));
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * W;
      for (int t = 0; t < W; ++t) out[base + t] = x.at(base + t) + add;
    }
  return make_result(x.shape(), std::move(out), {x, v}, [B, C, W](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (int bc = 0; bc < B * C; ++bc) {
        double acc = 0;
        for (int t = 0; t < W; ++t) acc += self.grad[static_cast<std::size_t>(bc) * W + t];
        g[bc] += acc;
      }
    }
  });
}

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  require_rank(x, 3, "mul_channel");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(v.shape() == Shape{B, C}, "mul_channel: vector shape " + shape_str(v.shape()));
  std::vector<double> out(x.numel());
  for (int bc = 0; bc < B * C; ++bc) {
    const double m = v.at(static_cast<std::size_t>(bc));
    for (int t = 0; t < W; ++t) {
      const std::size_t i = static_cast<std::size_t>(bc) * W + t;
      out[i] = x.at(i) * m;
    }
  }
  return make_result(x.shape(), std::move(out), {x, v}, [B, C, W](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nv = *self.inputs[1];
    if (nx.requires_grad) {
      auto& g = nx.grad_buffer();
      for (int bc = 0; bc < B * C; ++bc)
        for (int t = 0; t < W; ++t) {
          const std::size_t i = static_cast<std::size_t>(bc) * W + t;
          g[i] += self.grad[i] * nv.data[bc];
        }
    }
    if (nv.requires_grad) {
      auto& g = nv.grad_buffer();
      for (int bc = 0; bc < B * C; ++bc) {
        double acc = 0;
        for (int t = 0; t < W; ++t) {
          const std::size_t i = static_cast<std::size_t>(bc) * W + t;
          acc += self.grad[i] * nx.data[i];
        }
        g[bc] += acc;
      }
    }
  });
}

Tensor mul_position(const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "mul_position");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(m.shape() == Shape{B, 1, W}, "mul_position: mask shape " + shape_str(m.shape()));
  std::vector<double> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < W; ++t) {
        const std::size_t i = (static_cast<std::size_t>(b) * C + c) * W + t;
        out[i] = x.at(i) * m.at(static_cast<std::size_t>(b) * W + t);
      }
  return make_result(x.shape(), std::move(out), {x, m}, [B, C, W](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nm = *self.inputs[1];
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int t = 0; t < W; ++t) {
          const std::size_t i = (static_cast<std::size_t>(b) * C + c) * W + t;
          const std::size_t j = static_cast<std::size_t>(b) * W + t;
          if (nx.requires_grad) nx.grad_buffer()[i] += self.grad[i] * nm.data[j];
          if (nm.requires_grad) nm.grad_buffer()[j] += self.grad[i] * nx.data[i];
        }
  });
}

// ----- layout -----

Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const int B = parts[0].dim(0), W = parts[0].dim(2);
  std::vector<int> offsets;
  int C = 0;
  for (const auto& p : parts) {
    require_rank(p, 3, "concat_channels");
    require(p.dim(0) == B && p.dim(2) == W,
            "concat_channels: incompatible " + shape_str(p.shape()) + " vs " +
                shape_str(parts[0].shape()));
    offsets.push_back(C);
    C += p.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(B) * C * W);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int Ck = parts[k].dim(1);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < Ck; ++c)
        for (int t = 0; t < W; ++t)
          out[(static_cast<std::size_t>(b) * C + offsets[k] + c) * W + t] =
              parts[k].at((static_cast<std::size_t>(b) * Ck + c) * W + t);
  }
  return make_result({B, C, W}, std::move(out), parts, [B, C, W, offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const int Ck = in.shape[1];
      auto& g = in.grad_buffer();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < Ck; ++c)
          for (int t = 0; t < W; ++t)
            g[(static_cast<std::size_t>(b) * Ck + c) * W + t] +=
                self.grad[(static_cast<std::size_t>(b) * C + offsets[k] + c) * W + t];
    }
  });
}

Tensor slice_channels(const Tensor& x, int begin, int end) {
  require_rank(x, 3, "slice_channels");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(0 <= begin && begin < end && end <= C, "slice_channels: bad range");
  const int n = end - begin;
  std::vector<double> out(static_cast<std::size_t>(B) * n * W);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < n; ++c)
      for (int t = 0; t < W; ++t)
        out[(static_cast<std::size_t>(b) * n + c) * W + t] =
            x.at((static_cast<std::size_t>(b) * C + begin + c) * W + t);
  return make_result({B, n, W}, std::move(out), {x}, [B, C, W, n, begin](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < n; ++c)
        for (int t = 0; t < W; ++t)
          g[(static_cast<std::size_t>(b) * C + begin + c) * W + t] +=
              self.grad[(static_cast<std::size_t>(b) * n + c) * W + t];
  });
}

Tensor slice_width(const Tensor& x, int begin, int end) {
  require_rank(x, 3, "slice_width");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(0 <= begin && begin < end && end <= W, "slice_width: bad range");
  const int n = end - begin;
  std::vector<double> out(static_cast<std::size_t>(B) * C * n);
  for (int bc = 0; bc < B * C; ++bc)
    for (int t = 0; t < n; ++t)
      out[static_cast<std::size_t>(bc) * n + t] = x.at(static_cast<std::size_t>(bc) * W + begin + t);
  return make_result({B, C, n}, std::move(out), {x}, [B, C, W, n, begin](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int bc = 0; bc < B * C; ++bc)
      for (int t = 0; t < n; ++t)
        g[static_cast<std::size_t>(bc) * W + begin + t] += self.grad[static_cast<std::size_t>(bc) * n + t];
  });
}

Tensor pad_replicate(const Tensor& x, int width) {
  require_rank(x, 3, "pad_replicate");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(width >= W && W > 0, "pad_replicate: target narrower than input");
  if (width == W) return x;
  std::vector<double> out(static_cast<std::size_t>(B) * C * width);
  for (int bc = 0; bc < B * C; ++bc)
    for (int t = 0; t < width; ++t)
      out[static_cast<std::size_t>(bc) * width + t] =
          x.at(static_cast<std::size_t>(bc) * W + std::min(t, W - 1));
  return make_result({B, C, width}, std::move(out), {x}, [B, C, W, width](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int bc = 0; bc < B * C; ++bc)
      for (int t = 0; t < width; ++t)
        g[static_cast<std::size_t>(bc) * W + std::min(t, W - 1)] +=
            self.grad[static_cast<std::size_t>(bc) * width + t];
  });
}

Tensor window_variance(const Tensor& x) {
  require_rank(x, 3, "window_variance");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  auto idx = [W](int t, int k) { return std::clamp(t + k, 0, W - 1); };
  std::vector<double> out(static_cast<std::size_t>(B) * W, 0.0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t row = (static_cast<std::size_t>(b) * C + c) * W;
      for (int t = 0; t < W; ++t) {
        double mu = 0.0;
        for (int k = -1; k <= 1; ++k) mu += x.at(row + idx(t, k));
        mu /= 3.0;
        double v = 0.0;
        for (int k = -1; k <= 1; ++k) v += (x.at(row + idx(t, k)) - mu) * (x.at(row + idx(t, k)) - mu);
        out[static_cast<std::size_t>(b) * W + t] += v / (3.0 * C);
      }
    }
  return make_result({B, 1, W}, std::move(out), {x}, [B, C, W, idx](Node& self) {
    const Node& nx = *self.inputs[0];
    auto& g = self.inputs[0]->grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t row = (static_cast<std::size_t>(b) * C + c) * W;
        for (int t = 0; t < W; ++t) {
          double mu = 0.0;
          for (int k = -1; k <= 1; ++k) mu += nx.data[row + idx(t, k)];
          mu /= 3.0;
          const double go = self.grad[static_cast<std::size_t>(b) * W + t] * 2.0 / (3.0 * C);
          for (int k = -1; k <= 1; ++k) g[row + idx(t, k)] += go * (nx.data[row + idx(t, k)] - mu);
        }
      }
  });
}

Tensor upsample_nearest2(const Tensor& x) {
  require_rank(x, 3, "upsample_nearest2");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  std::vector<double> out(static_cast<std::size_t>(B) * C * W * 2);
  for (int bc = 0; bc < B * C; ++bc)
    for (int t = 0; t < 2 * W; ++t)
      out[static_cast<std::size_t>(bc) * 2 * W + t] = x.at(static_cast<std::size_t>(bc) * W + t / 2);
  return make_result({B, C, 2 * W}, std::move(out), {x}, [B, C, W](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int bc = 0; bc < B * C; ++bc)
      for (int t = 0; t < 2 * W; ++t)
        g[static_cast<std::size_t>(bc) * W + t / 2] += self.grad[static_cast<std::size_t>(bc) * 2 * W + t];
  });
}

// ----- convolution -----

int conv1d_output_width(int width, int kernel, const Conv1dSpec& spec) {
  return (width + 2 * spec.padding - spec.dilation * (kernel - 1) - 1) / spec.stride + 1;
}

namespace {

// Unfolds one batch item into [Cin*K, Wout].
void im2col(const double* x, int Cin, int W, int K, int Wout, const Conv1dSpec& s, double* col) {
  for (int ci = 0; ci < Cin; ++ci)
    for (int k = 0; k < K; ++k) {
      double* row = col + (static_cast<std::size_t>(ci) * K + k) * Wout;
      const double* xr = x + static_cast<std::size_t>(ci) * W;
      for (int t = 0; t < Wout; ++t) {
        const int src = t * s.stride - s.padding + k * s.dilation;
        row[t] = (src >= 0 && src < W) ? xr[src] : 0.0;
      }
    }
}

void col2im(const double* col, int Cin, int W, int K, int Wout, const Conv1dSpec& s, double* dx) {
  for (int ci = 0; ci < Cin; ++ci)
    for (int k = 0; k < K; ++k) {
      const double* row = col + (static_cast<std::size_t>(ci) * K + k) * Wout;
      double* dr = dx + static_cast<std::size_t>(ci) * W;
      for (int t = 0; t < Wout; ++t) {
        const int src = t * s.stride - s.padding + k * s.dilation;
        if (src >= 0 && src < W) dr[src] += row[t];
      }
    }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv1dSpec& spec) {
  require_rank(x, 3, "conv1d input");
  require_rank(weight, 3, "conv1d weight");
  const int B = x.dim(0), Cin = x.dim(1), W = x.dim(2);
  const int Cout = weight.dim(0), K = weight.dim(2);
  const bool depthwise = spec.groups != 1;
  if (depthwise) {
    require(spec.groups == Cin && Cout == Cin && weight.dim(1) == 1,
            "conv1d: only groups=1 or depthwise groups=Cin supported, weight " +
                shape_str(weight.shape()));
  } else {
    require(weight.dim(1) == Cin, "conv1d: weight " + shape_str(weight.shape()) +
                                      " does not match input " + shape_str(x.shape()));
  }
  if (bias.defined()) require(bias.shape() == Shape{Cout}, "conv1d: bias shape");
  require(spec.stride >= 1 && spec.dilation >= 1, "conv1d: stride/dilation must be >= 1");
  const int Wout = conv1d_output_width(W, K, spec);
  require(Wout >= 1, "conv1d: input width " + std::to_string(W) + " too small for kernel");

  std::vector<double> out(static_cast<std::size_t>(B) * Cout * Wout, 0.0);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();

  if (!depthwise) {
    add_macs(static_cast<std::uint64_t>(B) * Cout * Wout * Cin * K);
    std::vector<double> col(static_cast<std::size_t>(Cin) * K * Wout);
    CMapR wm(wd, Cout, Cin * K);
    // One GEMM per batch item keeps each sample's arithmetic independent of
    // what else is in the batch.
    for (int b = 0; b < B; ++b) {
      im2col(xd + static_cast<std::size_t>(b) * Cin * W, Cin, W, K, Wout, spec, col.data());
      MapR om(out.data() + static_cast<std::size_t>(b) * Cout * Wout, Cout, Wout);
      om.noalias() = wm * CMapR(col.data(), Cin * K, Wout);
    }
  } else {
    add_macs(static_cast<std::uint64_t>(B) * Cout * Wout * K);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < Cin; ++c) {
        const double* xr = xd + (static_cast<std::size_t>(b) * Cin + c) * W;
        double* orow = out.data() + (static_cast<std::size_t>(b) * Cout + c) * Wout;
        for (int k = 0; k < K; ++k) {
          const double w = wd[static_cast<std::size_t>(c) * K + k];
          for (int t = 0; t < Wout; ++t) {
            const int src = t * spec.stride - spec.padding + k * spec.dilation;
            if (src >= 0 && src < W) orow[t] += w * xr[src];
          }
        }
      }
  }
  if (bias.defined()) {
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < Cout; ++c) {
        double* orow = out.data() + (static_cast<std::size_t>(b) * Cout + c) * Wout;
        const double bv = bias.at(static_cast<std::size_t>(c));
        for (int t = 0; t < Wout; ++t) orow[t] += bv;
      }
  }

  return make_result(
      {B, Cout, Wout}, std::move(out), {x, weight, bias},
      [B, Cin, W, Cout, K, Wout, spec, depthwise](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nw = *self.inputs[1];
        Node& nb = *self.inputs[2];
        const double* gout = self.grad.data();
        if (nb.requires_grad) {
          auto& gb = nb.grad_buffer();
          for (int b = 0; b < B; ++b)
            for (int c = 0; c < Cout; ++c) {
              const double* gr = gout + (static_cast<std::size_t>(b) * Cout + c) * Wout;
              double acc = 0;
              for (int t = 0; t < Wout; ++t) acc += gr[t];
              gb[c] += acc;
            }
        }
        if (!depthwise) {
          std::vector<double> col(static_cast<std::size_t>(Cin) * K * Wout);
          std::vector<double> dcol(col.size());
          CMapR wm(nw.data.data(), Cout, Cin * K);
          for (int b = 0; b < B; ++b) {
            CMapR gm(gout + static_cast<std::size_t>(b) * Cout * Wout, Cout, Wout);
            if (nw.requires_grad) {
              im2col(nx.data.data() + static_cast<std::size_t>(b) * Cin * W, Cin, W, K, Wout, spec,
                     col.data());
              MapR gw(nw.grad_buffer().data(), Cout, Cin * K);
              gw.noalias() += gm * CMapR(col.data(), Cin * K, Wout).transpose();
            }
            if (nx.requires_grad) {
              MapR dc(dcol.data(), Cin * K, Wout);
              dc.noalias() = wm.transpose() * gm;
              col2im(dcol.data(), Cin, W, K, Wout, spec,
                     nx.grad_buffer().data() + static_cast<std::size_t>(b) * Cin * W);
            }
          }
        } else {
          for (int b = 0; b < B; ++b)
            for (int c = 0; c < Cin; ++c) {
              const std::size_t xo = (static_cast<std::size_t>(b) * Cin + c) * W;
              const double* gr = gout + (static_cast<std::size_t>(b) * Cout + c) * Wout;
              for (int k = 0; k < K; ++k) {
                const double w = nw.data[static_cast<std::size_t>(c) * K + k];
                double gw = 0;
                for (int t = 0; t < Wout; ++t) {
                  const int src = t * spec.stride - spec.padding + k * spec.dilation;
                  if (src < 0 || src >= W) continue;
                  gw += gr[t] * nx.data[xo + src];
                  if (nx.requires_grad) nx.grad_buffer()[xo + src] += gr[t] * w;
                }
                if (nw.requires_grad) nw.grad_buffer()[static_cast<std::size_t>(c) * K + k] += gw;
              }
            }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const int N = x.dim(0), In = x.dim(1), Out = weight.dim(0);
  require(weight.dim(1) == In, "linear: weight " + shape_str(weight.shape()) + " vs input " +
                                   shape_str(x.shape()));
  if (bias.defined()) require(bias.shape() == Shape{Out}, "linear: bias shape");
  add_macs(static_cast<std::uint64_t>(N) * In * Out);
  std::vector<double> out(static_cast<std::size_t>(N) * Out);
  MapR om(out.data(), N, Out);
  // Row by row so a row's result does not depend on how many rows share the call.
  const CMapR wm(weight.data().data(), Out, In);
  for (int n = 0; n < N; ++n)
    om.row(n).noalias() = (wm * CMapR(x.data().data() + static_cast<std::size_t>(n) * In, 1, In).transpose()).transpose();
  if (bias.defined())
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < Out; ++o) out[static_cast<std::size_t>(n) * Out + o] += bias.at(o);
  return make_result({N, Out}, std::move(out), {x, weight, bias}, [N, In, Out](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    Node& nb = *self.inputs[2];
    CMapR gm(self.grad.data(), N, Out);
    if (nx.requires_grad) {
      MapR(nx.grad_buffer().data(), N, In).noalias() += gm * CMapR(nw.data.data(), Out, In);
    }
    if (nw.requires_grad) {
      MapR(nw.grad_buffer().data(), Out, In).noalias() += gm.transpose() * CMapR(nx.data.data(), N, In);
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < Out; ++o) gb[o] += self.grad[static_cast<std::size_t>(n) * Out + o];
    }
  });
}

// ----- normalization -----

namespace {

// Forward state kept for the normalization backward passes.
struct NormCache {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

}  // namespace

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 3, "group_norm");
  const int B = x.dim(0), C = x.dim(1), W = x.dim(2);
  require(groups >= 1 && C % groups == 0,
          "group_norm: " + std::to_string(C) + " channels not divisible by " + std::to_string(groups));
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "group_norm: affine shape");
  const int per = C / groups;
  const std::size_t n = static_cast<std::size_t>(per) * W;

  auto cache = std::make_shared<NormCache>();
  cache->xhat.resize(x.numel());
  cache->inv_std.resize(static_cast<std::size_t>(B) * groups);
  std::vector<double> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(b) * C + static_cast<std::size_t>(g) * per) * W;
      double m = 0;
      for (std::size_t i = 0; i < n; ++i) m += x.at(base + i);
      m /= static_cast<double>(n);
      double v = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = x.at(base + i) - m;
        v += d * d;
      }
      v /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(v + eps);
      cache->inv_std[static_cast<std::size_t>(b) * groups + g] = is;
      for (std::size_t i = 0; i < n; ++i) {
        const int c = g * per + static_cast<int>(i / W);
        const double xh = (x.at(base + i) - m) * is;
        cache->xhat[base + i] = xh;
        out[base + i] = xh * gamma.at(c) + beta.at(c);
      }
    }

  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [B, C, W, groups, per, n, cache](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& nb = *self.inputs[2];
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + static_cast<std::size_t>(g) * per) * W;
        double sum_d = 0, sum_dx = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const int c = g * per + static_cast<int>(i / W);
          const double dy = self.grad[base + i];
          const double xh = cache->xhat[base + i];
          if (ng.requires_grad) ng.grad_buffer()[c] += dy * xh;
          if (nb.requires_grad) nb.grad_buffer()[c] += dy;
          const double dxh = dy * ng.data[c];
          sum_d += dxh;
          sum_dx += dxh * xh;
        }
        if (!nx.requires_grad) continue;
        auto& gx = nx.grad_buffer();
        const double is = cache->inv_std[static_cast<std::size_t>(b) * groups + g];
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const int c = g * per + static_cast<int>(i / W);
          const double dxh = self.grad[base + i] * ng.data[c];
          gx[base + i] += is * (dxh - inv_n * sum_d - cache->xhat[base + i] * inv_n * sum_dx);
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int N = x.dim(0), D = x.dim(1);
  require(gamma.shape() == Shape{D} && beta.shape() == Shape{D}, "layer_norm: affine shape");
  auto cache = std::make_shared<NormCache>();
  cache->xhat.resize(x.numel());
  cache->inv_std.resize(static_cast<std::size_t>(N));
  std::vector<double> out(x.numel());
  for (int r = 0; r < N; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * D;
    double m = 0;
    for (int j = 0; j < D; ++j) m += x.at(base + j);
    m /= D;
    double v = 0;
    for (int j = 0; j < D; ++j) v += (x.at(base + j) - m) * (x.at(base + j) - m);
    v /= D;
    const double is = 1.0 / std::sqrt(v + eps);
    cache->inv_std[r] = is;
    for (int j = 0; j < D; ++j) {
      const double xh = (x.at(base + j) - m) * is;
      cache->xhat[base + j] = xh;
      out[base + j] = xh * gamma.at(j) + beta.at(j);
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [N, D, cache](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& nb = *self.inputs[2];
    for (int r = 0; r < N; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * D;
      double sum_d = 0, sum_dx = 0;
      for (int j = 0; j < D; ++j) {
        const double dy = self.grad[base + j];
        const double xh = cache->xhat[base + j];
        if (ng.requires_grad) ng.grad_buffer()[j] += dy * xh;
        if (nb.requires_grad) nb.grad_buffer()[j] += dy;
        sum_d += dy * ng.data[j];
        sum_dx += dy * ng.data[j] * xh;
      }
      if (!nx.requires_grad) continue;
      auto& gx = nx.grad_buffer();
      for (int j = 0; j < D; ++j) {
        const double dxh = self.grad[base + j] * ng.data[j];
        gx[base + j] += cache->inv_std[r] * (dxh - sum_d / D - cache->xhat[base + j] * sum_dx / D);
      }
    }
  });
}

// ----- attention -----

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  require_rank(q, 2, "attention q");
  require_same_shape(q, k, "attention q/k");
  require_same_shape(q, v, "attention q/v");
  const int S = q.dim(0), D = q.dim(1);
  require(heads >= 1 && D % heads == 0, "attention: width not divisible by heads");
  const int dh = D / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  add_macs(2ull * heads * S * S * dh);

  // probs[h][i*S + j]
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads) * S * S);
  std::vector<double> out(static_cast<std::size_t>(S) * D, 0.0);
  for (int h = 0; h < heads; ++h) {
    double* P = probs->data() + static_cast<std::size_t>(h) * S * S;
    for (int i = 0; i < S; ++i) {
      double mx = -1e300;
      for (int j = 0; j < S; ++j) {
        double s = 0;
        for (int e = 0; e < dh; ++e)
          s += q.at(static_cast<std::size_t>(i) * D + h * dh + e) *
               k.at(static_cast<std::size_t>(j) * D + h * dh + e);
        s *= inv_sqrt;
        P[static_cast<std::size_t>(i) * S + j] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (int j = 0; j < S; ++j) {
        double& p = P[static_cast<std::size_t>(i) * S + j];
        p = std::exp(p - mx);
        z += p;
      }
      for (int j = 0; j < S; ++j) P[static_cast<std::size_t>(i) * S + j] /= z;
      for (int j = 0; j < S; ++j) {
        const double p = P[static_cast<std::size_t>(i) * S + j];
        for (int e = 0; e < dh; ++e)
          out[static_cast<std::size_t>(i) * D + h * dh + e] += p * v.at(static_cast<std::size_t>(j) * D + h * dh + e);
      }
    }
  }

  return make_result({S, D}, std::move(out), {q, k, v}, [S, D, heads, dh, inv_sqrt, probs](Node& self) {
    Node& nq = *self.inputs[0];
    Node& nk = *self.inputs[1];
    Node& nv = *self.inputs[2];
    std::vector<double> dP(static_cast<std::size_t>(S) * S);
    for (int h = 0; h < heads; ++h) {
      const double* P = probs->data() + static_cast<std::size_t>(h) * S * S;
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
          double acc = 0;
          for (int e = 0; e < dh; ++e)
            acc += self.grad[static_cast<std::size_t>(i) * D + h * dh + e] *
                   nv.data[static_cast<std::size_t>(j) * D + h * dh + e];
          dP[static_cast<std::size_t>(i) * S + j] = acc;
        }
      if (nv.requires_grad) {
        auto& gv = nv.grad_buffer();
        for (int i = 0; i < S; ++i)
          for (int j = 0; j < S; ++j) {
            const double p = P[static_cast<std::size_t>(i) * S + j];
            for (int e = 0; e < dh; ++e)
              gv[static_cast<std::size_t>(j) * D + h * dh + e] += p * self.grad[static_cast<std::size_t>(i) * D + h * dh + e];
          }
      }
      // Softmax backward, then fold in the 1/sqrt(dh) scale.
      for (int i = 0; i < S; ++i) {
        double dot = 0;
        for (int j = 0; j < S; ++j) dot += dP[static_cast<std::size_t>(i) * S + j] * P[static_cast<std::size_t>(i) * S + j];
        for (int j = 0; j < S; ++j) {
          double& d = dP[static_cast<std::size_t>(i) * S + j];
          d = P[static_cast<std::size_t>(i) * S + j] * (d - dot) * inv_sqrt;
        }
      }
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
          const double ds = dP[static_cast<std::size_t>(i) * S + j];
          if (ds == 0.0) continue;
          for (int e = 0; e < dh; ++e) {
            const std::size_t qi = static_cast<std::size_t>(i) * D + h * dh + e;
            const std::size_t kj = static_cast<std::size_t>(j) * D + h * dh + e;
            if (nq.requires_grad) nq.grad_buffer()[qi] += ds * nk.data[kj];
            if (nk.requires_grad) nk.grad_buffer()[kj] += ds * nq.data[qi];
          }
        }
    }
  });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const int N = x.dim(0), D = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(D), 0.0);
  for (int r = 0; r < N; ++r)
    for (int j = 0; j < D; ++j) out[j] += x.at(static_cast<std::size_t>(r) * D + j) / N;
  return make_result({1, D}, std::move(out), {x}, [N, D](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int r = 0; r < N; ++r)
      for (int j = 0; j < D; ++j) g[static_cast<std::size_t>(r) * D + j] += self.grad[j] / N;
  });
}

Tensor repeat_rows(const Tensor& x, int n) {
  require(x.rank() == 2 && x.dim(0) == 1, "repeat_rows: expects [1,D]");
  const int D = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n) * D);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < D; ++j) out[static_cast<std::size_t>(r) * D + j] = x.at(j);
  return make_result({n, D}, std::move(out), {x}, [n, D](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < D; ++j) g[j] += self.grad[static_cast<std::size_t>(r) * D + j];
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  require_rank(x, 2, "gather_rows");
  const int N = x.dim(0), D = x.dim(1);
  const int n = static_cast<int>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(n) * D);
  for (int r = 0; r < n; ++r) {
    require(rows[r] >= 0 && rows[r] < N, "gather_rows: index out of range");
    for (int j = 0; j < D; ++j)
      out[static_cast<std::size_t>(r) * D + j] = x.at(static_cast<std::size_t>(rows[r]) * D + j);
  }
  return make_result({n, D}, std::move(out), {x}, [rows, D](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (int j = 0; j < D; ++j)
        g[static_cast<std::size_t>(rows[r]) * D + j] += self.grad[r * D + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int D = parts[0].dim(1);
  int N = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(1) == D, "concat_rows: width mismatch");
    N += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result({N, D}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->data.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), "concat_cols: row mismatch");
  const int N = a.dim(0), Da = a.dim(1), Db = b.dim(1), D = Da + Db;
  std::vector<double> out(static_cast<std::size_t>(N) * D);
  for (int r = 0; r < N; ++r) {
    for (int j = 0; j < Da; ++j) out[static_cast<std::size_t>(r) * D + j] = a.at(static_cast<std::size_t>(r) * Da + j);
    for (int j = 0; j < Db; ++j) out[static_cast<std::size_t>(r) * D + Da + j] = b.at(static_cast<std::size_t>(r) * Db + j);
  }
  return make_result({N, D}, std::move(out), {a, b}, [N, Da, Db, D](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (int r = 0; r < N; ++r) {
      if (na.requires_grad)
        for (int j = 0; j < Da; ++j) na.grad_buffer()[static_cast<std::size_t>(r) * Da + j] += self.grad[static_cast<std::size_t>(r) * D + j];
      if (nb.requires_grad)
        for (int j = 0; j < Db; ++j) nb.grad_buffer()[static_cast<std::size_t>(r) * Db + j] += self.grad[static_cast<std::size_t>(r) * D + Da + j];
    }
  });
}

// ----- reductions -----

Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& weight) {
  require_same_shape(pred, target, "weighted_mse");
  const std::size_t n = pred.numel();
  int C = 1, W = 1;
  bool full = false;
  if (weight.defined()) {
    require_rank(pred, 3, "weighted_mse");
    C = pred.dim(1);
    W = pred.dim(2);
    full = weight.shape() == pred.shape();
    require(full || weight.shape() == Shape{pred.dim(0), 1, W},
            "weighted_mse: weight shape " + shape_str(weight.shape()));
  }
  auto w_of = [&](std::size_t i) -> double {
    if (!weight.defined()) return 1.0;
    if (full) return weight.at(i);
    const std::size_t b = i / (static_cast<std::size_t>(C) * W);
    const std::size_t t = i % static_cast<std::size_t>(W);
    return weight.at(b * W + t);
  };
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.at(i) - target.at(i);
    acc += w_of(i) * d * d;
  }
  std::vector<double> coef(n);
  for (std::size_t i = 0; i < n; ++i) coef[i] = 2.0 * w_of(i) * (pred.at(i) - target.at(i)) / static_cast<double>(n);
  return make_result({1}, {acc / static_cast<double>(n)}, {pred},
                     [coef = std::move(coef)](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * coef[i];
  });
}

}  // namespace synhat::nn
