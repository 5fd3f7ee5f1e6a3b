// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "synhat/bpem.hpp"
#include "synhat/nn/ops.hpp"

using namespace synhat;
using namespace synhat::bpem;
using nn::Tensor;

namespace {

std::vector<double> row(const Tensor& t, int r) {
  const int d = t.dim(1);
  return {t.data().begin() + r * d, t.data().begin() + (r + 1) * d};
}

}  // namespace

TEST_CASE("positional encoding") {
  const auto z = positional_encoding(0.0, 8);
  for (int j = 1; j <= 8; ++j) CHECK(z[j - 1] == (j % 2 == 0 ? 0.0 : 1.0));
  for (double T : {0.0, 1.0, 17.0, 1e4}) {
    for (double v : positional_encoding(T, 32)) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
  const auto e = positional_encoding(1.0, 4);
  CHECK(e[0] == doctest::Approx(std::cos(1.0)));
  CHECK(e[1] == doctest::Approx(std::sin(1.0 / std::pow(10000.0, 0.25))));
  CHECK(e[2] == doctest::Approx(std::cos(1.0 / std::pow(10000.0, 0.5))));
  CHECK(e[3] == doctest::Approx(std::sin(1.0 / std::pow(10000.0, 0.75))));
}

TEST_CASE("spatial embedding is the affine map") {
  nn::Rng rng(1);
  Bpem m({8, 5}, rng);
  std::mt19937_64 r(2);
  Tensor c = testing::random_tensor({3, 2}, r, false);
  Tensor v = testing::random_tensor({3, 5}, r, false);
  auto e = m.spatial_embed(c, v);
  for (int i = 0; i < 3; ++i)
    for (int o = 0; o < 8; ++o) {
      double s = m.bias.at(o);
      for (int k = 0; k < 2; ++k) s += m.w_c.weight.at(o * 2 + k) * c.at(i * 2 + k);
      for (int k = 0; k < 5; ++k) s += m.w_v.weight.at(o * 5 + k) * v.at(i * 5 + k);
      CHECK(e.at(i * 8 + o) == doctest::Approx(s).epsilon(1e-12));
    }

  for (double& x : m.w_c.weight.data()) x = 0.0;
  for (double& x : m.w_v.weight.data()) x = 0.0;
  auto b = m.spatial_embed(c, v);
  for (int i = 0; i < 3; ++i) CHECK(row(b, i) == std::vector<double>(m.bias.data().begin(), m.bias.data().end()));

  nn::Rng rng2(3);
  Bpem lin({8, 5}, rng2);
  for (double& x : lin.w_v.weight.data()) x = 0.0;
  for (double& x : lin.bias.data()) x = 0.0;
  auto e1 = lin.spatial_embed(c, v);
  auto e2 = lin.spatial_embed(nn::scale(c, 2.0), v);
  for (std::size_t i = 0; i < e1.numel(); ++i) CHECK(e2.at(i) == doctest::Approx(2.0 * e1.at(i)));
  CHECK_THROWS(lin.spatial_embed(c, Tensor::zeros({3, 4})));
}

TEST_CASE("encode shapes, determinism and errors") {
  nn::Rng rng(4);
  Bpem m({32, 24}, rng);
  std::mt19937_64 r(5);
  std::normal_distribution<double> g;
  std::vector<double> visits(24, 0.0);
  for (int n = 1; n <= 64; n += 9) {
    std::vector<Coord> c(n);
    std::vector<int> s(n);
    for (int i = 0; i < n; ++i) {
      c[i] = {g(r), g(r)};
      s[i] = i % 24;
      visits[i % 24] = 1.0;
    }
    auto H = m.encode(c, s, visits);
    CHECK(H.shape() == nn::Shape{n, 32});
    auto H2 = m.encode(c, s, visits);
    CHECK(std::vector<double>(H.data().begin(), H.data().end()) ==
          std::vector<double>(H2.data().begin(), H2.data().end()));
    CHECK(Bpem::context_vectors(H).shape() == nn::Shape{n, 64});
  }
  CHECK(m.encode({{0.1, 0.2}}, {3}, visits).shape() == nn::Shape{1, 32});
  CHECK_THROWS(m.encode({}, {}, visits));
  CHECK_THROWS(m.encode({{0, 0}}, {0}, std::vector<double>(5)));
}

TEST_CASE("encode is permutation equivariant") {
  nn::Rng rng(6);
  Bpem m({16, 10}, rng);
  std::vector<double> visits{1, 0, 1, 0, 0, 1, 0, 0, 0, 1};
  std::vector<Coord> c{{0.1, 0.2}, {-0.3, 0.5}, {0.7, -0.1}, {0.0, 0.0}};
  std::vector<int> s{0, 2, 5, 9};
  auto H = m.encode(c, s, visits);
  auto P = m.encode({c[2], c[0], c[3], c[1]}, {s[2], s[0], s[3], s[1]}, visits);
  const int perm[] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) {
    auto a = row(P, i), b = row(H, perm[i]);
    for (int k = 0; k < 16; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-12));
  }
  // Identical embeddings give identical rows.
  auto same = m.encode({c[0], c[0]}, {s[0], s[0]}, visits);
  CHECK(row(same, 0) == row(same, 1));
}

TEST_CASE("context vectors and gradients") {
  nn::Rng rng(7);
  Bpem m({8, 6}, rng);
  std::vector<double> visits{1, 1, 0, 0, 1, 0};
  auto H = m.encode({{0.3, 0.1}, {0.2, -0.4}, {1.0, 0.9}}, {0, 1, 4}, visits);
  auto ctx = Bpem::context_vectors(H);
  for (int k = 0; k < 8; ++k) {
    const double mean = (H.at(k) + H.at(8 + k) + H.at(16 + k)) / 3.0;
    for (int i = 0; i < 3; ++i) {
      CHECK(ctx.at(i * 16 + k) == H.at(i * 8 + k));
      CHECK(ctx.at(i * 16 + 8 + k) == doctest::Approx(mean));
    }
  }
  auto loss = nn::mean(nn::mul(ctx, ctx));
  loss.backward();
  for (auto& [name, t] : m.parameters()) {
    double norm = 0;
    for (double v : t.grad()) norm += v * v;
    CAPTURE(name);
    CHECK(std::isfinite(norm));
  }
  CHECK(m.encode_calls() == 1);
  m.reset_encode_calls();
  CHECK(m.encode_calls() == 0);
}
