#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "stsmcd/errors.hpp"
#include "stsmcd/gradcheck.hpp"
#include "stsmcd/rng.hpp"
#include "stsmcd/scan2d.hpp"

using namespace stsmcd;
using namespace stsmcd::scan2d;

namespace {

std::vector<double> column(const Tensor& seq) { return seq.vec(); }

Tensor rotate180(const Tensor& f) {
  const std::size_t H = f.dim(0), W = f.dim(1), C = f.dim(2);
  Tensor out(f.shape());
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c) out.at({H - 1 - i, W - 1 - j, c}) = f.at({i, j, c});
  return out;
}

double softplus_ref(double v) { return v > 30 ? v : std::log1p(std::exp(v)); }

// Independent re-derivation of one SS2D forward pass from the parameter
// tensors, built on the sequential reference scan.
Tensor ss2d_reference(const Tensor& feature, const Ss2dParams& p) {
  const std::size_t H = feature.dim(0), W = feature.dim(1), D = feature.dim(2);
  const std::size_t R = p.dt_rank, N = p.options.state_size, L = H * W;
  Tensor out({H, W, D});
  for (std::size_t k = 0; k < kDirections; ++k) {
    const DirectionParams& dp = p.dirs[k];
    const auto layout = make_layout(k + 1, H, W);
    ssm::SelectiveInputs in;
    in.x = Tensor({L, D});
    in.delta = Tensor({L, D});
    in.B = Tensor({L, N});
    in.C = Tensor({L, N});
    if (p.options.skip) in.d_skip = dp.d_skip->value;
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t pos = layout.forward[t];
      std::vector<double> proj(R + 2 * N, 0.0);
      for (std::size_t d = 0; d < D; ++d) {
        in.x[t * D + d] = feature[pos * D + d];
        for (std::size_t j = 0; j < R + 2 * N; ++j) proj[j] += feature[pos * D + d] * dp.x_proj->value[d * (R + 2 * N) + j];
      }
      for (std::size_t n = 0; n < N; ++n) {
        in.B[t * N + n] = proj[R + n];
        in.C[t * N + n] = proj[R + N + n];
      }
      for (std::size_t d = 0; d < D; ++d) {
        double z = dp.dt_bias->value[d];
        for (std::size_t r = 0; r < R; ++r) z += proj[r] * dp.dt_proj->value[r * D + d];
        in.delta[t * D + d] = softplus_ref(z);
      }
    }
    Tensor A({D, N});
    for (std::size_t i = 0; i < D * N; ++i) A[i] = -std::exp(dp.a_log->value[i]);
    const Tensor y = ssm::selective_scan_sequential(in, A, p.options.mode);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t d = 0; d < D; ++d) out[layout.forward[t] * D + d] += y[t * D + d];
  }
  return out;
}

}  // namespace

TEST_CASE("cross-scan of a 2x2 grid") {
  const Tensor f({2, 2, 1}, {1, 2, 3, 4});
  const auto seqs = cross_scan_expand(f);
  CHECK(column(seqs[0]) == std::vector<double>{1, 2, 3, 4});
  CHECK(column(seqs[1]) == std::vector<double>{4, 3, 2, 1});
  CHECK(column(seqs[2]) == std::vector<double>{1, 3, 2, 4});
  CHECK(column(seqs[3]) == std::vector<double>{4, 2, 3, 1});

  const auto single = cross_scan_expand(Tensor({1, 1, 1}, {7.5}));
  for (const auto& s : single) CHECK(column(s) == std::vector<double>{7.5});
}

TEST_CASE("directional layouts are bijections up to 8x8") {
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t W = 1; W <= 8; ++W) {
      const auto layouts = make_layouts(H, W);
      for (const auto& l : layouts) {
        std::vector<std::size_t> sorted = l.forward;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t k = 0; k < H * W; ++k) {
          REQUIRE(sorted[k] == k);
          REQUIRE(l.inverse[l.forward[k]] == k);
        }
      }
      for (std::size_t k = 0; k < H * W; ++k) {
        REQUIRE(layouts[1].forward[k] == layouts[0].forward[H * W - 1 - k]);
        REQUIRE(layouts[3].forward[k] == layouts[2].forward[H * W - 1 - k]);
      }
    }
  CHECK_THROWS_AS(make_layout(5, 2, 2), DomainError);
  CHECK_THROWS_AS(make_layout(0, 2, 2), DomainError);
}

TEST_CASE("merge of expand is four times the identity") {
  Rng rng(21);
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t W = 1; W <= 8; ++W) {
      const Tensor f = uniform_tensor({H, W, 2}, rng, -1, 1);
      const Tensor m = cross_scan_merge(cross_scan_expand(f), H, W);
      for (std::size_t i = 0; i < f.size(); ++i) REQUIRE(m[i] == 4.0 * f[i]);
    }
}

TEST_CASE("scattering each sequence recovers the input") {
  Rng rng(22);
  const Tensor f = uniform_tensor({5, 7, 3}, rng, -1, 1);
  const auto seqs = cross_scan_expand(f);
  for (std::size_t d = 0; d < kDirections; ++d) {
    std::array<Tensor, kDirections> only;
    for (std::size_t e = 0; e < kDirections; ++e) only[e] = e == d ? seqs[d] : Tensor(seqs[d].shape());
    CHECK(max_abs_diff(cross_scan_merge(only, 5, 7), f) == 0.0);
  }
}

TEST_CASE("merge is linear") {
  Rng rng(23);
  std::array<Tensor, kDirections> s, t, st;
  for (std::size_t d = 0; d < kDirections; ++d) {
    s[d] = uniform_tensor({12, 2}, rng, -1, 1);
    t[d] = uniform_tensor({12, 2}, rng, -1, 1);
    st[d] = Tensor({12, 2});
    for (std::size_t i = 0; i < 24; ++i) st[d][i] = s[d][i] + t[d][i];
  }
  const Tensor a = cross_scan_merge(st, 3, 4);
  const Tensor b = cross_scan_merge(s, 3, 4);
  const Tensor c = cross_scan_merge(t, 3, 4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i] + c[i]).epsilon(1e-15));
  CHECK_THROWS_AS(cross_scan_merge(s, 4, 4), ShapeError);
}

TEST_CASE("ss2d with zero projections reduces to the skip path") {
  Rng rng(24);
  ParamStore store;
  Ss2dParams p = make_ss2d(store, "ss2d", 3, {2, ssm::Discretization::euler_b, true}, rng);
  for (auto& d : p.dirs) {
    d.x_proj->value.fill(0.0);
    d.d_skip->value.fill(0.5);
  }
  const Tensor f = uniform_tensor({3, 4, 3}, rng, -1, 1);
  Graph g;
  const Tensor y = ss2d_forward(g.input(f), p).value();
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(y[i] == 2.0 * f[i]);
}

TEST_CASE("ss2d equals an independent per-direction reference") {
  for (auto mode : {ssm::Discretization::euler_b, ssm::Discretization::exact_zoh}) {
    Rng rng(25);
    ParamStore store;
    Ss2dParams p = make_ss2d(store, "ss2d", 4, {3, mode, true}, rng);
    for (auto& d : p.dirs) d.d_skip->value = uniform_tensor({4}, rng, -1, 1);
    for (Shape s : {Shape{1, 1, 4}, Shape{3, 5, 4}}) {
      const Tensor f = uniform_tensor(s, rng, -1, 1);
      Graph g;
      CHECK(max_abs_diff(ss2d_forward(g.input(f), p).value(), ss2d_reference(f, p)) <= 1e-12);
    }
  }
}

TEST_CASE("rotating the input by 180 degrees swaps the direction pairs") {
  Rng rng(26);
  ParamStore store;
  Ss2dParams p = make_ss2d(store, "ss2d", 3, {2, ssm::Discretization::euler_b, true}, rng);
  for (auto& d : p.dirs) d.a_log->value = uniform_tensor(d.a_log->value.shape(), rng, -1, 1);
  Ss2dParams swapped = p;
  std::swap(swapped.dirs[0], swapped.dirs[1]);
  std::swap(swapped.dirs[2], swapped.dirs[3]);
  const Tensor f = uniform_tensor({3, 3, 3}, rng, -1, 1);
  Graph g;
  const Tensor y = ss2d_forward(g.input(f), p).value();
  const Tensor y_rot = ss2d_forward(g.input(rotate180(f)), swapped).value();
  CHECK(max_abs_diff(y_rot, rotate180(y)) <= 1e-12);
}

TEST_CASE("ss2d gradients match finite differences") {
  Rng rng(27);
  ParamStore store;
  Ss2dParams p = make_ss2d(store, "ss2d", 4, {2, ssm::Discretization::euler_b, true}, rng);
  Parameter feature("feature", uniform_tensor({3, 3, 4}, rng, -1, 1));
  std::vector<Parameter*> leaves{&feature};
  for (auto& q : store) leaves.push_back(q.get());
  const auto r = gradcheck::check(
      leaves, [&](Graph& g) { return gradcheck::random_projection(ss2d_forward(g.param(feature), p), 3); });
  INFO("max rel " << r.max_rel_error);
  CHECK(r.passed);
  CHECK(r.coordinates.size() == 64);
}

TEST_CASE("ss2d rejects a channel mismatch") {
  Rng rng(28);
  ParamStore store;
  Ss2dParams p = make_ss2d(store, "ss2d", 4, {}, rng);
  Graph g;
  CHECK_THROWS_AS(ss2d_forward(g.input(Tensor({2, 2, 3})), p), ShapeError);
}
