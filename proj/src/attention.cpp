#include "stsmcd/attention.hpp"

#include <algorithm>
#include <cmath>

#include "stsmcd/errors.hpp"

namespace stsmcd::attention {

namespace {

void check(const Tensor& x, const AttentionParams& p) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ShapeError("attention: x must be [L, D] with L >= 1, got " + shape_str(x.shape()));
  const Shape sq{x.dim(1), x.dim(1)};
  if (p.wq.shape() != sq || p.wk.shape() != sq || p.wv.shape() != sq) {
    throw ShapeError("attention: projections must be " + shape_str(sq));
  }
}

Tensor project(const Tensor& x, const Tensor& w) {
  const std::size_t L = x.dim(0), D = x.dim(1);
  Tensor y({L, D});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t i = 0; i < D; ++i) {
      const double xi = x[t * D + i];
      for (std::size_t j = 0; j < D; ++j) y[t * D + j] += xi * w[i * D + j];
    }
  return y;
}

// Softmax weights of query row t over all keys, into w.
void row_weights(const Tensor& q, const Tensor& k, std::size_t t, std::vector<double>& w) {
  const std::size_t L = q.dim(0), D = q.dim(1);
  const double inv = 1.0 / std::sqrt(static_cast<double>(D));
  double top = -INFINITY;
  for (std::size_t s = 0; s < L; ++s) {
    double dot = 0.0;
    for (std::size_t j = 0; j < D; ++j) dot += q[t * D + j] * k[s * D + j];
    w[s] = dot * inv;
    top = std::max(top, w[s]);
  }
  double sum = 0.0;
  for (double& v : w) sum += v = std::exp(v - top);
  for (double& v : w) v /= sum;
}

}  // namespace

AttentionParams make_attention(std::size_t width, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  return {uniform_tensor({width, width}, rng, -bound, bound), uniform_tensor({width, width}, rng, -bound, bound),
          uniform_tensor({width, width}, rng, -bound, bound)};
}

Tensor naive_attention(const Tensor& x, const AttentionParams& p) {
  check(x, p);
  const std::size_t L = x.dim(0), D = x.dim(1);
  const Tensor q = project(x, p.wq), k = project(x, p.wk), v = project(x, p.wv);
  Tensor y({L, D});
  std::vector<double> w(L);
  for (std::size_t t = 0; t < L; ++t) {
    row_weights(q, k, t, w);
    for (std::size_t s = 0; s < L; ++s)
      for (std::size_t j = 0; j < D; ++j) y[t * D + j] += w[s] * v[s * D + j];
  }
  return y;
}

Tensor attention_weights(const Tensor& x, const AttentionParams& p) {
  check(x, p);
  const std::size_t L = x.dim(0);
  const Tensor q = project(x, p.wq), k = project(x, p.wk);
  Tensor out({L, L});
  std::vector<double> w(L);
  for (std::size_t t = 0; t < L; ++t) {
    row_weights(q, k, t, w);
    std::copy(w.begin(), w.end(), out.vec().begin() + static_cast<long>(t * L));
  }
  return out;
}

}  // namespace stsmcd::attention
