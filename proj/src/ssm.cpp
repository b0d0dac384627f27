#include "stsmcd/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <thread>

#include "stsmcd/errors.hpp"

namespace stsmcd::ssm {

namespace {

// d/dz [(exp(z) - 1) / z]
double expm1_over_x_deriv(double z) {
  if (std::abs(z) < 1e-3) return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

void check_delta(double delta) {
  if (!(delta > 0.0)) throw DomainError("time scale delta must be > 0, got " + std::to_string(delta));
}

struct ScanDims {
  std::size_t L, D, N;
};

ScanDims check_selective(const SelectiveInputs& in, const Tensor& A) {
  if (in.x.rank() != 2 || in.x.dim(0) == 0) throw ShapeError("selective scan: x must be [L,D] with L >= 1");
  const std::size_t L = in.x.dim(0), D = in.x.dim(1);
  if (A.rank() != 2 || A.dim(0) != D) throw ShapeError("selective scan: A must be [D,N]");
  const std::size_t N = A.dim(1);
  if (in.delta.shape() != Shape{L, D}) throw ShapeError("selective scan: delta must be [L,D]");
  if (in.B.shape() != Shape{L, N} || in.C.shape() != Shape{L, N}) {
    throw ShapeError("selective scan: B and C must be [L,N]");
  }
  if (in.d_skip && in.d_skip->shape() != Shape{D}) throw ShapeError("selective scan: d_skip must be [D]");
  for (double v : in.delta.vec()) check_delta(v);
  return {L, D, N};
}

inline double input_coef(Discretization mode, double delta, double a, double b) {
  if (mode == Discretization::euler_b) return delta * b;
  return delta * b * expm1_over_x(delta * a);
}

}  // namespace

double expm1_over_x(double z) {
  if (z == 0.0) return 1.0;
  if (std::abs(z) < 1e-5) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

DiscretePair zoh_discretize(double a, double b, double delta) {
  check_delta(delta);
  return {std::exp(delta * a), delta * b * expm1_over_x(delta * a)};
}

DiscreteSsm discretize(std::span<const double> a, std::span<const double> b, double delta) {
  if (a.size() != b.size()) throw ShapeError("discretize: a and b lengths differ");
  DiscreteSsm sys;
  for (std::size_t n = 0; n < a.size(); ++n) {
    const auto p = zoh_discretize(a[n], b[n], delta);
    sys.a_bar.push_back(p.a_bar);
    sys.b_bar.push_back(p.b_bar);
  }
  return sys;
}

std::vector<double> lti_recurrent_scan(const DiscreteSsm& sys, std::span<const double> c, std::span<const double> x) {
  if (x.empty()) throw ShapeError("lti_recurrent_scan: empty sequence");
  const std::size_t N = sys.a_bar.size();
  if (sys.b_bar.size() != N || c.size() != N) throw ShapeError("lti_recurrent_scan: state size mismatch");
  std::vector<double> h(N, 0.0), y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      h[n] = sys.a_bar[n] * h[n] + sys.b_bar[n] * x[t];
      acc += c[n] * h[n];
    }
    y[t] = acc;
  }
  return y;
}

std::vector<double> lti_conv_kernel(const DiscreteSsm& sys, std::span<const double> c, std::size_t length) {
  if (length < 1) throw ShapeError("lti_conv_kernel: length must be >= 1");
  const std::size_t N = sys.a_bar.size();
  if (sys.b_bar.size() != N || c.size() != N) throw ShapeError("lti_conv_kernel: state size mismatch");
  std::vector<double> kernel(length, 0.0);
  std::vector<double> power(sys.b_bar.begin(), sys.b_bar.end());  // a_bar^k * b_bar
  for (std::size_t k = 0; k < length; ++k) {
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      acc += c[n] * power[n];
      power[n] *= sys.a_bar[n];
    }
    kernel[k] = acc;
  }
  return kernel;
}

std::vector<double> lti_conv_apply(std::span<const double> kernel, std::span<const double> x) {
  if (kernel.size() != x.size()) throw ShapeError("lti_conv_apply: kernel and input lengths differ");
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double acc = 0.0;
    for (std::size_t k = 0; k <= t; ++k) acc += kernel[k] * x[t - k];
    y[t] = acc;
  }
  return y;
}

Tensor selective_scan_sequential(const SelectiveInputs& in, const Tensor& A, Discretization mode) {
  const auto [L, D, N] = check_selective(in, A);
  Tensor y({L, D});
  std::vector<double> h(D * N, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = in.delta[t * D + d];
      const double u = in.x[t * D + d];
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double a = A[d * N + n];
        double& hs = h[d * N + n];
        hs = std::exp(dt * a) * hs + input_coef(mode, dt, a, in.B[t * N + n]) * u;
        acc += in.C[t * N + n] * hs;
      }
      if (in.d_skip) acc += (*in.d_skip)[d] * u;
      y[t * D + d] = acc;
    }
  }
  return y;
}

namespace {

// Inclusive affine scan over `lanes` independent recurrences stored time-major
// ([L, lanes]). The time axis is split into chunks, one thread per chunk; the
// chunk aggregates are combined with a Blelloch exclusive scan.
void affine_scan_lanes(std::span<double> a, std::span<double> b, std::size_t lanes, std::size_t workers) {
  const std::size_t L = lanes == 0 ? 0 : a.size() / lanes;
  if (L == 0) return;
  const std::size_t chunks = std::clamp<std::size_t>(workers, 1, L);
  std::vector<std::size_t> bounds(chunks + 1);
  for (std::size_t c = 0; c <= chunks; ++c) bounds[c] = c * L / chunks;

  // Phase 1: independent local inclusive scans.
  auto local_scan = [&](std::size_t c) {
    for (std::size_t t = bounds[c] + 1; t < bounds[c + 1]; ++t) {
      double* at = &a[t * lanes];
      double* bt = &b[t * lanes];
      const double* ap = at - lanes;
      const double* bp = bt - lanes;
      for (std::size_t m = 0; m < lanes; ++m) {
        bt[m] = at[m] * bp[m] + bt[m];
        at[m] = at[m] * ap[m];
      }
    }
  };
  // Phase 3: apply the incoming carry h_in: h_t = A_loc,t * h_in + B_loc,t.
  std::vector<double> carry(chunks * lanes, 0.0);
  auto apply_carry = [&](std::size_t c) {
    const double* h_in = &carry[c * lanes];
    for (std::size_t t = bounds[c]; t < bounds[c + 1]; ++t)
      for (std::size_t m = 0; m < lanes; ++m) b[t * lanes + m] += a[t * lanes + m] * h_in[m];
  };
  auto run = [&](auto&& fn) {
    if (chunks == 1) {
      fn(0);
      return;
    }
    std::vector<std::thread> pool;
    pool.reserve(chunks - 1);
    for (std::size_t c = 1; c < chunks; ++c) pool.emplace_back(fn, c);
    fn(0);
    for (auto& th : pool) th.join();
  };
  run(local_scan);

  // Phase 2: exclusive scan of chunk aggregates (Blelloch up-sweep/down-sweep),
  // per lane.
  std::size_t P = 1;
  while (P < chunks) P <<= 1;
  std::vector<double> ta(P), tb(P);
  for (std::size_t m = 0; m < lanes; ++m) {
    std::fill(ta.begin(), ta.end(), 1.0);  // identity element is (1, 0)
    std::fill(tb.begin(), tb.end(), 0.0);
    for (std::size_t c = 0; c < chunks; ++c) {
      ta[c] = a[(bounds[c + 1] - 1) * lanes + m];
      tb[c] = b[(bounds[c + 1] - 1) * lanes + m];
    }
    // combine(left, right) = (ar*al, ar*bl + br)
    for (std::size_t stride = 1; stride < P; stride <<= 1) {
      for (std::size_t i = 2 * stride - 1; i < P; i += 2 * stride) {
        const std::size_t l = i - stride;
        tb[i] = ta[i] * tb[l] + tb[i];
        ta[i] = ta[i] * ta[l];
      }
    }
    ta[P - 1] = 1.0;
    tb[P - 1] = 0.0;
    for (std::size_t stride = P >> 1; stride >= 1; stride >>= 1) {
      for (std::size_t i = 2 * stride - 1; i < P; i += 2 * stride) {
        const std::size_t l = i - stride;
        const double la = ta[l], lb = tb[l];
        ta[l] = ta[i];
        tb[l] = tb[i];
        // new right = combine(old right prefix, left subtree aggregate)
        tb[i] = la * tb[i] + lb;
        ta[i] = la * ta[i];
      }
      if (stride == 1) break;
    }
    for (std::size_t c = 0; c < chunks; ++c) carry[c * lanes + m] = tb[c];
  }
  run(apply_carry);
}

}  // namespace

void affine_prefix_scan(std::span<double> a, std::span<double> b, std::size_t workers) {
  if (b.size() != a.size()) throw ShapeError("affine_prefix_scan: length mismatch");
  affine_scan_lanes(a, b, 1, workers);
}

Tensor selective_scan_parallel(const SelectiveInputs& in, const Tensor& A, Discretization mode, std::size_t workers) {
  const auto [L, D, N] = check_selective(in, A);
  const std::size_t M = D * N;
  // Lane (d, n) of step t lives at a[t * M + d * N + n].
  std::vector<double> a(L * M), h(L * M);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = in.delta[t * D + d];
      const double x = in.x[t * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        const double an = A[d * N + n];
        a[t * M + d * N + n] = std::exp(dt * an);
        h[t * M + d * N + n] = input_coef(mode, dt, an, in.B[t * N + n]) * x;
      }
    }
  affine_scan_lanes(a, h, M, workers);

  Tensor y({L, D});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += in.C[t * N + n] * h[t * M + d * N + n];
      if (in.d_skip) acc += (*in.d_skip)[d] * in.x[t * D + d];
      y[t * D + d] = acc;
    }
  return y;
}

Var selective_scan(Var u, Var delta, Var A, Var B, Var C, std::optional<Var> d_skip, Discretization mode) {
  Graph& g = *u.graph;
  for (Var v : {delta, A, B, C})
    if (v.graph != &g) throw ShapeError("selective_scan: operands belong to different graphs");
  if (d_skip && d_skip->graph != &g) throw ShapeError("selective_scan: operands belong to different graphs");

  SelectiveInputs view{u.value(), delta.value(), B.value(), C.value(),
                       d_skip ? std::optional<Tensor>(d_skip->value()) : std::nullopt};
  const Tensor& Av = A.value();
  const auto [L, D, N] = check_selective(view, Av);

  std::vector<NodeId> inputs{u.id, delta.id, A.id, B.id, C.id};
  if (d_skip) inputs.push_back(d_skip->id);
  const bool need_states = std::any_of(inputs.begin(), inputs.end(), [&](NodeId id) { return g.requires_grad(id); });

  // Forward with the reference recurrence; keep every state for the adjoint.
  auto states = std::make_shared<std::vector<double>>(need_states ? L * D * N : 0);
  Tensor y({L, D});
  std::vector<double> h(D * N, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = view.delta[t * D + d];
      const double x = view.x[t * D + d];
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double a = Av[d * N + n];
        double& hs = h[d * N + n];
        hs = std::exp(dt * a) * hs + input_coef(mode, dt, a, view.B[t * N + n]) * x;
        acc += view.C[t * N + n] * hs;
      }
      if (view.d_skip) acc += (*view.d_skip)[d] * x;
      y[t * D + d] = acc;
    }
    if (need_states) std::copy(h.begin(), h.end(), states->begin() + static_cast<std::ptrdiff_t>(t * D * N));
  }

  const NodeId ui = u.id, di = delta.id, ai = A.id, bi = B.id, ci = C.id;
  const std::optional<NodeId> si = d_skip ? std::optional<NodeId>(d_skip->id) : std::nullopt;
  const std::size_t Ls = L, Ds = D, Ns = N;
  return g.record(
      OpKind::selective_scan, std::move(inputs), std::move(y),
      [=](Graph& g, NodeId self) {
        const std::size_t L = Ls, D = Ds, N = Ns;
        const Tensor& gy = *g.grad_if(self);
        const Tensor& uv = g.value(ui);
        const Tensor& dv = g.value(di);
        const Tensor& Av = g.value(ai);
        const Tensor& Bv = g.value(bi);
        const Tensor& Cv = g.value(ci);
        const Tensor* Sv = si ? &g.value(*si) : nullptr;
        Tensor* gu = g.requires_grad(ui) ? &g.grad(ui) : nullptr;
        Tensor* gd = g.requires_grad(di) ? &g.grad(di) : nullptr;
        Tensor* gA = g.requires_grad(ai) ? &g.grad(ai) : nullptr;
        Tensor* gB = g.requires_grad(bi) ? &g.grad(bi) : nullptr;
        Tensor* gC = g.requires_grad(ci) ? &g.grad(ci) : nullptr;
        Tensor* gS = (si && g.requires_grad(*si)) ? &g.grad(*si) : nullptr;
        const std::vector<double>& H = *states;
        std::vector<double> gh(D * N, 0.0);  // adjoint of h_t, carried backwards in time
        for (std::size_t t = L; t-- > 0;) {
          for (std::size_t d = 0; d < D; ++d) {
            const double gyt = gy[t * D + d];
            const double x = uv[t * D + d];
            const double dt = dv[t * D + d];
            double gu_acc = 0.0, gd_acc = 0.0;
            if (Sv) {
              gu_acc += (*Sv)[d] * gyt;
              if (gS) (*gS)[d] += gyt * x;
            }
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t k = d * N + n;
              const double ht = H[t * D * N + k];
              const double hp = t > 0 ? H[(t - 1) * D * N + k] : 0.0;
              const double a = Av[k];
              const double bn = Bv[t * N + n];
              const double abar = std::exp(dt * a);
              gh[k] += Cv[t * N + n] * gyt;
              if (gC) (*gC)[t * N + n] += gyt * ht;
              const double g_abar = gh[k] * hp;
              const double g_bbar = gh[k] * x;
              double bbar, d_bbar_d_delta, d_bbar_d_a, d_bbar_d_b;
              if (mode == Discretization::euler_b) {
                bbar = dt * bn;
                d_bbar_d_delta = bn;
                d_bbar_d_a = 0.0;
                d_bbar_d_b = dt;
              } else {
                const double z = dt * a;
                const double phi = expm1_over_x(z);
                bbar = dt * bn * phi;
                d_bbar_d_delta = bn * abar;
                d_bbar_d_a = bn * dt * dt * expm1_over_x_deriv(z);
                d_bbar_d_b = dt * phi;
              }
              gu_acc += gh[k] * bbar;
              gd_acc += g_abar * abar * a + g_bbar * d_bbar_d_delta;
              if (gA) (*gA)[k] += g_abar * abar * dt + g_bbar * d_bbar_d_a;
              if (gB) (*gB)[t * N + n] += g_bbar * d_bbar_d_b;
              gh[k] *= abar;
            }
            if (gu) (*gu)[t * D + d] += gu_acc;
            if (gd) (*gd)[t * D + d] += gd_acc;
          }
        }
      },
      mode == Discretization::euler_b ? "euler_b" : "exact_zoh");
}

}  // namespace stsmcd::ssm
