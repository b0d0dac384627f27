#include "stsmcd/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>

#include "stsmcd/attention.hpp"
#include "stsmcd/errors.hpp"
#include "stsmcd/rng.hpp"
#include "stsmcd/ssm.hpp"

namespace stsmcd::bench {

namespace {

template <class F>
double best_ms(std::size_t repeats, F&& f) {
  double best = 1e300;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

// Keeps results observable so the work is not optimized away.
volatile double g_sink = 0.0;

}  // namespace

std::vector<BenchRow> run(const BenchOptions& opt) {
  if (opt.lengths.empty()) throw DomainError("bench: no sequence lengths given");
  if (opt.width == 0 || opt.state == 0 || opt.repeats == 0) throw DomainError("bench: width, state and repeats must be positive");
  std::vector<BenchRow> rows;
  for (std::size_t L : opt.lengths) {
    if (L == 0) throw DomainError("bench: sequence length must be positive");
    Rng rng(mix_seed(opt.seed, L));
    const std::size_t D = opt.width, N = opt.state;
    ssm::SelectiveInputs in{uniform_tensor({L, D}, rng, -1, 1), uniform_tensor({L, D}, rng, 0.001, 0.1),
                            uniform_tensor({L, N}, rng, -1, 1), uniform_tensor({L, N}, rng, -1, 1),
                            uniform_tensor({D}, rng, -1, 1)};
    const Tensor A = uniform_tensor({D, N}, rng, -2.0, -0.1);
    const auto attn = attention::make_attention(D, rng);

    BenchRow row{L, 0, 0, 0};
    row.scan_seq_ms = best_ms(opt.repeats, [&] { g_sink = g_sink + ssm::selective_scan_sequential(in, A)[0]; });
    row.scan_par_ms = best_ms(opt.repeats, [&] {
      g_sink = g_sink + ssm::selective_scan_parallel(in, A, ssm::Discretization::euler_b, opt.scan_workers)[0];
    });
    row.attn_ms = best_ms(opt.repeats, [&] { g_sink = g_sink + attention::naive_attention(in.x, attn)[0]; });
    rows.push_back(row);
  }
  return rows;
}

void write_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "L,scan_seq_ms,scan_par_ms,attn_ms\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.4f,%.4f,%.4f\n", r.length, r.scan_seq_ms, r.scan_par_ms, r.attn_ms);
    os << buf;
  }
}

}  // namespace stsmcd::bench
