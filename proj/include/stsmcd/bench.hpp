#pragma once

// Wall-time scaling of the selective scan against global attention.

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace stsmcd::bench {

struct BenchOptions {
  std::vector<std::size_t> lengths{512, 1024, 2048, 4096};
  std::size_t width = 16;   // D
  std::size_t state = 16;   // N
  std::size_t repeats = 5;  // best of
  std::size_t scan_workers = 4;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t length;
  double scan_seq_ms;
  double scan_par_ms;
  double attn_ms;
};

std::vector<BenchRow> run(const BenchOptions& opt);

/// Header `L,scan_seq_ms,scan_par_ms,attn_ms`, one row per length.
void write_csv(std::ostream& os, const std::vector<BenchRow>& rows);

}  // namespace stsmcd::bench
