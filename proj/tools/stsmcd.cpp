// Command-line driver: synth, train, eval, gradcheck, bench.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "stsmcd/bench.hpp"
#include "stsmcd/checkpoint.hpp"
#include "stsmcd/data.hpp"
#include "stsmcd/errors.hpp"
#include "stsmcd/gradcheck_suite.hpp"
#include "stsmcd/metrics.hpp"
#include "stsmcd/train.hpp"

namespace fs = std::filesystem;
using namespace stsmcd;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return os;
}

struct SynthArgs {
  std::string task = "bcd";
  std::size_t count = 8;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  data::DatasetInfo info;
  info.task = parse_task(a.task);
  info.count = a.count;
  info.height = info.width = a.size;
  info.seed = a.seed;
  const auto ds = data::synth_generate(info, a.workers);
  data::write_dataset(ds, a.out);
  std::cout << "wrote " << ds.samples.size() << " " << a.task << " samples to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, out, variant = "micro";
  train::TrainOptions opt;
  bool no_augment = false;
  std::size_t checkpoint_every = 0;
};

int cmd_train(TrainArgs a) {
  a.opt.augment = !a.no_augment;
  const auto ds = data::read_dataset(a.data);
  train::RunConfig rc;
  rc.task = ds.info.task;
  rc.model = models::make_config(models::parse_variant(a.variant));
  rc.model.semantic_classes = ds.info.semantic_classes;
  rc.model.damage_classes = ds.info.damage_levels;
  rc.seed = a.opt.seed;
  models::Model model(rc.task, rc.model, rc.seed);

  const fs::path out(a.out);
  ensure_dir(out);
  train::write_run_config(rc, out / "config.txt");
  auto log = open_out(out / "train.log");
  char line[64];
  train::train(model, ds, a.opt, [&](const train::StepReport& r) {
    std::snprintf(line, sizeof line, "%zu\t%.12e\n", r.iteration, r.loss);
    log << line << std::flush;
    if (a.checkpoint_every > 0 && r.iteration % a.checkpoint_every == 0 && r.iteration < a.opt.iterations) {
      char name[64];
      std::snprintf(name, sizeof name, "model_%06zu.ckpt", r.iteration);
      save_checkpoint(model.params(), out / name);
    }
  });
  save_checkpoint(model.params(), out / "model.ckpt");
  std::cout << "trained " << a.opt.iterations << " iterations; checkpoint " << (out / "model.ckpt").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, config, data, out, perturb = "none", task;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const fs::path ckpt(a.checkpoint);
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  const fs::path cfg = a.config.empty() ? ckpt.parent_path() / "config.txt" : fs::path(a.config);
  const auto rc = train::read_run_config(cfg);
  if (!a.task.empty() && parse_task(a.task) != rc.task) {
    throw DomainError("--task " + a.task + " does not match the run's task " + task_name(rc.task));
  }
  models::Model model(rc.task, rc.model, rc.seed);
  load_checkpoint(model.params(), ckpt);
  const auto ds = data::read_dataset(a.data);
  const auto ev = train::evaluate(model, ds, data::parse_perturbation(a.perturb), a.seed);

  const fs::path out(a.out);
  ensure_dir(out);
  auto os = open_out(out / "metrics.txt");
  metrics::write_report(os, ev.report);
  os.close();
  if (!os) throw IoError("failed writing " + (out / "metrics.txt").string());
  train::write_predictions(ev, rc.task, out);
  metrics::write_report(std::cout, ev.report);
  return 0;
}

struct GradcheckArgs {
  std::string scope = "all";
  gradcheck::Options opt;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto rows = gradcheck::run_suite(gradcheck::parse_scope(a.scope), a.opt);
  gradcheck::write_table(std::cout, rows);
  std::size_t bad = 0;
  for (const auto& r : rows) bad += !r.ok();
  if (bad > 0) {
    std::cerr << "error[gradcheck]: " << bad << " of " << rows.size() << " checks failed\n";
    return 1;
  }
  return 0;
}

struct BenchArgs {
  bench::BenchOptions opt;
  std::string out;
};

int cmd_bench(const BenchArgs& a) {
  const auto rows = bench::run(a.opt);
  if (a.out.empty()) {
    bench::write_csv(std::cout, rows);
  } else {
    auto os = open_out(a.out);
    bench::write_csv(os, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-temporal change detection with selective state space models"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--task", sa.task, "bcd, scd or bda")->check(CLI::IsMember({"bcd", "scd", "bda"}));
  synth->add_option("--count", sa.count, "Number of samples")->capture_default_str();
  synth->add_option("--size", sa.size, "Image height and width (multiple of 32)")->capture_default_str();
  synth->add_option("--seed", sa.seed)->envname("STSMCD_SEED");
  synth->add_option("--workers", sa.workers)->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  tr->set_config("--config", "", "key = value file; flags given on the command line win");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Run directory")->required();
  tr->add_option("--variant", ta.variant, "micro, tiny, small or base")->capture_default_str();
  tr->add_option("--lr", ta.opt.optim.lr)->capture_default_str();
  tr->add_option("--weight-decay,--weight_decay,--wd", ta.opt.optim.weight_decay)->capture_default_str();
  tr->add_option("--batch", ta.opt.batch)->capture_default_str();
  tr->add_option("--iterations", ta.opt.iterations)->capture_default_str();
  tr->add_option("--seed", ta.opt.seed, "Model init and sampling seed")->envname("STSMCD_SEED");
  tr->add_option("--workers", ta.opt.workers, "Threads per batch; results do not depend on it")->capture_default_str();
  tr->add_option("--checkpoint-every,--checkpoint_every", ta.checkpoint_every, "0: final checkpoint only")
      ->capture_default_str();
  tr->add_flag("--no-augment,--no_augment", ta.no_augment, "Disable flips and rotations");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint and write predictions");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--config", ea.config, "Run config (default: config.txt beside the checkpoint)");
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--out", ea.out, "Output directory")->required();
  ev->add_option("--task", ea.task, "Optional; must match the run");
  ev->add_option("--perturb", ea.perturb, "none, blur:<sigma>, noise:<sigma> or scale:<factor>")
      ->capture_default_str();
  ev->add_option("--seed", ea.seed, "Noise seed")->envname("STSMCD_SEED");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--scope", ga.scope, "primitives, blocks, models or all")->capture_default_str();
  gc->add_option("--step", ga.opt.step)->capture_default_str();
  gc->add_option("--tolerance", ga.opt.tolerance)->capture_default_str();
  gc->add_option("--samples", ga.opt.samples, "Coordinates per check")->capture_default_str();
  gc->add_option("--seed", ga.opt.seed)->envname("STSMCD_SEED");

  BenchArgs ba;
  auto* bn = app.add_subcommand("bench", "Selective scan versus attention wall time");
  bn->add_option("--lengths", ba.opt.lengths, "Sequence lengths")->delimiter(',')->capture_default_str();
  bn->add_option("--width", ba.opt.width)->capture_default_str();
  bn->add_option("--state", ba.opt.state)->capture_default_str();
  bn->add_option("--repeats", ba.opt.repeats, "Best of this many runs")->capture_default_str();
  bn->add_option("--scan-workers", ba.opt.scan_workers, "Chunks of the parallel scan")->capture_default_str();
  bn->add_option("--seed", ba.opt.seed)->envname("STSMCD_SEED");
  bn->add_option("--out", ba.out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error[usage]: " << msg << "\n";
    return 2;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*gc) return cmd_gradcheck(ga);
    if (*bn) return cmd_bench(ba);
  } catch (const Error& e) {
    std::cerr << "error[" << e.tag() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
