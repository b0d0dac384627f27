#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "doctest.h"
#include "stsmcd/errors.hpp"
#include "stsmcd/train.hpp"

using namespace stsmcd;
namespace fs = std::filesystem;

namespace {

data::Dataset small_set(Task task, std::size_t count = 2) {
  data::DatasetInfo info;
  info.task = task;
  info.count = count;
  info.height = info.width = 32;
  info.seed = 21;
  return data::synth_generate(info);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stsmcd_train_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("adamw matches hand-computed steps") {
  ParamStore store;
  store.add("w", Tensor({2}, {1.0, -2.0}));
  train::AdamWOptions o;
  o.lr = 0.1;
  o.weight_decay = 0.01;
  train::AdamW opt(store, o);

  // First step: bias correction makes the moment ratio g / |g|.
  store[0].grad = Tensor({2}, {0.5, -3.0});
  opt.step(store);
  CHECK(store[0].value[0] == doctest::Approx(1.0 * 0.999 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(store[0].value[1] == doctest::Approx(-2.0 * 0.999 + 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));

  // Second step written out from the moment recurrences.
  const double g1 = 0.5, g2 = -1.0;
  const double m = 0.9 * (0.1 * g1) + 0.1 * g2;
  const double v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double w1 = store[0].value[0];
  store[0].grad = Tensor({2}, {g2, 0.0});
  opt.step(store);
  CHECK(store[0].value[0] == doctest::Approx(w1 * 0.999 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-14));
  CHECK(opt.steps() == 2);

  ParamStore other;
  other.add("a", Tensor({1}));
  other.add("b", Tensor({1}));
  CHECK_THROWS_AS(opt.step(other), ShapeError);
  o.lr = -1;
  CHECK_THROWS_AS(train::AdamW(store, o), DomainError);
}

TEST_CASE("zero learning rate keeps the loss constant") {
  const auto ds = small_set(Task::bcd);
  models::Model model(Task::bcd, models::make_config(models::Variant::micro), 4);
  train::TrainOptions opt;
  opt.optim.lr = 0.0;
  opt.augment = false;
  opt.batch = ds.samples.size();
  opt.iterations = 3;
  const auto losses = train::train(model, ds, opt);
  REQUIRE(losses.size() == 3);
  CHECK(std::isfinite(losses[0]));
  CHECK(std::abs(losses[1] - losses[0]) <= 1e-12);
  CHECK(std::abs(losses[2] - losses[0]) <= 1e-12);
}

TEST_CASE("training is seeded and independent of worker count") {
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    CAPTURE(task_name(task));
    const auto ds = small_set(task, 3);
    train::TrainOptions opt;
    opt.optim.lr = 1e-3;
    opt.batch = 2;
    opt.iterations = 2;
    opt.seed = 9;
    models::Model a(task, models::make_config(models::Variant::micro), 1);
    models::Model b(task, models::make_config(models::Variant::micro), 1);
    const auto la = train::train(a, ds, opt);
    opt.workers = 2;
    std::vector<std::size_t> seen;
    const auto lb = train::train(b, ds, opt, [&](const train::StepReport& r) { seen.push_back(r.iteration); });
    CHECK(la == lb);
    CHECK(seen == std::vector<std::size_t>{1, 2});
    for (std::size_t k = 0; k < a.params().size(); ++k) CHECK(a.params()[k].value.vec() == b.params()[k].value.vec());
  }
}

TEST_CASE("dataset and model must agree") {
  const auto ds = small_set(Task::scd);
  models::Model bcd(Task::bcd, models::make_config(models::Variant::micro), 1);
  train::TrainOptions opt;
  opt.iterations = 1;
  CHECK_THROWS_AS(train::train(bcd, ds, opt), DomainError);

  auto cfg = models::make_config(models::Variant::micro);
  cfg.semantic_classes = 3;
  models::Model scd(Task::scd, cfg, 1);
  CHECK_THROWS_AS(train::train(scd, ds, opt), DomainError);

  models::Model ok(Task::scd, models::make_config(models::Variant::micro), 1);
  opt.batch = 0;
  CHECK_THROWS_AS(train::train(ok, ds, opt), DomainError);
  data::Dataset empty{ds.info, {}};
  opt.batch = 1;
  CHECK_THROWS_AS(train::train(ok, empty, opt), DomainError);
}

TEST_CASE("predictions are gated by change and buildings") {
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    const auto ds = small_set(task, 2);
    models::Model model(task, models::make_config(models::Variant::micro), 2);
    const auto ev = train::evaluate(model, ds);
    REQUIRE(ev.predictions.size() == 2);
    CHECK(!ev.report.empty());
    for (const auto& p : ev.predictions) {
      if (task == Task::scd) {
        for (std::size_t i = 0; i < p.change.size(); ++i) {
          CHECK((p.semantic_t1.data[i] == 0) == (p.change.data[i] == 0));
          CHECK((p.semantic_t2.data[i] == 0) == (p.change.data[i] == 0));
        }
      }
      if (task == Task::bda) {
        for (std::size_t i = 0; i < p.loc.size(); ++i) CHECK((p.clf.data[i] == 0) == (p.loc.data[i] == 0));
      }
    }
    const fs::path dir = scratch("pred");
    train::write_predictions(ev, task, dir);
    const char* folder = task == Task::bda ? "PRED_CLF" : task == Task::scd ? "PRED_T2" : "PRED_BCD";
    CHECK(fs::exists(dir / folder / (ds.samples[0].id + ".cmrd")));
    fs::remove_all(dir);
  }
}

TEST_CASE("run config round trip") {
  train::RunConfig rc;
  rc.task = Task::bda;
  rc.model = models::make_config(models::Variant::micro);
  rc.model.depths = {1, 2, 1, 1};
  rc.model.gate_mode = blocks::GateMode::multiply;
  rc.model.discretization = ssm::Discretization::exact_zoh;
  rc.model.damage_classes = 3;
  rc.seed = 77;
  const fs::path dir = scratch("cfg");
  fs::create_directories(dir);
  train::write_run_config(rc, dir / "config.txt");
  const auto back = train::read_run_config(dir / "config.txt");
  CHECK(back.task == rc.task);
  CHECK(back.seed == 77);
  CHECK(back.model.depths == rc.model.depths);
  CHECK(back.model.channels == rc.model.channels);
  CHECK(back.model.gate_mode == rc.model.gate_mode);
  CHECK(back.model.discretization == rc.model.discretization);
  CHECK(back.model.damage_classes == 3);

  std::ofstream(dir / "bad.txt") << "task = bcd\nmystery = 1\n";
  CHECK_THROWS_AS(train::read_run_config(dir / "bad.txt"), FormatError);
  std::ofstream(dir / "kv.txt") << "# comment\nlr = 0.001   # trailing\n\nbatch=4\n";
  const auto kv = train::read_config_file(dir / "kv.txt");
  REQUIRE(kv.size() == 2);
  CHECK(kv[0] == std::pair<std::string, std::string>{"lr", "0.001"});
  CHECK(kv[1] == std::pair<std::string, std::string>{"batch", "4"});
  CHECK_THROWS_AS(train::read_config_file(dir / "missing.txt"), IoError);
  fs::remove_all(dir);
}
