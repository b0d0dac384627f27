#include <cmath>

#include "doctest.h"
#include "stsmcd/errors.hpp"
#include "stsmcd/gradcheck.hpp"
#include "stsmcd/losses.hpp"
#include "stsmcd/models.hpp"

using namespace stsmcd;
using namespace stsmcd::models;

namespace {

Tensor image(Rng& rng, std::size_t H, std::size_t W) { return uniform_tensor({H, W, 3}, rng, 0, 1); }

void randomize_zeros(ParamStore& store, Rng& rng) {
  for (auto& p : store) {
    bool all_zero = true;
    for (double v : p->value.vec()) all_zero = all_zero && v == 0.0;
    if (all_zero) p->value = uniform_tensor(p->value.shape(), rng, -0.3, 0.3);
  }
}

LabelMap random_labels(Rng& rng, std::size_t H, std::size_t W, int K) {
  LabelMap y(H, W);
  for (int& v : y.data) v = static_cast<int>(rng() % K);
  return y;
}

}  // namespace

TEST_CASE("variant configurations") {
  const auto micro = make_config(Variant::micro);
  CHECK(micro.channels == std::array<std::size_t, 4>{8, 16, 32, 64});
  CHECK(micro.depths == std::array<std::size_t, 4>{1, 1, 1, 1});
  CHECK(micro.state_size == 4);
  const auto tiny = make_config(Variant::tiny);
  CHECK(tiny.channels == std::array<std::size_t, 4>{96, 192, 384, 768});
  CHECK(tiny.depths == std::array<std::size_t, 4>{2, 2, 4, 2});
  CHECK(tiny.state_size == 16);
  CHECK(make_config(Variant::small).depths == std::array<std::size_t, 4>{2, 2, 15, 2});
  CHECK(make_config(Variant::base).channels == std::array<std::size_t, 4>{128, 256, 512, 1024});
  CHECK(parse_variant("Tiny") == Variant::tiny);
  CHECK_THROWS_AS(parse_variant("huge"), DomainError);
  CHECK(parse_task("scd") == Task::scd);
  CHECK_THROWS_AS(parse_task("seg"), DomainError);
}

TEST_CASE("encoder feature shapes") {
  Rng rng(61);
  ParamStore store;
  const auto cfg = make_config(Variant::micro);
  const auto enc = make_encoder(store, "encoder", cfg, rng);
  Graph g;
  const auto f = encoder_forward(g.input(image(rng, 64, 64)), enc);
  CHECK(f[0].shape() == Shape{16, 16, 8});
  CHECK(f[1].shape() == Shape{8, 8, 16});
  CHECK(f[2].shape() == Shape{4, 4, 32});
  CHECK(f[3].shape() == Shape{2, 2, 64});
  const auto r = encoder_forward(g.input(image(rng, 32, 96)), enc);
  CHECK(r[3].shape() == Shape{1, 3, 64});
  CHECK_THROWS_AS(encoder_forward(g.input(Tensor({48, 64, 3})), enc), ShapeError);
  CHECK_THROWS_AS(encoder_forward(g.input(Tensor({64, 64, 4})), enc), ShapeError);
}

TEST_CASE("tiny encoder channel widths") {
  Rng rng(62);
  ParamStore store;
  auto cfg = make_config(Variant::tiny);
  cfg.depths = {1, 1, 1, 1};  // keep the test cheap; widths are what matters here
  const auto enc = make_encoder(store, "encoder", cfg, rng);
  Graph g;
  const auto f = encoder_forward(g.input(image(rng, 32, 32)), enc);
  CHECK(f[0].shape() == Shape{8, 8, 96});
  CHECK(f[1].shape() == Shape{4, 4, 192});
  CHECK(f[2].shape() == Shape{2, 2, 384});
  CHECK(f[3].shape() == Shape{1, 1, 768});
}

TEST_CASE("model outputs per task") {
  Rng rng(63);
  const auto cfg = make_config(Variant::micro);
  const Tensor x1 = image(rng, 64, 64), x2 = image(rng, 64, 64);
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    Model m(task, cfg, 7);
    Graph g;
    const auto out = m.forward(g.input(x1), g.input(x2));
    CHECK(out.change.shape() == Shape{64, 64, m.change_classes()});
    CHECK(out.semantic_t1.has_value() == (task != Task::bcd));
    CHECK(out.semantic_t2.has_value() == (task == Task::scd));
    if (task == Task::scd) CHECK(out.semantic_t1->shape() == Shape{64, 64, 7});
    if (task == Task::bda) {
      CHECK(m.change_classes() == 5);
      CHECK(out.semantic_t1->shape() == Shape{64, 64, 2});
      CHECK(m.params().find("localization.head.weight") != nullptr);
    }
    // Zero heads: all logits vanish and every pixel predicts class 0.
    for (double v : out.change.value().vec()) CHECK(v == 0.0);
    CHECK(argmax_map(out.change.value()) == LabelMap(64, 64, 0));
  }
}

TEST_CASE("siamese encoder and softmax normalization") {
  Rng rng(64);
  Model m(Task::scd, make_config(Variant::micro), 8);
  randomize_zeros(m.params(), rng);
  const Tensor x = image(rng, 32, 32);
  Graph g;
  const auto p = m.predict(g.input(x), g.input(x));
  // Identical inputs through the shared encoder: identical semantic features,
  // and the two semantic decoders differ only in their own weights.
  const auto f1 = encoder_forward(g.input(x), m.encoder());
  const auto f2 = encoder_forward(g.input(x), m.encoder());
  for (std::size_t j = 0; j < 4; ++j) CHECK(f1[j].value().vec() == f2[j].value().vec());
  for (const Var* v : {&p.change, &*p.semantic_t1, &*p.semantic_t2}) {
    const Tensor& t = v->value();
    const std::size_t K = t.dim(2);
    double worst = 0;
    for (std::size_t i = 0; i < t.size() / K; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += t[i * K + k];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("semantic decoders depend only on their own phase") {
  Rng rng(65);
  Model scd(Task::scd, make_config(Variant::micro), 9);
  randomize_zeros(scd.params(), rng);
  const Tensor x1 = image(rng, 32, 32), x2 = image(rng, 32, 32), x2b = image(rng, 32, 32);
  Graph g;
  const auto a = scd.forward(g.input(x1), g.input(x2));
  const auto b = scd.forward(g.input(x1), g.input(x2b));
  CHECK(a.semantic_t1->value().vec() == b.semantic_t1->value().vec());
  CHECK(a.semantic_t2->value().vec() != b.semantic_t2->value().vec());
  CHECK(a.change.value().vec() != b.change.value().vec());

  Model bda(Task::bda, make_config(Variant::micro), 10);
  randomize_zeros(bda.params(), rng);
  const auto c = bda.forward(g.input(x1), g.input(x2));
  const auto d = bda.forward(g.input(x1), g.input(x2b));
  CHECK(c.semantic_t1->value().vec() == d.semantic_t1->value().vec());
  CHECK(c.change.value().vec() != d.change.value().vec());
}

TEST_CASE("models are deterministic in their seed") {
  Model a(Task::bcd, make_config(Variant::micro), 11), b(Task::bcd, make_config(Variant::micro), 11);
  Model c(Task::bcd, make_config(Variant::micro), 12);
  CHECK(a.params().size() == b.params().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].value.vec() == b.params()[i].value.vec());
    differs = differs || a.params()[i].value.vec() != c.params()[i].value.vec();
  }
  CHECK(differs);
}

TEST_CASE("argmax map ties and semantic change masking") {
  const Tensor s({1, 3, 3}, {0.2, 0.5, 0.5, 0.7, 0.1, 0.2, 0.3, 0.3, 0.3});
  CHECK(argmax_map(s).data == std::vector<int>{1, 0, 0});

  Rng rng(66);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t H = 1 + rng() % 9, W = 1 + rng() % 9;
    const int K = 1 + static_cast<int>(rng() % 6);
    LabelMap t1 = random_labels(rng, H, W, K + 1), t2 = random_labels(rng, H, W, K + 1);
    const LabelMap change = random_labels(rng, H, W, 2);
    const auto [m1, m2] = semantic_change_mask(t1, t2, change);
    const auto tm = transition_matrix(m1, m2, static_cast<std::size_t>(K));
    // Brute force: every pair (a, b) is counted by scanning all pixels.
    std::uint64_t total = 0;
    for (int a = 1; a <= K; ++a)
      for (int b = 1; b <= K; ++b) {
        std::uint64_t n = 0;
        for (std::size_t i = 0; i < change.size(); ++i) n += change.data[i] == 1 && t1.data[i] == a && t2.data[i] == b;
        CHECK(tm[static_cast<std::size_t>((a - 1) * K + (b - 1))] == n);
        total += n;
      }
    std::uint64_t expect = 0;
    for (std::size_t i = 0; i < change.size(); ++i) {
      if (change.data[i] == 0) {
        CHECK(m1.data[i] == kIgnore);
        CHECK(m2.data[i] == kIgnore);
      } else {
        CHECK(m1.data[i] == t1.data[i]);
        expect += t1.data[i] >= 1 && t2.data[i] >= 1;
      }
    }
    CHECK(total == expect);
  }
  CHECK_THROWS_AS(semantic_change_mask(LabelMap(2, 2), LabelMap(2, 3), LabelMap(2, 2)), ShapeError);
}

TEST_CASE("full model gradients through the task losses") {
  // 32x32 is the smallest extent the encoder accepts.
  const std::size_t S = 32;
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    Rng rng(67);
    Model m(task, make_config(Variant::micro), 13);
    randomize_zeros(m.params(), rng);
    const Tensor x1 = image(rng, S, S), x2 = image(rng, S, S);
    const LabelMap yc = random_labels(rng, S, S, static_cast<int>(m.change_classes()));
    const LabelMap y1 = random_labels(rng, S, S, 7), y2 = random_labels(rng, S, S, 7);
    const LabelMap yloc = random_labels(rng, S, S, 2);
    std::vector<Parameter*> leaves;
    for (auto& p : m.params()) leaves.push_back(p.get());
    gradcheck::Options opt;
    opt.samples = 48;
    opt.seed = 3;
    const auto r = gradcheck::check(
        leaves,
        [&](Graph& g) {
          const auto p = m.predict(g.input(x1), g.input(x2));
          switch (task) {
            case Task::bcd: return losses::bcd_loss(p.change, yc);
            case Task::scd: return losses::scd_loss(*p.semantic_t1, *p.semantic_t2, p.change, y1, y2, yc);
            case Task::bda: return losses::bda_loss(*p.semantic_t1, p.change, yloc, yc);
          }
          return Var{};
        },
        opt);
    INFO(task_name(task) << " max rel " << r.max_rel_error << " mean " << r.mean_rel_error);
    CHECK(r.passed);
    CHECK(!r.skipped);
  }
}
