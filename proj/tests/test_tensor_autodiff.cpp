#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "stsmcd/autodiff.hpp"
#include "stsmcd/checkpoint.hpp"
#include "stsmcd/errors.hpp"
#include "stsmcd/gradcheck.hpp"
#include "stsmcd/rng.hpp"

using namespace stsmcd;

namespace {

// Owns the parameters of one gradient check.
struct Leaves {
  std::deque<Parameter> store;
  Rng rng{1234};

  Parameter& make(Shape shape, double lo = -1.0, double hi = 1.0) {
    store.emplace_back("p" + std::to_string(store.size()), uniform_tensor(std::move(shape), rng, lo, hi));
    return store.back();
  }
  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : store) out.push_back(&p);
    return out;
  }
};

// Primitive-level tolerance: step 1e-5, relative error 1e-4.
gradcheck::Report check_tight(Leaves& leaves, const gradcheck::LossBuilder& build) {
  gradcheck::Options opt;
  opt.step = 1e-5;
  opt.tolerance = 1e-4;
  opt.samples = 256;
  return gradcheck::check(leaves.all(), build, opt);
}

void expect_pass(const gradcheck::Report& r, const char* what) {
  INFO(what << " max rel error " << r.max_rel_error);
  CHECK_FALSE(r.skipped);
  CHECK(r.passed);
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.at({1, 2}) == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("forward examples") {
  Graph g;
  CHECK(silu(g.input(Tensor({1}, 0.0))).value()[0] == 0.0);

  Parameter gamma("gamma", Tensor({4}, 1.0)), beta("beta", Tensor({4}, 0.0));
  Var ln = layer_norm(g.input(Tensor({2, 4}, 3.25)), g.param(gamma), g.param(beta));
  for (double v : ln.value().vec()) CHECK(v == 0.0);

  Var sm = softmax(g.input(Tensor({2}, 0.0)));
  CHECK(sm.value()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(sm.value()[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("backward examples") {
  {
    Graph g;
    Var x = g.input(Tensor({1}, 3.0), true);
    g.backward(x, Tensor({1}, 1.0));
    CHECK(g.grad(x.id)[0] == 1.0);
  }
  {
    Graph g;
    Var x = g.input(Tensor({2}, {1.0, 2.0}), true);
    g.backward(reduce_sum(x * x));
    CHECK(g.grad(x.id)[0] == 2.0);
    CHECK(g.grad(x.id)[1] == 4.0);
    // Leaf gradients accumulate across calls.
    g.backward(reduce_sum(x * x));
    CHECK(g.grad(x.id)[1] == 8.0);
  }
}

TEST_CASE("backward errors") {
  Graph g, other;
  Var x = g.input(Tensor({2}, 1.0), true);
  Var y = other.input(Tensor({2}, 1.0), true);
  CHECK_THROWS_AS(g.backward(y, Tensor({2}, 1.0)), ShapeError);
  CHECK_THROWS_AS(g.backward(x, Tensor({3}, 1.0)), ShapeError);
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("shape mismatch names the node") {
  Graph g;
  Var a = g.input(Tensor({2, 3}));
  Var b = g.input(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("node") != std::string::npos);
  }
}

TEST_CASE("non-finite forward values raise a numeric fault") {
  Graph g;
  Var x = g.input(Tensor({1}, 1000.0));
  CHECK_THROWS_AS(exp(x), NumericFault);
}

TEST_CASE("upsample then average pool is the identity") {
  Rng rng(5);
  for (std::size_t f : {1u, 2u, 3u, 4u}) {
    Graph g;
    Tensor x = uniform_tensor({3, 2, 5}, rng, -2, 2);
    Var y = avg_pool(upsample_nearest(g.input(x), f), f);
    CHECK(max_abs_diff(y.value(), x) == 0.0);
  }
}

TEST_CASE("argmax picks the lowest index on ties") {
  Graph g;
  Var a = argmax(g.input(Tensor({2, 3}, {1, 3, 3, 2, 2, 0})));
  CHECK(a.value()[0] == 1.0);
  CHECK(a.value()[1] == 0.0);
}

TEST_CASE("pick rejects labels outside the class range") {
  Graph g;
  Var x = g.input(Tensor({2, 3}, 0.0));
  const std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(pick(x, bad, 255), DomainError);
  const std::vector<int> ignored{0, 255};
  CHECK(pick(x, ignored, 255).value().size() == 1);
}

TEST_CASE("every differentiable primitive matches finite differences") {
  SUBCASE("matmul") {
    Leaves l;
    auto& a = l.make({3, 4});
    auto& b = l.make({4, 2});
    expect_pass(check_tight(l, [&](Graph& g) { return gradcheck::random_projection(matmul(g.param(a), g.param(b)), 1); }),
                "matmul");
  }
  SUBCASE("pointwise_conv") {
    Leaves l;
    auto& x = l.make({2, 3, 4});
    auto& w = l.make({4, 5});
    auto& b = l.make({5});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              return gradcheck::random_projection(
                                  pointwise_conv(g.param(x), g.param(w), g.param(b)), 2);
                            }),
                "pointwise_conv");
  }
  SUBCASE("depthwise_conv3x3") {
    Leaves l;
    auto& x = l.make({4, 3, 4});
    auto& w = l.make({3, 3, 4});
    auto& b = l.make({4});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              return gradcheck::random_projection(
                                  depthwise_conv3x3(g.param(x), g.param(w), g.param(b)), 3);
                            }),
                "depthwise_conv3x3");
  }
  SUBCASE("conv3x3") {
    Leaves l;
    auto& x = l.make({4, 4, 3});
    auto& w = l.make({3, 3, 3, 2});
    auto& b = l.make({2});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              return gradcheck::random_projection(conv3x3(g.param(x), g.param(w), g.param(b)), 4);
                            }),
                "conv3x3");
  }
  SUBCASE("strided_conv") {
    Leaves l;
    auto& x = l.make({4, 4, 3});
    auto& w = l.make({2, 2, 3, 4});
    auto& b = l.make({4});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              return gradcheck::random_projection(strided_conv(g.param(x), g.param(w), g.param(b)),
                                                                  5);
                            }),
                "strided_conv");
  }
  SUBCASE("layer_norm") {
    Leaves l;
    auto& x = l.make({3, 8}, -2, 2);
    auto& gm = l.make({8});
    auto& bt = l.make({8});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              return gradcheck::random_projection(layer_norm(g.param(x), g.param(gm), g.param(bt)), 6);
                            }),
                "layer_norm");
  }
  SUBCASE("pointwise nonlinearities") {
    Leaves l;
    auto& x = l.make({4, 4}, -3, 3);
    auto& p = l.make({4, 4}, 0.2, 3);
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              Var vx = g.param(x);
                              const std::array<Var, 5> parts{silu(vx), softplus(vx), softmax(vx), exp(vx),
                                                             log(g.param(p), 1e-12)};
                              return gradcheck::random_projection(concat(parts, 1), 7);
                            }),
                "silu/softplus/softmax/exp/log");
  }
  SUBCASE("arithmetic") {
    Leaves l;
    auto& a = l.make({3, 4});
    auto& b = l.make({3, 4});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              Var va = g.param(a), vb = g.param(b);
                              const std::array<Var, 4> terms{va + vb, va - vb, va * vb, scale(va, -1.7)};
                              return gradcheck::random_projection(add_n(terms), 8);
                            }),
                "add/sub/mul/scale/add_n");
  }
  SUBCASE("layout primitives") {
    Leaves l;
    auto& x = l.make({2, 3, 4});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              Var vx = g.param(x);
                              Var p = permute(vx, {2, 0, 1});              // [4,2,3]
                              Var s = slice(p, 0, 1, 3);                   // [2,2,3]
                              Var r = reshape(s, {4, 3});
                              Var u = upsample_nearest(reshape(vx, {2, 3, 4}), 2);  // [4,6,4]
                              Var a = avg_pool(u, 2);
                              const std::array<Var, 2> parts{gradcheck::random_projection(r, 9),
                                                             gradcheck::random_projection(a, 10)};
                              return add_n(parts);
                            }),
                "permute/slice/reshape/upsample/avg_pool");
  }
  SUBCASE("reductions") {
    Leaves l;
    auto& x = l.make({3, 4});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              Var vx = g.param(x);
                              return reduce_sum(vx * vx) + scale(reduce_mean(exp(vx)), 3.0);
                            }),
                "reduce_sum/reduce_mean");
  }
  SUBCASE("gather and scatter") {
    Leaves l;
    auto& x = l.make({5, 3});
    expect_pass(check_tight(l,
                            [&](Graph& g) {
                              Var gth = gather_rows(g.param(x), {4, 0, 0, 2});
                              Var sct = scatter_rows(gth, {1, 6, 1, 3}, 7);
                              return gradcheck::random_projection(sct, 11);
                            }),
                "gather_rows/scatter_rows");
  }
  SUBCASE("pick") {
    Leaves l;
    auto& x = l.make({5, 3});
    const std::vector<int> labels{2, 0, 255, 1, 2};
    expect_pass(check_tight(l,
                            [&](Graph& g) { return gradcheck::random_projection(pick(g.param(x), labels, 255), 12); }),
                "pick");
  }
}

TEST_CASE("grad_check on a linear layer passes at 1e-4") {
  Leaves l;
  auto& x = l.make({4, 3});
  auto& w = l.make({3, 2});
  auto& b = l.make({2});
  gradcheck::Options opt;
  opt.tolerance = 1e-4;
  const auto r = gradcheck::check(
      l.all(), [&](Graph& g) { return gradcheck::random_projection(pointwise_conv(g.param(x), g.param(w), g.param(b)), 3); },
      opt);
  CHECK(r.passed);
  CHECK(r.coordinates.size() == 12 + 6 + 2);
  CHECK(r.mean_rel_error <= r.max_rel_error);
}

TEST_CASE("grad_check requires a scalar loss") {
  Leaves l;
  auto& x = l.make({3});
  CHECK_THROWS_AS(gradcheck::check(l.all(), [&](Graph& g) { return silu(g.param(x)); }), ShapeError);
}

TEST_CASE("grad_check skips graphs with a hard argmax") {
  Leaves l;
  auto& x = l.make({2, 3});
  const auto r = gradcheck::check(l.all(), [&](Graph& g) { return reduce_sum(argmax(g.param(x))); });
  CHECK(r.skipped);
  CHECK_FALSE(r.passed);
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("argmax") != std::string::npos);
}

TEST_CASE("grad_check catches a corrupted backward rule") {
  Leaves l;
  auto& x = l.make({4, 4}, -2, 2);
  const auto good = gradcheck::check(l.all(), [&](Graph& g) { return gradcheck::random_projection(silu(g.param(x)), 4); });
  const auto bad =
      gradcheck::check(l.all(), [&](Graph& g) { return gradcheck::random_projection(gradcheck::corrupted_silu(g.param(x)), 4); });
  CHECK(good.passed);
  CHECK_FALSE(bad.passed);
}

TEST_CASE("shared parameters accumulate into one gradient") {
  Parameter w("w", Tensor({2}, {1.0, -2.0}));
  Graph g;
  Var a = g.param(w);
  Var b = g.param(w);
  CHECK(a.id == b.id);
  g.backward(reduce_sum(a * b));
  g.accumulate_parameter_grads();
  CHECK(w.grad[0] == 2.0);
  CHECK(w.grad[1] == -4.0);
}

TEST_CASE("forward and backward are bit-reproducible") {
  auto run = [] {
    Rng rng(99);
    Parameter x("x", uniform_tensor({4, 4, 3}, rng, -1, 1));
    Parameter w("w", uniform_tensor({3, 3, 3}, rng, -1, 1));
    Graph g;
    Var y = depthwise_conv3x3(g.param(x), g.param(w));
    g.backward(gradcheck::random_projection(softmax(y), 7));
    g.accumulate_parameter_grads();
    return std::make_pair(x.grad.vec(), w.grad.vec());
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip") {
  Rng rng(3);
  ParamStore store;
  store.add("enc.w", uniform_tensor({2, 3}, rng, -1, 1));
  store.add("enc.b", uniform_tensor({3}, rng, -1, 1));
  const auto dir = std::filesystem::temp_directory_path() / "stsmcd_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_checkpoint(store, path);
  {
    std::ifstream is(path, std::ios::binary);
    std::string magic(4, '\0');
    is.read(magic.data(), 4);
    CHECK(magic == "CMCK");
  }

  ParamStore copy;
  copy.add("enc.w", Tensor({2, 3}));
  copy.add("enc.b", Tensor({3}));
  load_checkpoint(copy, path);
  CHECK(copy.find("enc.w")->value.vec() == store.find("enc.w")->value.vec());
  CHECK(copy.find("enc.b")->value.vec() == store.find("enc.b")->value.vec());

  ParamStore wrong;
  wrong.add("enc.w", Tensor({3, 2}));
  wrong.add("enc.b", Tensor({3}));
  CHECK_THROWS_AS(load_checkpoint(wrong, path), FormatError);

  ParamStore missing;
  missing.add("dec.w", Tensor({1}));
  CHECK_THROWS_AS(load_checkpoint(missing, path), FormatError);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  std::filesystem::remove_all(dir);
}
