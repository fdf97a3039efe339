#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "pclab/diff/ops.hpp"

using namespace pclab::diff;

namespace {

Parameter random_param(const std::string& name, Shape shape, std::mt19937_64& rng,
                       double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Parameter(name, std::move(shape), std::move(v));
}

// Random fixed weights so that every output entry of a primitive feeds the loss.
Tensor weighted_sum(Tape& t, const Tensor& x, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(x.size());
  for (auto& v : w) v = u(rng);
  return sum(mul(x, t.constant(x.shape(), w)));
}

void expect_grad_ok(std::vector<Parameter*> params, const fdcheck::LossFn& f) {
  auto r = fdcheck::check(params, f);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_err < 1e-3);
}

}  // namespace

TEST_CASE("softmax and logsumexp basics") {
  Tape t;
  auto s = softmax(t.constant({2}, {0.0, 0.0}));
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK(s.values()[1] == doctest::Approx(0.5));

  auto l = logsumexp(t.constant({2}, {std::log(0.3), std::log(0.7)}), 0);
  CHECK(std::abs(l.item()) < 1e-15);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  std::vector<double> x(7 * 5);
  for (auto& v : x) v = n(rng);
  auto sm = softmax(t.constant({7, 5}, x));
  for (int r = 0; r < 7; ++r) {
    double total = 0;
    for (int k = 0; k < 5; ++k) total += sm.values()[r * 5 + k];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  const double c = 123.456;
  auto base = logsumexp(t.constant({7, 5}, x), 1);
  std::vector<double> shifted = x;
  for (auto& v : shifted) v += c;
  auto moved = logsumexp(t.constant({7, 5}, shifted), 1);
  for (int r = 0; r < 7; ++r) CHECK(std::abs(moved.values()[r] - base.values()[r] - c) < 1e-12);
}

TEST_CASE("matmul with identity") {
  Tape t;
  std::vector<double> a = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto eye = t.constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = matmul(eye, t.constant({3, 3}, a));
  for (int i = 0; i < 9; ++i) CHECK(out.values()[i] == a[i]);
}

TEST_CASE("shape errors") {
  Tape t;
  auto a = t.constant({2, 3}, 0.0);
  auto b = t.constant({4, 2}, 0.0);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
  CHECK_THROWS_AS(logsumexp(a, 2), ShapeError);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape t;
  CHECK_THROWS_AS(log(t.constant({2}, {1.0, -1.0})), NumericalError);
  CHECK_THROWS_AS(log(t.constant({1}, {0.0})), NumericalError);
}

TEST_CASE("trivial gradients") {
  Parameter p("p", {4}, {1, -2, 3, 0.5});
  p.zero_grad();
  {
    Tape t;
    auto l = sum(t.param(p));
    t.backward(l);
  }
  for (double g : p.grad()) CHECK(g == 1.0);

  Parameter q("q", {1}, {3.0});
  q.zero_grad();
  Tape t;
  auto x = t.param(q);
  auto l = sum(mul(x, x));
  t.backward(l);
  CHECK(q.grad()[0] == doctest::Approx(6.0));

  Tape t2;
  CHECK_THROWS_AS(t2.backward(t2.param(p)), ShapeError);
}

TEST_CASE("disconnected parameter gets zero gradient") {
  Parameter used("u", {2}, {1, 2}), unused("n", {2}, {3, 4});
  used.zero_grad();
  unused.zero_grad();
  Tape t;
  t.param(unused);
  auto l = sum(t.param(used));
  t.backward(l);
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("elementwise gradients vs finite differences") {
  std::mt19937_64 rng(7);
  auto a = random_param("a", {3, 4}, rng);
  auto b = random_param("b", {4}, rng);
  auto pos = random_param("pos", {3, 4}, rng, 0.5, 2.0);
  expect_grad_ok({&a, &b}, [&](Tape& t) { return weighted_sum(t, add(t.param(a), t.param(b)), 1); });
  expect_grad_ok({&a, &b}, [&](Tape& t) { return weighted_sum(t, sub(t.param(b), t.param(a)), 2); });
  expect_grad_ok({&a, &b}, [&](Tape& t) { return weighted_sum(t, mul(t.param(a), t.param(b)), 3); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, scale(t.param(a), -2.5), 4); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, exp(t.param(a)), 5); });
  expect_grad_ok({&pos}, [&](Tape& t) { return weighted_sum(t, log(t.param(pos)), 6); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, softplus(t.param(a)), 7); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, gelu(t.param(a)), 8); });
}

TEST_CASE("broadcast in both directions") {
  std::mt19937_64 rng(11);
  auto col = random_param("col", {3, 1}, rng);
  auto row = random_param("row", {1, 4}, rng);
  Tape t;
  auto out = add(t.param(col), t.param(row));
  CHECK(out.shape() == Shape{3, 4});
  CHECK(out.values()[1 * 4 + 2] == doctest::Approx(col.value()[1] + row.value()[2]));
  expect_grad_ok({&col, &row}, [&](Tape& tp) { return weighted_sum(tp, mul(tp.param(col), tp.param(row)), 9); });
}

TEST_CASE("shape op gradients") {
  std::mt19937_64 rng(13);
  auto a = random_param("a", {2, 3, 4}, rng);
  auto b = random_param("b", {2, 3, 4}, rng);
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, reshape(t.param(a), {6, 4}), 1); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, transpose_last2(t.param(a)), 2); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, slice_last(t.param(a), 1, 2), 3); });
  expect_grad_ok({&a, &b}, [&](Tape& t) {
    Tensor parts[] = {t.param(a), t.param(b), t.param(a)};
    return weighted_sum(t, stack_last(parts), 4);
  });
}

TEST_CASE("reduction gradients") {
  std::mt19937_64 rng(17);
  auto a = random_param("a", {3, 4, 5}, rng, -3, 3);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, sum(t.param(a), axis), 10 + axis); });
    expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, logsumexp(t.param(a), axis), 20 + axis); });
  }
  expect_grad_ok({&a}, [&](Tape& t) { return mean(mul(t.param(a), t.param(a))); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, softmax(t.param(a)), 30); });
  expect_grad_ok({&a}, [&](Tape& t) { return weighted_sum(t, log_softmax(t.param(a)), 31); });
}

TEST_CASE("matmul and log_matmul gradients") {
  std::mt19937_64 rng(19);
  auto x = random_param("x", {2, 3, 4}, rng);
  auto w = random_param("w", {4, 5}, rng);
  expect_grad_ok({&x, &w}, [&](Tape& t) { return weighted_sum(t, matmul(t.param(x), t.param(w)), 1); });

  auto lx = random_param("lx", {3, 2, 4}, rng, -2, 2);
  auto lw = random_param("lw", {2, 3, 4}, rng, -2, 2);
  auto lw1 = random_param("lw1", {1, 3, 4}, rng, -2, 2);
  expect_grad_ok({&lx, &lw}, [&](Tape& t) { return weighted_sum(t, log_matmul(t.param(lx), t.param(lw)), 2); });
  expect_grad_ok({&lx, &lw1}, [&](Tape& t) { return weighted_sum(t, log_matmul(t.param(lx), t.param(lw1)), 3); });

  // log_matmul agrees with log(exp(x) . exp(w)^T) computed directly.
  Tape t;
  auto out = log_matmul(t.param(lx), t.param(lw));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t g = 0; g < 2; ++g)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k)
          s += std::exp(lx.value()[(b * 2 + g) * 4 + k] + lw.value()[(g * 3 + c) * 4 + k]);
        CHECK(out.values()[(b * 2 + g) * 3 + c] == doctest::Approx(std::log(s)).epsilon(1e-12));
      }
}

TEST_CASE("gather gradients") {
  std::mt19937_64 rng(23);
  auto table = random_param("table", {5, 3}, rng);
  std::vector<std::uint32_t> ids = {4, 0, 4, 2, 1, 1};
  expect_grad_ok({&table}, [&](Tape& t) { return weighted_sum(t, embedding(t.param(table), ids, {2, 3}), 1); });

  auto x = random_param("x", {2, 3, 5}, rng);
  expect_grad_ok({&x}, [&](Tape& t) { return weighted_sum(t, gather_last(t.param(x), ids), 2); });

  auto tab3 = random_param("tab3", {3, 2, 5}, rng);
  expect_grad_ok({&tab3}, [&](Tape& t) { return weighted_sum(t, gather_table(t.param(tab3), ids, 2), 3); });

  Tape t;
  std::vector<std::uint32_t> bad = {5};
  CHECK_THROWS(embedding(t.param(table), bad, {1}));
}

TEST_CASE("layer norm, attention and cross entropy gradients") {
  std::mt19937_64 rng(29);
  auto x = random_param("x", {2, 3, 4}, rng, -2, 2);
  auto gain = random_param("gain", {4}, rng, 0.5, 1.5);
  auto bias = random_param("bias", {4}, rng);
  expect_grad_ok({&x, &gain, &bias}, [&](Tape& t) {
    return weighted_sum(t, layer_norm(t.param(x), t.param(gain), t.param(bias)), 1);
  });

  auto q = random_param("q", {2, 4, 6}, rng);
  auto k = random_param("k", {2, 4, 6}, rng);
  auto v = random_param("v", {2, 4, 6}, rng);
  auto causal = AttentionMask::causal(4);
  expect_grad_ok({&q, &k, &v}, [&](Tape& t) {
    return weighted_sum(t, attention(t.param(q), t.param(k), t.param(v), 2, causal), 2);
  });
  AttentionMask sparse = causal;
  sparse.allowed[3 * 4 + 1] = 0;
  sparse.allowed[2 * 4 + 0] = 0;
  expect_grad_ok({&q, &k, &v}, [&](Tape& t) {
    return weighted_sum(t, attention(t.param(q), t.param(k), t.param(v), 3, sparse), 3);
  });

  auto logits = random_param("logits", {2, 3, 5}, rng, -2, 2);
  std::vector<std::uint32_t> tgt = {0, 4, 2, 1, 1, 3};
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};
  expect_grad_ok({&logits}, [&](Tape& t) { return cross_entropy(t.param(logits), tgt, mask); });

  // Ignored rows do not affect the value.
  Tape t;
  auto base = cross_entropy(t.param(logits), tgt, mask).item();
  tgt[1] = 3;
  CHECK(cross_entropy(t.param(logits), tgt, mask).item() == base);
  std::vector<std::uint8_t> none(6, 0);
  CHECK_THROWS(cross_entropy(t.param(logits), tgt, none));
}

TEST_CASE("attention honors the causal mask") {
  std::mt19937_64 rng(31);
  auto q = random_param("q", {1, 4, 4}, rng);
  auto k = random_param("k", {1, 4, 4}, rng);
  auto v = random_param("v", {1, 4, 4}, rng);
  auto causal = AttentionMask::causal(4);
  Tape t1;
  auto before = attention(t1.param(q), t1.param(k), t1.param(v), 2, causal);
  std::vector<double> ref(before.values().begin(), before.values().end());
  for (int e = 0; e < 4; ++e) {
    k.value()[3 * 4 + e] += 5.0;
    v.value()[3 * 4 + e] -= 5.0;
  }
  Tape t2;
  auto after = attention(t2.param(q), t2.param(k), t2.param(v), 2, causal);
  for (int i = 0; i < 12; ++i) CHECK(after.values()[i] == ref[i]);
}

TEST_CASE("dropout is seeded and inactive at eval") {
  std::mt19937_64 rng(37);
  auto x = random_param("x", {50}, rng);
  Tape t;
  std::mt19937_64 r1(5), r2(5);
  auto a = dropout(t.param(x), 0.3, r1, true);
  auto b = dropout(t.param(x), 0.3, r2, true);
  int zeros = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(a.values()[i] == b.values()[i]);
    zeros += a.values()[i] == 0.0;
  }
  CHECK(zeros > 0);
  auto e = dropout(t.param(x), 0.3, r1, false);
  for (std::size_t i = 0; i < 50; ++i) CHECK(e.values()[i] == x.value()[i]);
  expect_grad_ok({&x}, [&](Tape& tp) {
    std::mt19937_64 local(9);
    return weighted_sum(tp, dropout(tp.param(x), 0.5, local, true), 1);
  });
}

TEST_CASE("random five-parameter composite") {
  std::mt19937_64 rng(41);
  auto emb = random_param("emb", {6, 4}, rng);
  auto w1 = random_param("w1", {4, 4}, rng);
  auto g = random_param("g", {4}, rng, 0.5, 1.5);
  auto b = random_param("b", {4}, rng);
  auto w2 = random_param("w2", {4, 6}, rng);
  std::vector<std::uint32_t> ids = {1, 5, 2, 0, 3, 3};
  std::vector<std::uint32_t> tgt = {5, 2, 0, 3, 3, 1};
  std::vector<std::uint8_t> mask(6, 1);
  auto mask_c = AttentionMask::causal(3);
  expect_grad_ok({&emb, &w1, &g, &b, &w2}, [&](Tape& t) {
    auto h = embedding(t.param(emb), ids, {2, 3});
    auto n = layer_norm(h, t.param(g), t.param(b));
    auto a = attention(n, n, n, 2, mask_c);
    auto z = gelu(matmul(add(h, a), t.param(w1)));
    auto logits = matmul(softplus(z), t.param(w2));
    return cross_entropy(logits, tgt, mask);
  });
}

TEST_CASE("replay reproduces forward values bit-identically") {
  std::mt19937_64 rng(43);
  auto a = random_param("a", {2, 3, 4}, rng);
  auto w = random_param("w", {4, 4}, rng);
  auto g = random_param("g", {4}, rng);
  auto b = random_param("b", {4}, rng);
  Tape t;
  std::mt19937_64 drop(3);
  auto x = layer_norm(matmul(t.param(a), t.param(w)), t.param(g), t.param(b));
  auto y = dropout(gelu(x), 0.2, drop, true);
  auto z = attention(y, y, y, 2, AttentionMask::causal(3));
  auto l = mean(log_softmax(z));
  auto before = l.item();
  CHECK(t.replay());
  CHECK(l.item() == before);
}

TEST_CASE("backward visits each record once (accumulating parameter grads)") {
  Parameter p("p", {3}, {1, 2, 3});
  p.zero_grad();
  for (int step = 0; step < 2; ++step) {
    Tape t;
    auto x = t.param(p);
    auto l = sum(add(x, x));  // d/dp = 2 per entry per pass
    t.backward(l);
  }
  for (double gr : p.grad()) CHECK(gr == 4.0);
}
