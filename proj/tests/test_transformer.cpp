#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fd_check.hpp"
#include "pclab/hmm.hpp"
#include "pclab/transformer.hpp"

using namespace pclab;

namespace {

Transformer make(std::size_t n, std::size_t v, HeadKind head, MaskKind mask, std::uint64_t seed,
                 std::size_t d = 8, double scale = 0.3) {
  TransformerConfig c;
  c.layers = mask == MaskKind::kVanilla ? 2 : log2_exact(n);
  c.heads = 2;
  c.d = d;
  c.context = n;
  c.vocab = v;
  c.head = head;
  c.mask = mask;
  c.init_scale = scale;
  c.seed = seed;
  return Transformer(c);
}

std::vector<std::uint32_t> random_tokens(std::size_t n, std::size_t v, std::mt19937_64& rng) {
  std::vector<std::uint32_t> x(n);
  for (auto& t : x) t = static_cast<std::uint32_t>(rng() % v);
  return x;
}

// Same-subtree test straight from the vtree: some node with 2^(layer+1)
// leaves holds both positions.
bool same_subtree(const Vtree& vt, std::size_t i, std::size_t j, std::size_t layer) {
  for (const auto& node : vt.nodes()) {
    if (popcount(node.scope) != (std::size_t{1} << (layer + 1))) continue;
    if ((node.scope & singleton(i)) && (node.scope & singleton(j))) return true;
  }
  return false;
}

std::vector<std::size_t> all_rows(const SequenceBatch& b) {
  std::vector<std::size_t> r(b.rows());
  std::iota(r.begin(), r.end(), 0);
  return r;
}

}  // namespace

TEST_CASE("tree attention masks") {
  const auto a0 = tree_attention_mask(MaskKind::kAdjacent, 8, 0);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(a0(i, j) == (j <= i && i / 2 == j / 2));

  const auto d0 = tree_attention_mask(MaskKind::kDistant, 8, 0);
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 4}, {2, 6}, {1, 5}, {3, 7}};
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      bool paired = i == j;
      for (auto [a, b] : pairs) paired |= (i == a && j == b) || (i == b && j == a);
      CHECK(d0(i, j) == (paired && j <= i));
    }
  }

  for (std::size_t n : {4, 8, 16}) {
    const std::size_t depth = log2_exact(n);
    for (auto kind : {MaskKind::kAdjacent, MaskKind::kDistant}) {
      const auto top = tree_attention_mask(kind, n, depth - 1);
      const auto causal = diff::AttentionMask::causal(n);
      CHECK(top.allowed == causal.allowed);
      const auto vt = Vtree::balanced(kind == MaskKind::kAdjacent ? standard_perm(n) : shifted_induction_perm(n));
      for (std::size_t l = 0; l < depth; ++l) {
        const auto m = tree_attention_mask(kind, n, l);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) CHECK(m(i, j) == (j <= i && same_subtree(vt, i, j, l)));
      }
    }
  }
  CHECK(tree_attention_mask(MaskKind::kVanilla, 8, 5).allowed == diff::AttentionMask::causal(8).allowed);
  CHECK_THROWS(tree_attention_mask(MaskKind::kAdjacent, 8, 3));
  CHECK_THROWS(tree_attention_mask(MaskKind::kDistant, 6, 0));
  CHECK_THROWS(parse_mask("diagonal"));
  CHECK(parse_mask(mask_name(MaskKind::kDistant)) == MaskKind::kDistant);
}

TEST_CASE("probability head") {
  std::mt19937_64 rng(4);
  const std::size_t r = 4, v = 6;
  std::vector<double> basis(r * v);
  for (std::size_t i = 0; i < r; ++i) {
    double z = 0;
    for (std::size_t k = 0; k < v; ++k) z += std::exp(basis[i * v + k] = std::normal_distribution<>(0, 1)(rng));
    for (std::size_t k = 0; k < v; ++k) basis[i * v + k] -= std::log(z);
  }
  // h = 0: equal weights.
  const std::vector<double> zero(r, 0.0);
  const auto u = prob_head(zero, basis, v);
  for (std::size_t k = 0; k < v; ++k) {
    double want = 0;
    for (std::size_t i = 0; i < r; ++i) want += std::exp(basis[i * v + k]) / r;
    CHECK(std::abs(u[k] - want) < 1e-12);
  }
  // One dominant coordinate. Softplus weights decay only linearly, so with the
  // rest at 0 the leftover mass is (r-1) ln2 / (50 + (r-1) ln2); driving the
  // rest negative as well makes it vanish.
  std::vector<double> h(r, 0.0);
  h[2] = 50;
  auto l1_to_column = [&](const std::vector<double>& hh) {
    const auto dom = prob_head(hh, basis, v);
    double l1 = 0;
    for (std::size_t k = 0; k < v; ++k) l1 += std::abs(dom[k] - std::exp(basis[2 * v + k]));
    return l1;
  };
  const double rest = 3 * std::log(2.0) / (50 + 3 * std::log(2.0));
  CHECK(l1_to_column(h) <= 2 * rest + 1e-12);
  CHECK(l1_to_column(h) > 1e-3);
  h = {-50, -50, 50, -50};
  CHECK(l1_to_column(h) < 1e-3);
  // Explicit softplus weights, and the simplex.
  for (int trial = 0; trial < 10; ++trial) {
    for (auto& x : h) x = std::normal_distribution<>(0, 3)(rng);
    const auto p = prob_head(h, basis, v);
    std::vector<double> c(r);
    double cs = 0;
    for (std::size_t i = 0; i < r; ++i) cs += c[i] = std::log1p(std::exp(h[i]));
    double s = 0;
    for (std::size_t k = 0; k < v; ++k) {
      double want = 0;
      for (std::size_t i = 0; i < r; ++i) want += c[i] / cs * std::exp(basis[i * v + k]);
      CHECK(std::abs(p[k] - want) < 1e-12);
      CHECK(p[k] >= 0);
      s += p[k];
    }
    CHECK(std::abs(s - 1) < 1e-9);
  }
  // r = 1.
  const std::vector<double> one_basis(basis.begin(), basis.begin() + v);
  for (double x : {-7.0, 0.0, 3.0}) {
    const auto p = prob_head(std::vector<double>{x}, one_basis, v);
    for (std::size_t k = 0; k < v; ++k) CHECK(std::abs(p[k] - std::exp(one_basis[k])) < 1e-12);
  }
  CHECK_THROWS(prob_head(zero, one_basis, v));
}

TEST_CASE("zero output map gives uniform predictions") {
  for (auto head : {HeadKind::kLogit, HeadKind::kProb}) {
    auto m = make(8, 5, head, MaskKind::kVanilla, 1);
    std::fill(m.output().value().begin(), m.output().value().end(), 0.0);
    std::mt19937_64 rng(0);
    for (const auto& dist : m.distributions(random_tokens(8, 5, rng))) {
      for (double p : dist) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
    }
    const auto data = gen_local_copy(8, 5, 10, 0);
    diff::Tape tape;
    auto rows = all_rows(data);
    auto t = m.loss(tape, data, rows, false, rng);
    CHECK(t.total.item() / t.count == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
}

TEST_CASE("distributions are normalized and causal") {
  std::mt19937_64 rng(7);
  for (auto head : {HeadKind::kLogit, HeadKind::kProb}) {
    for (auto mask : {MaskKind::kVanilla, MaskKind::kAdjacent, MaskKind::kDistant}) {
      auto m = make(8, 4, head, mask, 3);
      for (int trial = 0; trial < 5; ++trial) {
        const auto x = random_tokens(8, 4, rng);
        const auto base = m.distributions(x);
        for (const auto& dist : base) {
          double s = 0;
          for (double p : dist) s += p;
          CHECK(std::abs(s - 1) < 1e-9);
        }
        for (std::size_t j = 0; j < 8; ++j) {
          auto y = x;
          y[j] = (y[j] + 1 + rng() % 3) % 4;
          const auto alt = m.distributions(y);
          for (std::size_t t = 0; t <= j; ++t) {
            for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(alt[t][k] - base[t][k]) < 1e-12);
          }
        }
      }
    }
  }
}

TEST_CASE("batch rows are independent") {
  auto m = make(8, 5, HeadKind::kLogit, MaskKind::kVanilla, 2);
  std::mt19937_64 rng(1);
  const auto a = random_tokens(8, 5, rng), b = random_tokens(8, 5, rng);
  std::vector<std::uint32_t> ab(a), ba(b);
  ab.insert(ab.end(), b.begin(), b.end());
  ba.insert(ba.end(), a.begin(), a.end());
  diff::Tape t1, t2;
  const auto x = m.log_probs(t1, ab, 2, 8, false, rng);
  const auto y = m.log_probs(t2, ba, 2, 8, false, rng);
  const std::size_t half = 8 * 5;
  for (std::size_t i = 0; i < half; ++i) {
    CHECK(x.values()[i] == doctest::Approx(y.values()[half + i]).epsilon(1e-13));
    CHECK(x.values()[half + i] == doctest::Approx(y.values()[i]).epsilon(1e-13));
  }
}

TEST_CASE("prob head never leaves the basis support") {
  auto m = make(8, 5, HeadKind::kProb, MaskKind::kVanilla, 5);
  // Token 3 is absent from every basis row.
  for (std::size_t i = 0; i < 8; ++i) m.output().value()[i * 5 + 3] = -1e4;
  std::mt19937_64 rng(2);
  for (const auto& dist : m.distributions(random_tokens(8, 5, rng))) CHECK(dist[3] < 1e-300);
}

TEST_CASE("loss mask is honored") {
  auto m = make(8, 6, HeadKind::kLogit, MaskKind::kVanilla, 9);
  auto data = gen_induction_copy(8, 6, 6, 3);
  std::mt19937_64 rng(0);
  auto rows = all_rows(data);
  auto eval = [&](const SequenceBatch& b) {
    diff::Tape tape;
    return m.loss(tape, b, rows, false, rng).total.item();
  };
  const double before = eval(data);
  // Unscore the final position; its token is never context, so perturbing it
  // must not move the loss.
  auto alt = data;
  for (std::size_t r = 0; r < alt.rows(); ++r) alt.mask[r * 8 + 7] = 0;
  const double without_last = eval(alt);
  auto alt2 = alt;
  for (std::size_t r = 0; r < alt2.rows(); ++r) alt2.tokens[r * 8 + 7] = (alt2.tokens[r * 8 + 7] + 1) % 6;
  CHECK(eval(alt2) == doctest::Approx(without_last).epsilon(1e-13));
  CHECK(before != doctest::Approx(without_last));
}

TEST_CASE("dropout only in training mode") {
  TransformerConfig c;
  c.d = 8;
  c.context = 8;
  c.vocab = 5;
  c.dropout = 0.3;
  c.init_scale = 0.3;
  Transformer m(c);
  const auto data = gen_local_copy(8, 5, 4, 0);
  auto rows = all_rows(data);
  std::mt19937_64 r1(1), r2(2);
  auto eval = [&](bool training, std::mt19937_64& rng) {
    diff::Tape tape;
    return m.loss(tape, data, rows, training, rng).total.item();
  };
  CHECK(eval(false, r1) == eval(false, r2));
  CHECK(eval(true, r1) != eval(true, r2));
}

TEST_CASE("gradients match finite differences") {
  for (auto head : {HeadKind::kLogit, HeadKind::kProb}) {
    for (auto mask : {MaskKind::kVanilla, MaskKind::kDistant}) {
      auto m = make(4, 5, head, mask, 11, 8, 0.5);
      const auto data = gen_mixed(4, 5, 3, 0.5, 1);
      auto rows = all_rows(data);
      std::mt19937_64 rng(0);
      auto r = fdcheck::check(m.parameters(), [&](diff::Tape& t) {
        auto terms = m.loss(t, data, rows, false, rng);
        return diff::scale(terms.total, 1.0 / terms.count);
      }, 1e-5);
      CHECK(r.max_rel_err < 1e-3);
      CHECK(r.checked == m.param_count());
    }
  }
}

TEST_CASE("parameter count") {
  for (std::size_t d : {4, 8, 12}) {
    for (std::size_t layers : {1, 2, 3}) {
      for (auto head : {HeadKind::kLogit, HeadKind::kProb}) {
        TransformerConfig c;
        c.d = d;
        c.heads = 2;
        c.layers = layers;
        c.context = 16;
        c.vocab = 11;
        c.head = head;
        Transformer m(c);
        // Itemized: tokens+BOS, positions, per block (4 projections with
        // bias, MLP d->4d->d with biases, two norms), final norm, output map.
        const std::size_t block = 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d;
        const std::size_t want = 12 * d + 16 * d + layers * block + 2 * d + d * 11;
        CHECK(m.param_count() == want);
        const auto fam = head == HeadKind::kLogit ? Family::kTransformer : Family::kProbTransformer;
        CHECK(param_count(fam, d, 11, layers, 16) == want);
      }
    }
  }
  CHECK(param_count(Family::kTransformer, 8, 50257, 2, 64) == 806392);
  CHECK(param_count(Family::kProbTransformer, 8, 50257, 2, 64) == 806392);
}

TEST_CASE("input validation") {
  auto m = make(8, 5, HeadKind::kLogit, MaskKind::kVanilla, 0);
  std::mt19937_64 rng(0);
  diff::Tape tape;
  std::vector<std::uint32_t> long_seq(9, 0), bad(8, 0);
  bad[3] = 5;
  CHECK_THROWS(m.log_probs(tape, long_seq, 1, 9, false, rng));
  CHECK_THROWS_AS(m.log_probs(tape, bad, 1, 8, false, rng), std::out_of_range);
  TransformerConfig c;
  c.d = 6;
  c.heads = 4;
  CHECK_THROWS(Transformer(c));
  c.heads = 2;
  c.mask = MaskKind::kAdjacent;
  c.context = 16;
  c.layers = 2;
  CHECK_THROWS(Transformer(c));
}

TEST_CASE("JSON round trip") {
  auto m = make(8, 5, HeadKind::kProb, MaskKind::kAdjacent, 4);
  const auto back = Transformer::from_json(nlohmann::json::parse(m.to_json().dump()));
  const std::vector<std::uint32_t> x{1, 2, 3, 4, 0, 1, 2, 3};
  CHECK(back->distributions(x) == m.distributions(x));
  CHECK(back->family() == "prob-transformer");
}
