#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fd_check.hpp"
#include "oracles.hpp"
#include "pclab/diff/ops.hpp"
#include "pclab/hmm.hpp"

using namespace pclab;
using oracle::Seq;

namespace {

Hmm make_hmm(std::size_t d, std::size_t v, std::uint64_t seed, double scale = 1.0) {
  return Hmm(HmmConfig{d, v, scale, seed});
}

// Joint by summing over every hidden path.
double path_sum(const Hmm& h, const Seq& x) {
  const auto pi = h.log_init(), a = h.log_trans(), e = h.log_emit();
  const std::size_t d = h.states(), v = h.vocab(), n = x.size();
  double total = 0;
  oracle::for_each_sequence(n, d, [&](const Seq& z) {
    double lp = pi[z[0]] + e[z[0] * v + x[0]];
    for (std::size_t t = 1; t < n; ++t) lp += a[z[t - 1] * d + z[t]] + e[z[t] * v + x[t]];
    total += std::exp(lp);
  });
  return total;
}

double sum_exp(const std::vector<double>& l) {
  double s = 0;
  for (double x : l) s += std::exp(x);
  return s;
}

std::vector<std::size_t> all_rows(const SequenceBatch& b) {
  std::vector<std::size_t> r(b.rows());
  std::iota(r.begin(), r.end(), 0);
  return r;
}

}  // namespace

TEST_CASE("forward algorithm equals the path sum") {
  for (std::size_t d : {1, 2, 3}) {
    for (std::size_t v : {2, 3}) {
      const auto h = make_hmm(d, v, 10 * d + v);
      for (std::size_t n : {1, 2, 3, 4}) {
        double total = 0;
        oracle::for_each_sequence(n, v, [&](const Seq& x) {
          const double p = std::exp(h.log_prob(x));
          CHECK(std::abs(p - path_sum(h, x)) < 1e-12);
          total += p;
        });
        CHECK(std::abs(total - 1) < 1e-9);
      }
    }
  }
}

TEST_CASE("filter and predictive posteriors") {
  const auto h = make_hmm(3, 3, 5);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    Seq x(1 + rng() % 5);
    for (auto& t : x) t = rng() % 3;
    CHECK(std::abs(sum_exp(h.forward_filter(x)) - 1) < 1e-9);
    CHECK(std::abs(sum_exp(h.predictive(x)) - 1) < 1e-9);
    // Incremental: the filter at t, pushed through the transition, is the predictive at t+1.
    const auto f = h.forward_filter(x);
    const auto a = h.log_trans();
    const auto pred = h.predictive(x);
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < 3; ++j) s += std::exp(f[j] + a[j * 3 + k]);
      CHECK(std::abs(s - std::exp(pred[k])) < 1e-12);
    }
  }
  const auto p0 = h.predictive(Seq{});
  const auto pi = h.log_init();
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(p0[j] - pi[j]) < 1e-12);
  CHECK_THROWS(h.forward_filter(Seq{3}));
}

TEST_CASE("hand-computed posterior, d=2 V=2") {
  auto h = make_hmm(2, 2, 0);
  // pi = (0.6, 0.4); emissions rows (0.9, 0.1), (0.2, 0.8).
  h.init().value() = {std::log(0.6), std::log(0.4)};
  h.emit().value() = {std::log(0.9), std::log(0.1), std::log(0.2), std::log(0.8)};
  h.trans().value() = {std::log(0.7), std::log(0.3), std::log(0.5), std::log(0.5)};
  const auto f = h.forward_filter(Seq{1});
  const double z = 0.6 * 0.1 + 0.4 * 0.8;
  CHECK(std::exp(f[0]) == doctest::Approx(0.06 / z).epsilon(1e-12));
  CHECK(std::exp(f[1]) == doctest::Approx(0.32 / z).epsilon(1e-12));
  const double q0 = 0.06 / z * 0.7 + 0.32 / z * 0.5;
  const auto nt = h.next_token(Seq{1});
  CHECK(nt[0] == doctest::Approx(q0 * 0.9 + (1 - q0) * 0.2).epsilon(1e-12));
}

TEST_CASE("uniform and degenerate models") {
  auto h = make_hmm(3, 4, 0);
  for (auto* p : h.parameters()) std::fill(p->value().begin(), p->value().end(), 0.0);
  for (double p : h.next_token(Seq{1, 2})) CHECK(p == doctest::Approx(0.25));
  for (double l : h.forward_filter(Seq{0, 3})) CHECK(std::exp(l) == doctest::Approx(1.0 / 3));
  const auto one = make_hmm(1, 4, 3);
  const auto row = one.log_emit();
  for (const Seq& x : {Seq{}, Seq{0}, Seq{3, 1, 2}}) {
    const auto nt = one.next_token(x);
    for (std::size_t v = 0; v < 4; ++v) CHECK(std::abs(nt[v] - std::exp(row[v])) < 1e-12);
  }
}

TEST_CASE("next token is the brute-force conditional; chain rule") {
  const auto h = make_hmm(3, 3, 17);
  oracle::for_each_sequence(3, 3, [&](const Seq& pre) {
    double denom = 0;
    std::vector<double> num(3, 0.0);
    oracle::for_each_sequence(1, 3, [&](const Seq& last) {
      Seq full = pre;
      full.push_back(last[0]);
      const double p = path_sum(h, full);
      num[last[0]] += p;
      denom += p;
    });
    const auto nt = h.next_token(pre);
    for (std::size_t v = 0; v < 3; ++v) CHECK(std::abs(nt[v] - num[v] / denom) < 1e-9);
    Seq x = pre;
    x.push_back(1);
    double chain = 0;
    for (std::size_t t = 0; t < x.size(); ++t) chain -= std::log(h.next_token(std::span(x).first(t))[x[t]]);
    CHECK(std::abs(chain + h.log_prob(x)) < 1e-9);
  });
}

TEST_CASE("chain compilation to a circuit") {
  for (std::size_t d : {1, 2, 3}) {
    for (std::size_t n : {1, 2, 3, 4}) {
      const auto h = make_hmm(d, 3, 7 * d + n);
      const auto c = h.as_circuit(n);
      CHECK(c.validate().decomposable);
      CHECK(c.validate().smooth);
      oracle::for_each_sequence(n, 3, [&](const Seq& x) {
        CHECK(std::abs(c.log_prob(x) - h.log_prob(x)) < 1e-9);
        CHECK(std::abs(oracle::prob(c, oracle::observe(x, n)) - path_sum(h, x)) < 1e-9);
      });
    }
  }
  // N = 1: mixture of emission rows.
  const auto h = make_hmm(2, 3, 4);
  const auto c = h.as_circuit(1);
  const auto pi = h.log_init(), e = h.log_emit();
  for (std::uint32_t v = 0; v < 3; ++v) {
    const double want = std::exp(pi[0] + e[v]) + std::exp(pi[1] + e[3 + v]);
    CHECK(std::abs(std::exp(c.log_prob(Seq{v})) - want) < 1e-12);
  }
}

TEST_CASE("latent interface of the compiled chain is the emission matrix") {
  const auto h = make_hmm(3, 4, 2);
  const auto c = h.as_circuit(4);
  const auto e = h.log_emit();
  for (const Seq& pre : {Seq{}, Seq{1}, Seq{1, 3}, Seq{0, 2, 2}}) {
    const auto li = c.latent_interface(pre);
    const auto nt = h.next_token(pre);
    for (std::size_t v = 0; v < 4; ++v) {
      double r = 0;
      for (std::size_t j = 0; j < li.k; ++j) r += li.w_at(v, j) * li.e[j];
      CHECK(std::abs(r - nt[v]) < 1e-9);
    }
    // Each W column is one emission row; at the last step the chain ends in
    // sum nodes, so the columns are transition-weighted rows sum_k A[j,k] E[k].
    const bool last = pre.size() == 3;
    const auto a = h.log_trans();
    auto row = [&](std::size_t s, std::size_t v) {
      if (!last) return std::exp(e[s * 4 + v]);
      double r = 0;
      for (std::size_t k = 0; k < 3; ++k) r += std::exp(a[s * 3 + k] + e[k * 4 + v]);
      return r;
    };
    for (std::size_t j = 0; j < li.k; ++j) {
      bool found = false;
      for (std::size_t s = 0; s < 3 && !found; ++s) {
        bool same = true;
        for (std::size_t v = 0; v < 4; ++v) same &= std::abs(li.w_at(v, j) - row(s, v)) < 1e-9;
        found = same;
      }
      CHECK(found);
    }
  }
}

TEST_CASE("logit head") {
  LogitHmm m(HmmConfig{3, 5, 0.5, 9});
  std::fill(m.head().value().begin(), m.head().value().end(), 0.0);
  std::fill(m.bias().value().begin(), m.bias().value().end(), 0.0);
  for (double p : m.next_token(Seq{1, 4})) CHECK(p == doctest::Approx(0.2));

  LogitHmm r(HmmConfig{3, 5, 0.5, 10});
  std::mt19937_64 rng(0);
  for (double& w : r.head().value()) w = std::normal_distribution<>(0, 1)(rng);
  for (double& b : r.bias().value()) b = std::normal_distribution<>(0, 1)(rng);
  const Seq pre{2, 0, 3};
  const auto e = r.hmm().predictive(pre);
  std::vector<double> logits(5);
  double z = 0;
  for (std::size_t v = 0; v < 5; ++v) {
    logits[v] = r.bias().value()[v];
    for (std::size_t j = 0; j < 3; ++j) logits[v] += r.head().value()[v * 3 + j] * e[j];
    z += std::exp(logits[v]);
  }
  const auto nt = r.next_token(pre);
  for (std::size_t v = 0; v < 5; ++v) CHECK(std::abs(nt[v] - std::exp(logits[v]) / z) < 1e-12);

  const auto data = gen_local_copy(4, 5, 8, 2);
  diff::Tape tape;
  auto rows = all_rows(data);
  auto terms = r.loss(tape, data, rows, false, rng);
  double want = 0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto x = data.row(i);
    for (std::size_t t = 0; t < 4; ++t) want -= std::log(r.next_token(x.first(t))[x[t]]);
  }
  CHECK(terms.total.item() == doctest::Approx(want).epsilon(1e-10));
  CHECK(terms.count == 32);
}

TEST_CASE("tape loss equals the forward algorithm") {
  auto h = make_hmm(3, 4, 12);
  auto data = gen_mixed(8, 4, 10, 0.5, 1);
  std::mt19937_64 rng(0);
  diff::Tape tape;
  auto rows = all_rows(data);
  auto terms = h.loss(tape, data, rows, false, rng);
  double want = 0, count = 0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto x = data.row(i);
    const auto m = data.mask_row(i);
    for (std::size_t t = 0; t < 8; ++t) {
      if (!m[t]) continue;
      want -= std::log(h.next_token(x.first(t))[x[t]]);
      ++count;
    }
  }
  CHECK(terms.count == count);
  CHECK(terms.total.item() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("gradients match finite differences") {
  const auto data = gen_mixed(4, 3, 6, 0.5, 5);
  std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5};
  std::mt19937_64 rng(0);
  auto h = make_hmm(3, 3, 1);
  auto r1 = fdcheck::check(h.parameters(), [&](diff::Tape& t) {
    auto terms = h.loss(t, data, rows, true, rng);
    return diff::scale(terms.total, 1.0 / terms.count);
  });
  CHECK(r1.max_rel_err < 1e-3);
  LogitHmm l(HmmConfig{3, 3, 0.5, 2});
  for (double& w : l.head().value()) w = std::normal_distribution<>(0, 0.5)(rng);
  auto r2 = fdcheck::check(l.parameters(), [&](diff::Tape& t) {
    auto terms = l.loss(t, data, rows, true, rng);
    return diff::scale(terms.total, 1.0 / terms.count);
  });
  CHECK(r2.max_rel_err < 1e-3);
  CHECK(r2.checked == l.param_count());
}

TEST_CASE("parameter counts") {
  // Independent formulas: d^2 + Vd + d and d^2 + 2Vd + V + d.
  auto hmm_count = [](std::size_t d, std::size_t v) { return d * d + v * d + d; };
  auto logit_count = [](std::size_t d, std::size_t v) { return d * d + 2 * v * d + v + d; };
  CHECK(param_count(Family::kHmm, 8, 50257) == 402128);
  CHECK(param_count(Family::kLogitHmm, 8, 50257) == 854441);
  CHECK(param_count(Family::kHmm, 1, 1) == 3);
  for (std::size_t d : {1, 2, 5}) {
    for (std::size_t v : {2, 7}) {
      auto h = make_hmm(d, v, 0);
      LogitHmm l(HmmConfig{d, v, 0.5, 0});
      CHECK(h.param_count() == hmm_count(d, v));
      CHECK(param_count(Family::kHmm, d, v) == hmm_count(d, v));
      CHECK(l.param_count() == logit_count(d, v));
      CHECK(param_count(Family::kLogitHmm, d, v) == logit_count(d, v));
    }
  }
  CHECK_THROWS(parse_family("rnn"));
  CHECK(family_name(parse_family("logit-hmm")) == "logit-hmm");
}

TEST_CASE("JSON round trip") {
  auto h = make_hmm(3, 4, 8);
  const auto back = Hmm::from_json(nlohmann::json::parse(h.to_json().dump()));
  CHECK(back->log_prob(Seq{1, 2, 3}) == h.log_prob(Seq{1, 2, 3}));
  LogitHmm l(HmmConfig{3, 4, 0.5, 1});
  const auto lb = LogitHmm::from_json(nlohmann::json::parse(l.to_json().dump()));
  CHECK(lb->next_token(Seq{0, 1}) == l.next_token(Seq{0, 1}));
}
