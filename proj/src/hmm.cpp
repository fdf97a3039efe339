#include "pclab/hmm.hpp"

#include <cmath>
#include <stdexcept>

#include "pclab/balanced_pc.hpp"
#include "pclab/diff/ops.hpp"

namespace pclab {

using diff::Parameter;
using diff::Tape;
using diff::Tensor;

Hmm::Hmm(HmmConfig cfg) : cfg_(cfg) {
  if (cfg_.states < 1 || cfg_.vocab < 1) throw std::invalid_argument("HMM needs d >= 1 and V >= 1");
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.states, v = cfg_.vocab;
  init_ = Parameter("init", {d}, gaussian_values(d, cfg_.init_scale, rng));
  trans_ = Parameter("trans", {d, d}, gaussian_values(d * d, cfg_.init_scale, rng));
  emit_ = Parameter("emit", {d, v}, gaussian_values(d * v, cfg_.init_scale, rng));
}

std::vector<double> Hmm::log_init() const { return log_softmax_rows(init_.value(), cfg_.states); }
std::vector<double> Hmm::log_trans() const { return log_softmax_rows(trans_.value(), cfg_.states); }
std::vector<double> Hmm::log_emit() const { return log_softmax_rows(emit_.value(), cfg_.vocab); }

namespace {

void normalize_log(std::vector<double>& v) {
  const double z = logsumexp(v);
  for (auto& x : v) x -= z;
}

std::vector<double> transition(const std::vector<double>& alpha, const std::vector<double>& la,
                               std::size_t d) {
  std::vector<double> out(d), tmp(d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < d; ++k) tmp[k] = alpha[k] + la[k * d + j];
    out[j] = logsumexp(tmp);
  }
  return out;
}

void check_tokens(std::span<const std::uint32_t> x, std::size_t vocab) {
  for (auto t : x) {
    if (t >= vocab) throw std::out_of_range("token " + std::to_string(t) + " >= vocabulary");
  }
}

}  // namespace

std::vector<double> Hmm::forward_filter(std::span<const std::uint32_t> x) const {
  if (x.empty()) throw std::invalid_argument("forward_filter needs at least one token");
  check_tokens(x, cfg_.vocab);
  const std::size_t d = cfg_.states, v = cfg_.vocab;
  const auto la = log_trans(), le = log_emit();
  auto alpha = log_init();
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (t > 0) alpha = transition(alpha, la, d);
    for (std::size_t j = 0; j < d; ++j) alpha[j] += le[j * v + x[t]];
    normalize_log(alpha);
  }
  return alpha;
}

std::vector<double> Hmm::predictive(std::span<const std::uint32_t> prefix) const {
  if (prefix.empty()) return log_init();
  auto p = transition(forward_filter(prefix), log_trans(), cfg_.states);
  normalize_log(p);
  return p;
}

std::vector<double> Hmm::next_token(std::span<const std::uint32_t> prefix) const {
  const auto pred = predictive(prefix);
  const auto le = log_emit();
  const std::size_t d = cfg_.states, v = cfg_.vocab;
  std::vector<double> p(v, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    const double w = std::exp(pred[j]);
    for (std::size_t k = 0; k < v; ++k) p[k] += w * std::exp(le[j * v + k]);
  }
  return p;
}

double Hmm::log_prob(std::span<const std::uint32_t> x) const {
  check_tokens(x, cfg_.vocab);
  const std::size_t d = cfg_.states, v = cfg_.vocab;
  const auto la = log_trans(), le = log_emit();
  auto alpha = log_init();
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (t > 0) alpha = transition(alpha, la, d);
    for (std::size_t j = 0; j < d; ++j) alpha[j] += le[j * v + x[t]];
  }
  return logsumexp(alpha);
}

Circuit Hmm::as_circuit(std::size_t n) const {
  if (n < 1) throw std::invalid_argument("as_circuit: need N >= 1");
  const std::size_t d = cfg_.states, v = cfg_.vocab;
  const auto li = log_init(), la = log_trans(), le = log_emit();
  Circuit c(std::vector<std::size_t>(n, v));
  std::vector<std::size_t> next_sum;  // S_{t+1}(j)
  std::vector<std::size_t> prod(d);
  for (std::size_t t = n; t-- > 0;) {
    for (std::size_t j = 0; j < d; ++j) {
      const auto e = c.add_input(t, std::vector<double>(le.begin() + j * v, le.begin() + (j + 1) * v));
      prod[j] = t + 1 < n ? c.add_product({e, next_sum[j]}) : e;
    }
    if (t == 0) break;
    std::vector<std::size_t> sums(d);
    for (std::size_t j = 0; j < d; ++j) {
      sums[j] = c.add_sum(prod, std::vector<double>(la.begin() + j * d, la.begin() + (j + 1) * d));
    }
    next_sum = std::move(sums);
  }
  c.set_root(c.add_sum(prod, li));
  return c;
}

Hmm::TapeForward Hmm::tape_forward(Tape& tape, const SequenceBatch& data,
                                   std::span<const std::size_t> rows, std::size_t steps) {
  const std::size_t d = cfg_.states, b = rows.size();
  if (data.vocab != cfg_.vocab) throw std::invalid_argument("data vocabulary does not match the HMM");
  if (steps > data.n) throw std::invalid_argument("tape_forward: too many steps");
  auto li = diff::log_softmax(tape.param(init_));
  auto la_t = diff::reshape(diff::transpose_last2(diff::log_softmax(tape.param(trans_))), {1, d, d});
  auto le_t = diff::transpose_last2(diff::log_softmax(tape.param(emit_)));  // (V, d)
  TapeForward out;
  std::vector<Tensor> prefix = {tape.constant({b}, 0.0)};
  Tensor pred = diff::add(tape.constant({b, d}, 0.0), li);
  std::vector<std::uint32_t> ids(b);
  for (std::size_t t = 0; t < steps; ++t) {
    out.predictive.push_back(pred);
    for (std::size_t i = 0; i < b; ++i) ids[i] = data.row(rows[i])[t];
    auto alpha = diff::add(pred, diff::embedding(le_t, ids, {b}));
    prefix.push_back(diff::logsumexp(alpha, 1));
    if (t + 1 < steps) {
      pred = diff::reshape(diff::log_matmul(diff::reshape(alpha, {b, 1, d}), la_t), {b, d});
    }
  }
  if (steps == data.n) out.prefix_logp = diff::stack_last(prefix);
  return out;
}

LossTerms Hmm::loss(Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows, bool,
                    std::mt19937_64&) {
  auto fw = tape_forward(tape, data, rows, data.n);
  return prefix_marginal_loss(tape, fw.prefix_logp, data, rows);
}

nlohmann::json Hmm::to_json() const {
  nlohmann::json j;
  j["family"] = family();
  j["states"] = cfg_.states;
  j["vocab"] = cfg_.vocab;
  j["init_scale"] = cfg_.init_scale;
  j["seed"] = cfg_.seed;
  j["params"] = params_to_json({&init_, &trans_, &emit_});
  return j;
}

std::unique_ptr<Hmm> Hmm::from_json(const nlohmann::json& j) {
  HmmConfig cfg;
  cfg.states = j.at("states");
  cfg.vocab = j.at("vocab");
  cfg.init_scale = j.value("init_scale", 0.5);
  cfg.seed = j.value("seed", std::uint64_t{0});
  auto m = std::make_unique<Hmm>(cfg);
  params_from_json(j.at("params"), m->parameters());
  return m;
}

LogitHmm::LogitHmm(HmmConfig cfg) : hmm_(cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t d = cfg.states, v = cfg.vocab;
  head_ = Parameter("head", {v, d}, gaussian_values(v * d, cfg.init_scale, rng));
  bias_ = Parameter("bias", {v}, std::vector<double>(v, 0.0));
}

std::vector<Parameter*> LogitHmm::parameters() {
  auto ps = hmm_.parameters();
  ps.push_back(&head_);
  ps.push_back(&bias_);
  return ps;
}

std::vector<double> LogitHmm::next_token(std::span<const std::uint32_t> prefix) const {
  const auto e = hmm_.predictive(prefix);
  const std::size_t d = hmm_.states(), v = hmm_.vocab();
  std::vector<double> logits(v);
  for (std::size_t k = 0; k < v; ++k) {
    double s = bias_.value()[k];
    for (std::size_t j = 0; j < d; ++j) s += head_.value()[k * d + j] * e[j];
    logits[k] = s;
  }
  const double z = logsumexp(logits);
  for (auto& x : logits) x = std::exp(x - z);
  return logits;
}

LossTerms LogitHmm::loss(Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                         bool, std::mt19937_64&) {
  const std::size_t b = rows.size();
  // Only run the recursion as far as the last position that carries loss.
  std::size_t steps = 0;
  for (auto r : rows) {
    auto m = data.mask_row(r);
    for (std::size_t t = 0; t < data.n; ++t) {
      if (m[t]) steps = std::max(steps, t + 1);
    }
  }
  auto fw = hmm_.tape_forward(tape, data, rows, steps);
  auto w_t = diff::transpose_last2(tape.param(head_));  // (d, V)
  auto bias = tape.param(bias_);
  Tensor total;
  double count = 0.0;
  std::vector<std::uint32_t> tgt(b);
  std::vector<std::uint8_t> m(b);
  for (std::size_t t = 0; t < steps; ++t) {
    std::size_t active = 0;
    for (std::size_t i = 0; i < b; ++i) {
      tgt[i] = data.row(rows[i])[t];
      m[i] = data.mask_row(rows[i])[t];
      active += m[i];
    }
    if (!active) continue;
    const auto& pred = fw.predictive[t];
    auto feat = diff::sub(pred, diff::reshape(diff::logsumexp(pred, 1), {b, 1}));
    auto logits = diff::add(diff::matmul(feat, w_t), bias);
    auto term = diff::scale(diff::cross_entropy(logits, tgt, m), static_cast<double>(active));
    total = total.valid() ? diff::add(total, term) : term;
    count += static_cast<double>(active);
  }
  if (!total.valid()) throw std::invalid_argument("loss: no masked positions in batch");
  return {total, count};
}

nlohmann::json LogitHmm::to_json() const {
  auto j = hmm_.to_json();
  j["family"] = family();
  j["params"]["head"] = head_.value();
  j["params"]["bias"] = bias_.value();
  return j;
}

std::unique_ptr<LogitHmm> LogitHmm::from_json(const nlohmann::json& j) {
  HmmConfig cfg;
  cfg.states = j.at("states");
  cfg.vocab = j.at("vocab");
  cfg.init_scale = j.value("init_scale", 0.5);
  cfg.seed = j.value("seed", std::uint64_t{0});
  auto m = std::make_unique<LogitHmm>(cfg);
  params_from_json(j.at("params"), m->parameters());
  return m;
}

Family parse_family(const std::string& s) {
  if (s == "hmm") return Family::kHmm;
  if (s == "logit-hmm") return Family::kLogitHmm;
  if (s == "transformer") return Family::kTransformer;
  if (s == "prob-transformer") return Family::kProbTransformer;
  throw std::invalid_argument("unknown model family '" + s + "'");
}

std::string family_name(Family f) {
  switch (f) {
    case Family::kHmm: return "hmm";
    case Family::kLogitHmm: return "logit-hmm";
    case Family::kTransformer: return "transformer";
    case Family::kProbTransformer: return "prob-transformer";
  }
  return "?";
}

std::size_t param_count(Family f, std::size_t d, std::size_t vocab, std::size_t layers,
                        std::size_t context) {
  if (d < 1 || vocab < 1) throw std::invalid_argument("param_count: d and V must be positive");
  switch (f) {
    case Family::kHmm: return d * d + vocab * d + d;
    case Family::kLogitHmm: return d * d + 2 * vocab * d + vocab + d;
    case Family::kTransformer:
    case Family::kProbTransformer:
      // embeddings + positions + blocks (attention 4d^2+4d, MLP 8d^2+5d, two
      // layer norms 4d) + final norm + output map
      return (vocab + 1) * d + context * d + layers * (12 * d * d + 13 * d) + 2 * d + d * vocab;
  }
  throw std::invalid_argument("param_count: unknown family");
}

}  // namespace pclab
