#include "pclab/balanced_pc.hpp"

#include <cmath>
#include <stdexcept>

#include "pclab/diff/ops.hpp"

namespace pclab {

using diff::Parameter;
using diff::Shape;
using diff::Tape;
using diff::Tensor;

std::vector<double> log_softmax_rows(const std::vector<double>& v, std::size_t len) {
  if (len == 0 || v.size() % len) throw std::invalid_argument("log_softmax_rows: bad row length");
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < v.size() / len; ++r) {
    std::span<const double> row(v.data() + r * len, len);
    const double z = logsumexp(row);
    for (std::size_t k = 0; k < len; ++k) out[r * len + k] = row[k] - z;
  }
  return out;
}

BalancedPc::BalancedPc(BalancedPcConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.perm.empty()) cfg_.perm = standard_perm(cfg_.n);
  if (cfg_.perm.size() != cfg_.n) throw std::invalid_argument("permutation length != N");
  if (cfg_.vocab < 2) throw std::invalid_argument("balanced PC needs V >= 2");
  if (cfg_.channels < 1) throw std::invalid_argument("balanced PC needs C >= 1");
  vtree_ = Vtree::balanced(cfg_.perm);  // validates N and the permutation
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t n = cfg_.n, c = cfg_.channels, v = cfg_.vocab;
  leaf_ = Parameter("leaf", {n, c, v}, gaussian_values(n * c * v, cfg_.init_scale, rng));
  for (std::size_t g = n, s = 0; g >= 2; g /= 2, ++s) {
    stages_.emplace_back("stage" + std::to_string(s), Shape{g, c, c},
                         gaussian_values(g * c * c, cfg_.init_scale, rng));
  }
  root_ = Parameter("root", {c}, gaussian_values(c, cfg_.init_scale, rng));
}

std::vector<Parameter*> BalancedPc::parameters() {
  std::vector<Parameter*> ps = {&leaf_};
  for (auto& s : stages_) ps.push_back(&s);
  ps.push_back(&root_);
  return ps;
}

void BalancedPc::set_frozen(bool frozen) {
  for (auto* p : parameters()) p->requires_grad = !frozen;
}

Tensor BalancedPc::prefix_log_marginals(Tape& tape, const SequenceBatch& data,
                                        std::span<const std::size_t> rows) {
  const std::size_t n = cfg_.n, c = cfg_.channels, b = rows.size(), s = n + 1;
  if (data.n != n || data.vocab != cfg_.vocab) {
    throw std::invalid_argument("data shape does not match the circuit (N=" + std::to_string(n) +
                                ", V=" + std::to_string(cfg_.vocab) + ")");
  }
  std::vector<std::uint32_t> ids(b * n);
  for (std::size_t i = 0; i < b; ++i) {
    auto x = data.row(rows[i]);
    for (std::size_t p = 0; p < n; ++p) ids[i * n + p] = x[cfg_.perm[p]];
  }
  // Leaf-level sums see the token once per sequence; a marginalized leaf
  // (normalized leaves under normalized weights) contributes log 1 = 0.
  auto leaf_logp = diff::gather_table(diff::log_softmax(tape.param(leaf_)), ids, b);
  auto x = diff::log_matmul(leaf_logp, diff::log_softmax(tape.param(stages_[0])));
  std::vector<double> keep(s * n);
  for (std::size_t step = 0; step < s; ++step)
    for (std::size_t p = 0; p < n; ++p) keep[step * n + p] = cfg_.perm[p] < step ? 1.0 : 0.0;
  x = diff::mul(diff::reshape(x, {b, 1, n, c}), tape.constant({1, s, n, 1}, std::move(keep)));
  std::size_t groups = n;
  for (std::size_t st = 0;; ++st) {
    if (st > 0) x = diff::log_matmul(x, diff::log_softmax(tape.param(stages_[st])));
    groups /= 2;
    x = diff::sum(diff::reshape(x, {b * s, groups, 2, c}), 2);
    if (groups == 1) break;
  }
  auto root = diff::reshape(diff::log_softmax(tape.param(root_)), {1, 1, c});
  return diff::reshape(diff::log_matmul(x, root), {b, s});
}

LossTerms BalancedPc::loss(Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                           bool, std::mt19937_64&) {
  return prefix_marginal_loss(tape, prefix_log_marginals(tape, data, rows), data, rows);
}

Circuit BalancedPc::compile() const {
  const std::size_t n = cfg_.n, c = cfg_.channels, v = cfg_.vocab;
  Circuit out(std::vector<std::size_t>(n, v));
  const auto leaf = log_softmax_rows(leaf_.value(), v);
  // cur[g * c + k]: node for group g, channel k at the current level.
  std::vector<std::size_t> cur(n * c);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < c; ++k)
      cur[p * c + k] = out.add_input(cfg_.perm[p],
                                     std::vector<double>(leaf.begin() + (p * c + k) * v,
                                                         leaf.begin() + (p * c + k + 1) * v));
  std::size_t groups = n;
  for (std::size_t st = 0; groups >= 2; ++st) {
    if (c > 1) {
      const auto w = log_softmax_rows(stages_[st].value(), c);
      std::vector<std::size_t> summed(groups * c);
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t k = 0; k < c; ++k) {
          std::vector<std::size_t> ch(cur.begin() + g * c, cur.begin() + (g + 1) * c);
          summed[g * c + k] = out.add_sum(std::move(ch), std::vector<double>(w.begin() + (g * c + k) * c,
                                                                            w.begin() + (g * c + k + 1) * c));
        }
      cur = std::move(summed);
    }
    groups /= 2;
    std::vector<std::size_t> prod(groups * c);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t k = 0; k < c; ++k)
        prod[g * c + k] = out.add_product({cur[(2 * g) * c + k], cur[(2 * g + 1) * c + k]});
    cur = std::move(prod);
  }
  out.set_root(out.add_sum(cur, log_softmax_rows(root_.value(), c)));
  out.set_vtree(vtree_);
  return out;
}

nlohmann::json BalancedPc::to_json() const {
  nlohmann::json j;
  j["family"] = family();
  j["n"] = cfg_.n;
  j["vocab"] = cfg_.vocab;
  j["channels"] = cfg_.channels;
  j["perm"] = cfg_.perm;
  j["init_scale"] = cfg_.init_scale;
  j["seed"] = cfg_.seed;
  std::vector<const Parameter*> ps = {&leaf_};
  for (const auto& s : stages_) ps.push_back(&s);
  ps.push_back(&root_);
  j["params"] = params_to_json(ps);
  return j;
}

std::unique_ptr<BalancedPc> BalancedPc::from_json(const nlohmann::json& j) {
  BalancedPcConfig cfg;
  cfg.n = j.at("n");
  cfg.vocab = j.at("vocab");
  cfg.channels = j.at("channels");
  cfg.perm = j.at("perm").get<Perm>();
  cfg.init_scale = j.value("init_scale", 0.1);
  cfg.seed = j.value("seed", std::uint64_t{0});
  auto m = std::make_unique<BalancedPc>(cfg);
  params_from_json(j.at("params"), m->parameters());
  return m;
}

PcMixture::PcMixture(std::vector<std::unique_ptr<BalancedPc>> components, std::vector<double> root_logits)
    : comps_(std::move(components)) {
  if (comps_.empty()) throw std::invalid_argument("mixture needs at least one component");
  for (const auto& c : comps_) {
    if (c->config().n != comps_[0]->config().n || c->config().vocab != comps_[0]->config().vocab) {
      throw std::invalid_argument("mixture components differ in N or V");
    }
  }
  if (root_logits.empty()) root_logits.assign(comps_.size(), 0.0);
  root_ = Parameter("mix_root", {comps_.size()}, std::move(root_logits));
}

std::vector<Parameter*> PcMixture::parameters() {
  std::vector<Parameter*> ps = {&root_};
  for (std::size_t i = 0; i < comps_.size(); ++i) {
    for (auto* p : comps_[i]->parameters()) ps.push_back(p);
  }
  return ps;
}

void PcMixture::freeze_components(bool frozen) {
  for (auto& c : comps_) c->set_frozen(frozen);
}

LossTerms PcMixture::loss(Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                          bool, std::mt19937_64&) {
  std::vector<Tensor> parts;
  for (auto& c : comps_) parts.push_back(c->prefix_log_marginals(tape, data, rows));
  auto stacked = diff::stack_last(parts);  // (B, N+1, K)
  auto joint = diff::logsumexp(diff::add(stacked, diff::log_softmax(tape.param(root_))), 2);
  return prefix_marginal_loss(tape, joint, data, rows);
}

Circuit PcMixture::compile() const {
  std::vector<Circuit> circuits;
  for (const auto& c : comps_) circuits.push_back(c->compile());
  std::vector<const Circuit*> ptrs;
  for (const auto& c : circuits) ptrs.push_back(&c);
  return mix(ptrs, log_softmax_rows(root_.value(), comps_.size()));
}

nlohmann::json PcMixture::to_json() const {
  nlohmann::json j;
  j["family"] = family();
  j["root"] = root_.value();
  j["components"] = nlohmann::json::array();
  for (const auto& c : comps_) j["components"].push_back(c->to_json());
  return j;
}

std::unique_ptr<PcMixture> PcMixture::from_json(const nlohmann::json& j) {
  std::vector<std::unique_ptr<BalancedPc>> comps;
  for (const auto& c : j.at("components")) comps.push_back(BalancedPc::from_json(c));
  return std::make_unique<PcMixture>(std::move(comps), j.at("root").get<std::vector<double>>());
}

}  // namespace pclab
