#include "pclab/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>

namespace pclab {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

const char* kind_str(NodeKind k) {
  switch (k) {
    case NodeKind::kInput: return "input";
    case NodeKind::kSum: return "sum";
    case NodeKind::kProduct: return "product";
  }
  return "?";
}

}  // namespace

double logsumexp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

Circuit::Circuit(std::vector<std::size_t> cards) : cards_(std::move(cards)) {
  if (cards_.empty() || cards_.size() > kMaxVars) {
    throw std::invalid_argument("circuit needs between 1 and 64 variables");
  }
  for (auto c : cards_) {
    if (c == 0) throw std::invalid_argument("variable cardinality must be positive");
  }
}

void Circuit::check_child(std::size_t c) const {
  if (c >= nodes_.size()) throw std::invalid_argument("child id " + std::to_string(c) + " not yet defined");
}

std::size_t Circuit::add_input(std::size_t var, std::vector<double> log_table) {
  if (var >= cards_.size()) throw std::invalid_argument("input variable out of range");
  if (log_table.size() != cards_[var]) throw std::invalid_argument("input table size != cardinality");
  CircuitNode n;
  n.kind = NodeKind::kInput;
  n.var = var;
  n.scope = singleton(var);
  n.log_table = std::move(log_table);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

std::size_t Circuit::add_indicator(std::size_t var, std::size_t value) {
  if (var >= cards_.size() || value >= cards_[var]) throw std::invalid_argument("indicator out of range");
  CircuitNode n;
  n.kind = NodeKind::kInput;
  n.var = var;
  n.scope = singleton(var);
  n.indicator = static_cast<int>(value);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

std::size_t Circuit::add_sum(std::vector<std::size_t> children, std::vector<double> log_weights) {
  if (children.empty()) throw std::invalid_argument("sum node needs children");
  if (children.size() != log_weights.size()) throw std::invalid_argument("one log-weight per child");
  CircuitNode n;
  n.kind = NodeKind::kSum;
  for (auto c : children) {
    check_child(c);
    n.scope |= nodes_[c].scope;
  }
  n.children = std::move(children);
  n.log_weights = std::move(log_weights);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

std::size_t Circuit::add_product(std::vector<std::size_t> children) {
  if (children.empty()) throw std::invalid_argument("product node needs children");
  CircuitNode n;
  n.kind = NodeKind::kProduct;
  for (auto c : children) {
    check_child(c);
    n.scope |= nodes_[c].scope;
  }
  n.children = std::move(children);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

void Circuit::set_root(std::size_t id) {
  check_child(id);
  root_ = id;
}

std::size_t Circuit::root() const {
  if (!root_) throw std::logic_error("circuit has no root");
  return *root_;
}

std::size_t Circuit::param_count() const {
  std::size_t n = 0;
  for (const auto& nd : nodes_) n += nd.log_weights.size() + nd.log_table.size();
  return n;
}

std::vector<double> Circuit::evaluate(const Evidence& ev, int lane_var,
                                      std::span<const std::pair<std::size_t, double>> overrides) const {
  if (ev.size() != cards_.size()) throw std::invalid_argument("evidence size != variable count");
  for (std::size_t v = 0; v < ev.size(); ++v) {
    if (ev[v] != kMarginal && (ev[v] < 0 || static_cast<std::size_t>(ev[v]) >= cards_[v])) {
      throw std::out_of_range("evidence value out of range for variable " + std::to_string(v));
    }
  }
  const std::size_t lanes = lane_var >= 0 ? cards_.at(static_cast<std::size_t>(lane_var)) : 1;
  std::vector<double> val(nodes_.size() * lanes);
  std::vector<double> over(nodes_.size(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& [id, v] : overrides) over.at(id) = v;
  std::vector<double> scratch;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    double* out = val.data() + i * lanes;
    if (!std::isnan(over[i])) {
      std::fill(out, out + lanes, over[i]);
      continue;
    }
    switch (n.kind) {
      case NodeKind::kInput: {
        auto value_of = [&](int x) {
          if (n.indicator >= 0) {
            if (x == kMarginal) return 0.0;
            return x == n.indicator ? 0.0 : kNegInf;
          }
          if (x == kMarginal) return logsumexp(n.log_table);
          return n.log_table[static_cast<std::size_t>(x)];
        };
        if (static_cast<int>(n.var) == lane_var) {
          for (std::size_t l = 0; l < lanes; ++l) out[l] = value_of(static_cast<int>(l));
        } else {
          std::fill(out, out + lanes, value_of(ev[n.var]));
        }
        break;
      }
      case NodeKind::kProduct: {
        std::fill(out, out + lanes, 0.0);
        for (auto c : n.children) {
          const double* cv = val.data() + c * lanes;
          for (std::size_t l = 0; l < lanes; ++l) out[l] += cv[l];
        }
        break;
      }
      case NodeKind::kSum: {
        scratch.resize(n.children.size());
        for (std::size_t l = 0; l < lanes; ++l) {
          for (std::size_t k = 0; k < n.children.size(); ++k) {
            scratch[k] = n.log_weights[k] + val[n.children[k] * lanes + l];
          }
          out[l] = logsumexp(scratch);
        }
        break;
      }
    }
  }
  return val;
}

double Circuit::log_value(const Evidence& ev) const { return evaluate(ev)[root()]; }

Evidence Circuit::evidence_for(std::span<const std::uint32_t> x) const {
  if (x.size() > cards_.size()) throw std::invalid_argument("more tokens than circuit variables");
  Evidence ev(cards_.size(), kMarginal);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= cards_[i]) throw std::out_of_range("token " + std::to_string(x[i]) + " out of range at position " + std::to_string(i));
    ev[i] = static_cast<int>(x[i]);
  }
  return ev;
}

double Circuit::log_prob(std::span<const std::uint32_t> x) const { return log_value(evidence_for(x)); }

double Circuit::marginal_log_prob(std::span<const std::uint32_t> x,
                                  std::span<const std::uint8_t> marginalized) const {
  auto ev = evidence_for(x);
  if (marginalized.size() != x.size()) throw std::invalid_argument("mask length != sequence length");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (marginalized[i]) ev[i] = kMarginal;
  }
  return log_value(ev);
}

std::vector<double> Circuit::next_token(std::span<const std::uint32_t> prefix) const {
  const std::size_t t = prefix.size();
  if (t >= cards_.size()) throw std::out_of_range("next_token: no variable at step " + std::to_string(t));
  auto ev = evidence_for(prefix);
  const std::size_t lanes = cards_[t];
  auto val = evaluate(ev, static_cast<int>(t));
  std::span<const double> r(val.data() + root() * lanes, lanes);
  const double z = logsumexp(r);
  std::vector<double> p(lanes);
  for (std::size_t v = 0; v < lanes; ++v) p[v] = std::exp(r[v] - z);
  return p;
}

double Circuit::sequence_nll(const SequenceBatch& batch) const {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto x = batch.row(r);
    auto m = batch.mask_row(r);
    for (std::size_t t = 0; t < batch.n; ++t) {
      if (!m[t]) continue;
      total -= log_prob(x.first(t + 1)) - log_prob(x.first(t));
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("sequence_nll: empty loss mask");
  return total / static_cast<double>(count);
}

LatentInterface Circuit::latent_interface(std::span<const std::uint32_t> prefix) const {
  const std::size_t t = prefix.size();
  if (t >= cards_.size()) throw std::out_of_range("latent_interface: invalid step");
  const VarSet target = singleton(t);
  // Interface: nodes with scope {X_t} feeding a node of larger scope (or the root itself).
  std::vector<bool> is_interface(nodes_.size(), false);
  for (const auto& n : nodes_) {
    if (n.scope == target) continue;
    for (auto c : n.children) {
      if (nodes_[c].scope == target) is_interface[c] = true;
    }
  }
  if (nodes_[root()].scope == target) is_interface[root()] = true;
  LatentInterface li;
  li.t = t;
  li.vocab = cards_[t];
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (is_interface[i]) li.nodes.push_back(i);
  }
  li.k = li.nodes.size();
  if (li.k == 0) throw std::logic_error("latent_interface: variable not reachable from the root");

  auto ev = evidence_for(prefix);
  const std::size_t lanes = li.vocab;
  auto val = evaluate(ev, static_cast<int>(t));
  std::vector<double> mass(li.k);
  li.w.assign(lanes * li.k, 0.0);
  for (std::size_t j = 0; j < li.k; ++j) {
    std::span<const double> col(val.data() + li.nodes[j] * lanes, lanes);
    mass[j] = logsumexp(col);
    for (std::size_t v = 0; v < lanes; ++v) li.w[v * li.k + j] = std::exp(col[v] - mass[j]);
  }
  // Coefficients by basis injection: interface node j set to 1, the rest to 0.
  std::vector<double> coef(li.k);
  std::vector<std::pair<std::size_t, double>> ov(li.k);
  for (std::size_t j = 0; j < li.k; ++j) {
    for (std::size_t i = 0; i < li.k; ++i) ov[i] = {li.nodes[i], i == j ? 0.0 : kNegInf};
    coef[j] = evaluate(ev, -1, ov)[root()] + mass[j];
  }
  const double z = logsumexp(coef);
  li.e.resize(li.k);
  for (std::size_t j = 0; j < li.k; ++j) li.e[j] = std::exp(coef[j] - z);
  return li;
}

ValidationReport Circuit::validate() const {
  if (vtree_) return validate(*vtree_);
  ValidationReport r = validate(Vtree());
  return r;
}

ValidationReport Circuit::validate(const Vtree& v) const {
  ValidationReport r;
  for (std::size_t i = 0; i < nodes_.size() && (r.decomposable || r.smooth); ++i) {
    const auto& n = nodes_[i];
    if (n.kind == NodeKind::kProduct && r.decomposable) {
      VarSet seen = 0;
      for (auto c : n.children) {
        if (seen & nodes_[c].scope) {
          r.decomposable = false;
          r.bad_decomposable = static_cast<int>(i);
          break;
        }
        seen |= nodes_[c].scope;
      }
    }
    if (n.kind == NodeKind::kSum && r.smooth) {
      for (auto c : n.children) {
        if (nodes_[c].scope != n.scope) {
          r.smooth = false;
          r.bad_smooth = static_cast<int>(i);
          break;
        }
      }
    }
  }
  if (!r.decomposable) {
    r.structured = false;
    r.bad_structured = r.bad_decomposable;
  } else if (v.size() > 0) {
    int bad = -1;
    r.structured = compatible_with(v, &bad);
    r.bad_structured = bad;
  } else {
    // Without a reference vtree: product scopes and child scopes must form a
    // laminar family, and equal scopes must be split the same way.
    std::map<VarSet, std::size_t> owner;
    std::vector<std::pair<VarSet, std::size_t>> fam;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.kind != NodeKind::kProduct || n.children.size() < 2) continue;
      fam.emplace_back(n.scope, i);
      for (auto c : n.children) fam.emplace_back(nodes_[c].scope, i);
    }
    std::sort(fam.begin(), fam.end());
    fam.erase(std::unique(fam.begin(), fam.end(),
                          [](const auto& a, const auto& b) { return a.first == b.first; }),
              fam.end());
    for (std::size_t a = 0; a < fam.size() && r.structured; ++a) {
      for (std::size_t b = a + 1; b < fam.size(); ++b) {
        const VarSet x = fam[a].first, y = fam[b].first;
        const VarSet both = x & y;
        if (both != 0 && both != x && both != y) {
          r.structured = false;
          r.bad_structured = static_cast<int>(std::max(fam[a].second, fam[b].second));
          r.detail = "scopes " + set_string(x) + " and " + set_string(y) + " cross";
          break;
        }
      }
    }
  }
  if (!r.decomposable) r.detail = "product node " + std::to_string(r.bad_decomposable) + " has overlapping children";
  else if (!r.smooth) r.detail = "sum node " + std::to_string(r.bad_smooth) + " mixes different scopes";
  return r;
}

namespace {

// Children scopes (disjoint, union == scope of vtree node vi) agree with the
// subtree rooted at vi.
bool fits(const Vtree& v, int vi, const std::vector<VarSet>& parts) {
  const auto& node = v.node(vi);
  if (parts.size() == 1) return parts[0] == node.scope;
  if (node.leaf()) return false;
  const VarSet ls = v.node(node.left).scope, rs = v.node(node.right).scope;
  std::vector<VarSet> left, right;
  VarSet lu = 0, ru = 0;
  for (auto p : parts) {
    if ((p & ls) == p) {
      left.push_back(p);
      lu |= p;
    } else if ((p & rs) == p) {
      right.push_back(p);
      ru |= p;
    } else {
      return false;
    }
  }
  if (lu != ls || ru != rs) return false;
  return fits(v, node.left, left) && fits(v, node.right, right);
}

}  // namespace

bool Circuit::compatible_with(const Vtree& v, int* bad_node) const {
  if (v.num_vars() != cards_.size()) return false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.kind != NodeKind::kProduct || n.children.size() < 2) continue;
    auto vi = v.find(n.scope);
    std::vector<VarSet> parts;
    for (auto c : n.children) parts.push_back(nodes_[c].scope);
    if (!vi || !fits(v, *vi, parts)) {
      if (bad_node) *bad_node = static_cast<int>(i);
      return false;
    }
  }
  return true;
}

nlohmann::json Circuit::to_json() const {
  using nlohmann::json;
  json nodes = json::array();
  auto finite = [](const std::vector<double>& v) {
    for (double x : v) {
      if (!std::isfinite(x)) throw std::runtime_error("cannot serialize non-finite parameter");
    }
  };
  for (const auto& n : nodes_) {
    json j;
    j["kind"] = kind_str(n.kind);
    if (n.kind == NodeKind::kInput) {
      j["var"] = n.var;
      if (n.indicator >= 0) {
        j["indicator"] = n.indicator;
      } else {
        finite(n.log_table);
        j["table"] = n.log_table;
      }
    } else {
      j["children"] = n.children;
      if (n.kind == NodeKind::kSum) {
        finite(n.log_weights);
        j["log_weights"] = n.log_weights;
      }
    }
    nodes.push_back(std::move(j));
  }
  json out;
  out["format"] = "pclab-circuit";
  out["version"] = 1;
  out["cards"] = cards_;
  out["root"] = root();
  if (vtree_) out["vtree"] = vtree_->to_string();
  out["nodes"] = std::move(nodes);
  return out;
}

Circuit Circuit::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "pclab-circuit") throw std::invalid_argument("not a circuit document");
  Circuit c(j.at("cards").get<std::vector<std::size_t>>());
  for (const auto& n : j.at("nodes")) {
    const auto kind = n.at("kind").get<std::string>();
    if (kind == "input") {
      if (n.contains("indicator")) {
        c.add_indicator(n.at("var").get<std::size_t>(), n.at("indicator").get<std::size_t>());
      } else {
        c.add_input(n.at("var").get<std::size_t>(), n.at("table").get<std::vector<double>>());
      }
    } else if (kind == "sum") {
      c.add_sum(n.at("children").get<std::vector<std::size_t>>(),
                n.at("log_weights").get<std::vector<double>>());
    } else if (kind == "product") {
      c.add_product(n.at("children").get<std::vector<std::size_t>>());
    } else {
      throw std::invalid_argument("unknown node kind '" + kind + "'");
    }
  }
  c.set_root(j.at("root").get<std::size_t>());
  if (j.contains("vtree")) c.set_vtree(Vtree::parse(j.at("vtree").get<std::string>()));
  return c;
}

Circuit mix(const std::vector<const Circuit*>& components, std::vector<double> log_weights) {
  if (components.empty()) throw std::invalid_argument("mix: no components");
  if (components.size() != log_weights.size()) throw std::invalid_argument("mix: one weight per component");
  const auto& cards = components[0]->cards();
  const VarSet scope = components[0]->node(components[0]->root()).scope;
  Circuit out(cards);
  std::vector<std::size_t> roots;
  for (const auto* comp : components) {
    if (comp->cards() != cards || comp->node(comp->root()).scope != scope) {
      throw std::invalid_argument("mix: components differ in scope or vocabulary");
    }
    const std::size_t offset = out.size();
    for (const auto& n : comp->nodes()) {
      std::vector<std::size_t> ch = n.children;
      for (auto& c : ch) c += offset;
      switch (n.kind) {
        case NodeKind::kInput:
          if (n.indicator >= 0) out.add_indicator(n.var, static_cast<std::size_t>(n.indicator));
          else out.add_input(n.var, n.log_table);
          break;
        case NodeKind::kSum: out.add_sum(std::move(ch), n.log_weights); break;
        case NodeKind::kProduct: out.add_product(std::move(ch)); break;
      }
    }
    roots.push_back(comp->root() + offset);
  }
  out.set_root(out.add_sum(std::move(roots), std::move(log_weights)));
  // Keep the vtree only when every component agrees on it.
  const auto& v0 = components[0]->vtree();
  bool shared = v0.has_value();
  for (const auto* comp : components) shared = shared && comp->vtree() && *comp->vtree() == *v0;
  if (shared) out.set_vtree(*v0);
  return out;
}

}  // namespace pclab
