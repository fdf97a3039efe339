#include "pclab/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace pclab {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t table_size(const std::vector<std::size_t>& cards) {
  std::size_t n = 1;
  for (auto c : cards) {
    n *= c;
    if (n > kMaxJointEntries) {
      throw std::invalid_argument("joint table would exceed " + std::to_string(kMaxJointEntries) + " entries");
    }
  }
  return n;
}

// Odometer over the listed variables (first listed varies slowest).
bool advance(std::vector<std::uint32_t>& x, const std::vector<std::size_t>& vars,
             const std::vector<std::size_t>& cards) {
  for (std::size_t i = vars.size(); i-- > 0;) {
    auto& v = x[vars[i]];
    if (++v < cards[vars[i]]) return true;
    v = 0;
  }
  return false;
}

std::size_t count_assignments(const std::vector<std::size_t>& vars, const std::vector<std::size_t>& cards) {
  std::size_t n = 1;
  for (auto v : vars) n *= cards[v];
  return n;
}

std::vector<std::pair<std::size_t, double>> injection(const std::vector<std::size_t>& nodes, std::size_t j) {
  std::vector<std::pair<std::size_t, double>> ov;
  for (std::size_t i = 0; i < nodes.size(); ++i) ov.emplace_back(nodes[i], i == j ? 0.0 : kNegInf);
  return ov;
}

std::vector<std::size_t> interface_nodes(const Circuit& c, VarSet scope) {
  std::vector<bool> mark(c.size(), false);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.node(i);
    if (n.scope == scope) continue;
    for (auto ch : n.children) {
      if (c.node(ch).scope == scope) mark[ch] = true;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (mark[i]) out.push_back(i);
  }
  return out;
}

}  // namespace

double JointTable::total() const {
  double s = 0;
  for (double v : values) s += v;
  return s;
}

std::vector<std::uint32_t> JointTable::assignment(std::size_t flat) const {
  std::vector<std::uint32_t> x(cards.size());
  for (std::size_t i = cards.size(); i-- > 0;) {
    x[i] = static_cast<std::uint32_t>(flat % cards[i]);
    flat /= cards[i];
  }
  return x;
}

std::size_t JointTable::flat_index(std::span<const std::uint32_t> x) const {
  std::size_t f = 0;
  for (std::size_t i = 0; i < cards.size(); ++i) f = f * cards[i] + x[i];
  return f;
}

JointTable enumerate_joint(const Circuit& c) {
  JointTable t;
  t.cards = c.cards();
  t.values.resize(table_size(t.cards));
  // Batch the last variable through evaluation lanes.
  const std::size_t last = t.cards.size() - 1;
  const std::size_t lanes = t.cards[last];
  Evidence ev(t.cards.size(), 0);
  std::vector<std::uint32_t> x(t.cards.size(), 0);
  std::vector<std::size_t> outer;
  for (std::size_t v = 0; v < last; ++v) outer.push_back(v);
  const std::size_t root = c.root();
  std::size_t base = 0;
  do {
    for (std::size_t v = 0; v < last; ++v) ev[v] = static_cast<int>(x[v]);
    auto val = c.evaluate(ev, static_cast<int>(last));
    for (std::size_t l = 0; l < lanes; ++l) t.values[base + l] = std::exp(val[root * lanes + l]);
    base += lanes;
  } while (advance(x, outer, t.cards));
  return t;
}

JointTable enumerate_joint(const Hmm& h, std::size_t n) {
  JointTable t;
  t.cards.assign(n, h.vocab());
  t.values.resize(table_size(t.cards));
  for (std::size_t f = 0; f < t.values.size(); ++f) t.values[f] = std::exp(h.log_prob(t.assignment(f)));
  return t;
}

int matrix_rank(const std::vector<double>& m, std::size_t rows, std::size_t cols, double rel_tol) {
  if (m.size() != rows * cols) throw std::invalid_argument("matrix_rank: size mismatch");
  if (rows == 0 || cols == 0) return 0;
  double mx = 0;
  for (double v : m) mx = std::max(mx, std::abs(v));
  if (mx == 0) return 0;
  Eigen::MatrixXd a(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) a(i, j) = m[i * cols + j] / mx;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) r += s(i) > rel_tol * s(0);
  return r;
}

namespace {

// Rows: assignments of A; columns: assignments of B.
std::vector<double> unfold(const JointTable& t, VarSet a, std::size_t& rows, std::size_t& cols) {
  std::vector<std::size_t> av, bv;
  for (std::size_t v = 0; v < t.num_vars(); ++v) (a & singleton(v) ? av : bv).push_back(v);
  rows = count_assignments(av, t.cards);
  cols = count_assignments(bv, t.cards);
  std::vector<double> m(rows * cols);
  std::vector<std::uint32_t> x(t.num_vars(), 0);
  std::size_t r = 0;
  do {
    std::size_t c = 0;
    for (auto v : bv) x[v] = 0;
    do {
      m[r * cols + c++] = t.values[t.flat_index(x)];
    } while (advance(x, bv, t.cards));
    ++r;
  } while (advance(x, av, t.cards));
  return m;
}

}  // namespace

int separation_rank(const JointTable& t, VarSet a) {
  const VarSet all = full_set(t.num_vars());
  if ((a & all) != a || a == 0 || a == all) throw std::invalid_argument("separation_rank: degenerate cut");
  std::size_t rows, cols;
  auto m = unfold(t, a, rows, cols);
  return matrix_rank(m, rows, cols);
}

std::size_t local_state_dim(const Circuit& c, VarSet scope) { return interface_nodes(c, scope).size(); }

FrontierReport frontier_bound(const Circuit& c, VarSet a) {
  if (!c.vtree()) throw std::invalid_argument("frontier_bound: circuit has no vtree");
  const auto& vt = *c.vtree();
  if (!c.compatible_with(vt)) throw std::invalid_argument("frontier_bound: circuit is not structured");
  const VarSet all = full_set(c.num_vars());
  FrontierReport r;
  r.a = a;
  r.b = all & ~a;
  if (r.a == 0 || r.b == 0) throw std::invalid_argument("frontier_bound: degenerate cut");
  // Walk down from the root through mixed nodes; pure children are frontier.
  std::function<void(int)> walk = [&](int i) {
    const auto& n = vt.node(i);
    for (int ch : {n.left, n.right}) {
      const VarSet s = vt.node(ch).scope;
      if ((s & a) == s) {
        r.frontier_a.push_back(ch);
        r.dim_a.push_back(local_state_dim(c, s));
      } else if ((s & r.b) == s) {
        r.frontier_b.push_back(ch);
        r.dim_b.push_back(local_state_dim(c, s));
      } else {
        walk(ch);
      }
    }
  };
  walk(vt.root());
  double pa = 1, pb = 1;
  for (auto d : r.dim_a) pa *= static_cast<double>(d);
  for (auto d : r.dim_b) pb *= static_cast<double>(d);
  r.bound = std::min(pa, pb);
  r.measured_rank = separation_rank(enumerate_joint(c), a);
  return r;
}

TransferReport transfer_rank(const Circuit& c, int vtree_node) {
  if (!c.vtree()) throw std::invalid_argument("transfer_rank: circuit has no vtree");
  const auto& vt = *c.vtree();
  if (vtree_node < 0 || static_cast<std::size_t>(vtree_node) >= vt.size()) {
    throw std::invalid_argument("transfer_rank: bad vtree node");
  }
  if (vtree_node == vt.root()) throw std::invalid_argument("transfer_rank: root has no cut");
  TransferReport r;
  r.node = vtree_node;
  r.a = vt.node(vtree_node).scope;
  const auto iface = interface_nodes(c, r.a);
  r.dim = iface.size();
  const auto& cards = c.cards();
  std::vector<std::size_t> av, bv;
  for (std::size_t v = 0; v < cards.size(); ++v) (r.a & singleton(v) ? av : bv).push_back(v);
  r.rows_a = count_assignments(av, cards);
  r.cols_b = count_assignments(bv, cards);
  if (r.rows_a * r.cols_b > kMaxJointEntries) throw std::invalid_argument("transfer_rank: too many assignments");

  std::vector<std::uint32_t> x(cards.size(), 0);
  r.phi.resize(r.rows_a * r.dim);
  std::size_t row = 0;
  do {
    Evidence ev(cards.size(), kMarginal);
    for (auto v : av) ev[v] = static_cast<int>(x[v]);
    auto val = c.evaluate(ev);
    for (std::size_t j = 0; j < r.dim; ++j) r.phi[row * r.dim + j] = std::exp(val[iface[j]]);
    ++row;
  } while (advance(x, av, cards));

  r.coef.resize(r.dim * r.cols_b);
  std::fill(x.begin(), x.end(), 0);
  std::size_t col = 0;
  do {
    Evidence ev(cards.size(), kMarginal);
    for (auto v : bv) ev[v] = static_cast<int>(x[v]);
    for (std::size_t j = 0; j < r.dim; ++j) {
      r.coef[j * r.cols_b + col] = std::exp(c.evaluate(ev, -1, injection(iface, j))[c.root()]);
    }
    ++col;
  } while (advance(x, bv, cards));

  // Reconstruction check against the joint.
  const auto joint = enumerate_joint(c);
  std::size_t rows, cols;
  const auto m = unfold(joint, r.a, rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < cols; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < r.dim; ++j) s += r.phi[i * r.dim + j] * r.coef[j * cols + k];
      r.reconstruction_error = std::max(r.reconstruction_error, std::abs(s - m[i * cols + k]));
    }
  r.separation = matrix_rank(m, rows, cols);
  r.coef_rank = matrix_rank(r.coef, r.dim, r.cols_b);

  // Effective transfer rank: coefficients seen through the column space of phi.
  Eigen::MatrixXd phi(r.rows_a, r.dim), coef(r.dim, r.cols_b);
  for (std::size_t i = 0; i < r.rows_a; ++i)
    for (std::size_t j = 0; j < r.dim; ++j) phi(i, j) = r.phi[i * r.dim + j];
  for (std::size_t j = 0; j < r.dim; ++j)
    for (std::size_t k = 0; k < r.cols_b; ++k) coef(j, k) = r.coef[j * r.cols_b + k];
  const double pmax = phi.cwiseAbs().maxCoeff();
  if (pmax == 0) {
    r.transfer_rank = 0;
    return r;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(phi / pmax, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  Eigen::Index keep = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) keep += s(i) > 1e-9 * s(0);
  Eigen::MatrixXd reduced = s.head(keep).asDiagonal() * svd.matrixV().leftCols(keep).transpose() * coef;
  std::vector<double> red(static_cast<std::size_t>(reduced.size()));
  for (Eigen::Index i = 0; i < reduced.rows(); ++i)
    for (Eigen::Index k = 0; k < reduced.cols(); ++k)
      red[static_cast<std::size_t>(i * reduced.cols() + k)] = reduced(i, k);
  r.transfer_rank = matrix_rank(red, static_cast<std::size_t>(reduced.rows()),
                                static_cast<std::size_t>(reduced.cols()));
  return r;
}

WitnessReport best_cut_witness(const Circuit& c) {
  const std::size_t n = c.num_vars();
  if (n < 2) throw std::invalid_argument("best_cut_witness: need two variables");
  const auto joint = enumerate_joint(c);
  WitnessReport best;
  best.rank = -1;
  // A always excludes the last variable so each unordered cut is seen once.
  for (VarSet a = 1; a < singleton(n - 1); ++a) {
    const int r = separation_rank(joint, a);
    if (r > best.rank) {
      best.rank = r;
      best.a = a;
    }
  }
  if (c.vtree() && c.compatible_with(*c.vtree())) best.bound = frontier_bound(c, best.a).bound;
  return best;
}

Circuit build_selector(const Circuit& a, const Circuit& b) {
  if (a.cards() != b.cards()) throw std::invalid_argument("build_selector: components differ in variables");
  const VarSet scope = full_set(a.num_vars());
  if (a.node(a.root()).scope != scope || b.node(b.root()).scope != scope) {
    throw std::invalid_argument("build_selector: components must cover every variable");
  }
  auto cards = a.cards();
  const std::size_t s = cards.size();
  cards.push_back(2);
  Circuit out(cards);
  auto copy = [&](const Circuit& c) {
    const std::size_t offset = out.size();
    for (const auto& n : c.nodes()) {
      auto ch = n.children;
      for (auto& x : ch) x += offset;
      switch (n.kind) {
        case NodeKind::kInput:
          if (n.indicator >= 0) out.add_indicator(n.var, static_cast<std::size_t>(n.indicator));
          else out.add_input(n.var, n.log_table);
          break;
        case NodeKind::kSum: out.add_sum(std::move(ch), n.log_weights); break;
        case NodeKind::kProduct: out.add_product(std::move(ch)); break;
      }
    }
    return c.root() + offset;
  };
  const auto ra = copy(a);
  const auto rb = copy(b);
  const auto g1 = out.add_product({out.add_indicator(s, 1), ra});
  const auto g0 = out.add_product({out.add_indicator(s, 0), rb});
  out.set_root(out.add_sum({g1, g0}, {std::log(0.5), std::log(0.5)}));
  return out;
}

std::optional<Vtree> common_vtree(const Circuit& a, const Circuit& b) {
  if (a.num_vars() != b.num_vars()) throw std::invalid_argument("common_vtree: variable counts differ");
  for (auto& v : enumerate_vtrees(a.num_vars())) {
    if (a.compatible_with(v) && b.compatible_with(v)) return v;
  }
  return std::nullopt;
}

void duplicate_channels(BalancedPc& pc, std::size_t level, std::size_t group) {
  if (level >= pc.num_stages()) throw std::invalid_argument("duplicate_channels: level has no sum layer");
  auto& w = pc.stage(level);
  const std::size_t groups = w.shape()[0], c = w.shape()[1];
  if (group >= groups) throw std::invalid_argument("duplicate_channels: group out of range");
  for (std::size_t k = 1; k < c; ++k)
    for (std::size_t j = 0; j < c; ++j) w.value()[(group * c + k) * c + j] = w.value()[(group * c) * c + j];
}

BalancedPc random_pc(std::size_t n, std::size_t vocab, std::size_t channels, bool shifted,
                     std::uint64_t seed) {
  BalancedPcConfig cfg;
  cfg.n = n;
  cfg.vocab = vocab;
  cfg.channels = channels;
  cfg.perm = shifted ? shifted_induction_perm(n) : standard_perm(n);
  cfg.init_scale = 1.0;
  cfg.seed = seed;
  return BalancedPc(cfg);
}

RankSuiteReport run_rank_suite(double scale, std::uint64_t seed) {
  if (!(scale > 0)) throw std::invalid_argument("scale must be positive");
  auto cases = [&](int base) { return std::max(1, static_cast<int>(std::lround(base * scale))); };
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
  };
  RankSuiteReport rep;

  for (int i = 0, total = cases(200); i < total; ++i) {
    const std::size_t n = pick(0, 1) ? 8 : 4;
    const std::size_t v = pick(2, 3), ch = pick(1, 3);
    auto pc = random_pc(n, v, ch, pick(0, 1), rng());
    const auto circuit = pc.compile();
    const VarSet a = 1 + rng() % (full_set(n) - 1);
    try {
      auto fr = frontier_bound(circuit, a);
      rep.frontier_bound_holds.passed += fr.measured_rank <= fr.bound;
      ++rep.frontier_bound_holds.total;
    } catch (const std::invalid_argument&) {
      ++rep.frontier_bound_holds.skipped;
    }
  }

  for (int i = 0, total = cases(50); i < total; ++i) {
    const std::size_t n = pick(0, 1) ? 8 : 4;
    const std::size_t v = n == 8 ? 2 : pick(2, 3), ch = pick(1, 3);
    auto pc = random_pc(n, v, ch, pick(0, 1), rng());
    const auto circuit = pc.compile();
    const auto& vt = *circuit.vtree();
    int node;
    do {
      node = static_cast<int>(rng() % vt.size());
    } while (node == vt.root());
    auto tr = transfer_rank(circuit, node);
    rep.transfer_matches_separation.passed += tr.separation == tr.transfer_rank && tr.reconstruction_error < 1e-8;
    ++rep.transfer_matches_separation.total;
  }

  for (int i = 0, total = cases(50); i < total; ++i) {
    auto pc = random_pc(4, pick(2, 3), 2, pick(0, 1), rng());
    const auto circuit = pc.compile();
    const auto& vt = *circuit.vtree();
    const VarSet a = vt.node(vt.node(vt.root()).left).scope;
    rep.full_rank_attained.passed += separation_rank(enumerate_joint(circuit), a) == 2;
    ++rep.full_rank_attained.total;
  }

  for (int i = 0, total = cases(50); i < total; ++i) {
    auto pc = random_pc(4, pick(2, 3), 2, pick(0, 1), rng());
    // Left child of the root: level 1, group 0.
    duplicate_channels(pc, 1, 0);
    const auto circuit = pc.compile();
    const auto& vt = *circuit.vtree();
    const int left = vt.node(vt.root()).left;
    auto tr = transfer_rank(circuit, left);
    rep.duplication_collapses.passed += tr.separation == 1 && tr.transfer_rank == 1;
    ++rep.duplication_collapses.total;
  }

  auto std_pc = random_pc(4, 2, 2, false, rng());
  auto ind_pc = random_pc(4, 2, 2, true, rng());
  const auto ca = std_pc.compile(), cb = ind_pc.compile();
  const auto sel = build_selector(ca, cb);
  const auto report = sel.validate();
  rep.selector_decomposable = report.decomposable;
  rep.selector_structured = report.structured;
  rep.common_vtree_found = common_vtree(ca, cb).has_value();
  const auto ja = enumerate_joint(ca), jb = enumerate_joint(cb), js = enumerate_joint(sel);
  double err = 0;
  for (int s = 0; s < 2; ++s) {
    const auto& comp = s == 1 ? ja : jb;
    double mass = 0;
    for (std::size_t f = 0; f < comp.values.size(); ++f) mass += js.values[f * 2 + s];
    for (std::size_t f = 0; f < comp.values.size(); ++f) {
      err = std::max(err, std::abs(js.values[f * 2 + s] / mass - comp.values[f] / comp.total()));
    }
  }
  rep.selector_max_err = err;
  return rep;
}

}  // namespace pclab
