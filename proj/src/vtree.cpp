#include "pclab/vtree.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace pclab {

int popcount(VarSet s) { return std::popcount(s); }

std::vector<std::size_t> members(VarSet s) {
  std::vector<std::size_t> out;
  while (s) {
    out.push_back(static_cast<std::size_t>(std::countr_zero(s)));
    s &= s - 1;
  }
  return out;
}

std::string set_string(VarSet s) {
  std::ostringstream os;
  os << '{';
  bool first = true;
  for (auto v : members(s)) {
    if (!first) os << ',';
    os << v;
    first = false;
  }
  os << '}';
  return os.str();
}

bool is_power_of_two(std::size_t n) { return n >= 1 && (n & (n - 1)) == 0; }

std::size_t log2_exact(std::size_t n) {
  if (!is_power_of_two(n)) throw std::invalid_argument(std::to_string(n) + " is not a power of two");
  return static_cast<std::size_t>(std::countr_zero(n));
}

Perm standard_perm(std::size_t n) {
  if (n < 2) throw std::invalid_argument("standard_perm: need n >= 2");
  Perm p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

Perm shifted_induction_perm(std::size_t n) {
  if (n < 4 || !is_power_of_two(n)) {
    throw std::invalid_argument("shifted_induction_perm: n must be a power of two >= 4");
  }
  const std::size_t half = n / 2;
  const std::size_t bits = log2_exact(n) - 1;
  Perm p(n);
  for (std::size_t k = 0; k < half; ++k) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b) {
      if (k & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
    }
    p[2 * k] = r;
    p[2 * k + 1] = half + r;
  }
  return p;
}

bool is_permutation(const Perm& p) {
  std::vector<bool> seen(p.size(), false);
  for (auto v : p) {
    if (v >= p.size() || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

Perm inverse_perm(const Perm& p) {
  if (!is_permutation(p)) throw std::invalid_argument("inverse_perm: not a permutation");
  Perm inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

std::vector<std::uint8_t> future_mask(const Perm& pi, std::size_t t) {
  if (!is_permutation(pi)) throw std::invalid_argument("future_mask: not a permutation");
  if (t > pi.size()) throw std::out_of_range("future_mask: step " + std::to_string(t) + " > N");
  std::vector<std::uint8_t> m(pi.size());
  for (std::size_t p = 0; p < pi.size(); ++p) m[p] = pi[p] >= t;
  return m;
}

Vtree::Vtree(std::vector<VtreeNode> nodes, int root) : nodes_(std::move(nodes)), root_(root) {
  if (root_ < 0 || static_cast<std::size_t>(root_) >= nodes_.size()) {
    throw std::invalid_argument("vtree: bad root index");
  }
  // Recompute scopes and parents from the child links; reject sharing/cycles.
  std::vector<int> visits(nodes_.size(), 0);
  std::function<VarSet(int, int)> walk = [&](int i, int parent) -> VarSet {
    if (i < 0 || static_cast<std::size_t>(i) >= nodes_.size()) {
      throw std::invalid_argument("vtree: child index out of range");
    }
    if (visits[i]++) throw std::invalid_argument("vtree: node reached twice");
    auto& n = nodes_[i];
    n.parent = parent;
    if (n.left < 0 && n.right < 0) {
      if (n.var < 0 || static_cast<std::size_t>(n.var) >= kMaxVars) {
        throw std::invalid_argument("vtree: leaf without a valid variable");
      }
      n.scope = singleton(static_cast<std::size_t>(n.var));
      return n.scope;
    }
    if (n.left < 0 || n.right < 0) throw std::invalid_argument("vtree: internal node needs two children");
    const VarSet l = walk(n.left, i), r = walk(n.right, i);
    if (l & r) throw std::invalid_argument("vtree: overlapping child scopes");
    n.var = -1;
    n.scope = l | r;
    return n.scope;
  };
  const VarSet all = walk(root_, -1);
  for (auto v : visits) {
    if (!v) throw std::invalid_argument("vtree: unreachable node");
  }
  num_vars_ = static_cast<std::size_t>(popcount(all));
  if (all != full_set(num_vars_)) {
    throw std::invalid_argument("vtree: leaves must cover positions 0..n-1, got " + set_string(all));
  }
  leaf_of_.assign(num_vars_, -1);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].leaf()) leaf_of_[static_cast<std::size_t>(nodes_[i].var)] = static_cast<int>(i);
  }
}

Vtree Vtree::balanced(const Perm& pi) {
  const std::size_t n = pi.size();
  if (n < 2 || !is_power_of_two(n)) throw std::invalid_argument("balanced vtree: N must be a power of two >= 2");
  if (!is_permutation(pi)) throw std::invalid_argument("balanced vtree: invalid permutation");
  if (n > kMaxVars) throw std::invalid_argument("balanced vtree: at most 64 positions");
  std::vector<VtreeNode> nodes;
  std::vector<int> level;
  for (std::size_t i = 0; i < n; ++i) {
    VtreeNode leaf;
    leaf.var = static_cast<int>(pi[i]);
    level.push_back(static_cast<int>(nodes.size()));
    nodes.push_back(leaf);
  }
  while (level.size() > 1) {
    std::vector<int> next;
    for (std::size_t i = 0; i < level.size(); i += 2) {
      VtreeNode in;
      in.left = level[i];
      in.right = level[i + 1];
      next.push_back(static_cast<int>(nodes.size()));
      nodes.push_back(in);
    }
    level = std::move(next);
  }
  return Vtree(std::move(nodes), level[0]);
}

Vtree Vtree::parse(const std::string& text) {
  std::vector<VtreeNode> nodes;
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  };
  std::function<int()> node = [&]() -> int {
    skip();
    if (pos >= text.size()) throw std::invalid_argument("vtree parse: unexpected end");
    if (text[pos] == '(') {
      ++pos;
      VtreeNode in;
      in.left = node();
      in.right = node();
      skip();
      if (pos >= text.size() || text[pos] != ')') throw std::invalid_argument("vtree parse: expected ')'");
      ++pos;
      nodes.push_back(in);
      return static_cast<int>(nodes.size() - 1);
    }
    if (!std::isdigit(static_cast<unsigned char>(text[pos]))) {
      throw std::invalid_argument("vtree parse: unexpected '" + std::string(1, text[pos]) + "'");
    }
    std::size_t end = pos;
    while (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) ++end;
    VtreeNode leaf;
    leaf.var = std::stoi(text.substr(pos, end - pos));
    pos = end;
    nodes.push_back(leaf);
    return static_cast<int>(nodes.size() - 1);
  };
  const int root = node();
  skip();
  if (pos != text.size()) throw std::invalid_argument("vtree parse: trailing characters");
  return Vtree(std::move(nodes), root);
}

std::string Vtree::to_string(int i) const {
  const auto& n = node(i);
  if (n.leaf()) return std::to_string(n.var);
  return "(" + to_string(n.left) + " " + to_string(n.right) + ")";
}

std::string Vtree::to_string() const { return root_ < 0 ? "" : to_string(root_); }

Perm Vtree::leaf_order() const {
  Perm out;
  std::function<void(int)> walk = [&](int i) {
    const auto& n = node(i);
    if (n.leaf()) {
      out.push_back(static_cast<std::size_t>(n.var));
      return;
    }
    walk(n.left);
    walk(n.right);
  };
  walk(root_);
  return out;
}

std::optional<int> Vtree::find(VarSet s) const {
  if (s == 0) return std::nullopt;
  // Descend from the root: only one child can contain s.
  int i = root_;
  while (true) {
    const auto& n = node(i);
    if (n.scope == s) return i;
    if ((n.scope & s) != s || n.leaf()) return std::nullopt;
    if ((node(n.left).scope & s) == s) {
      i = n.left;
    } else if ((node(n.right).scope & s) == s) {
      i = n.right;
    } else {
      return std::nullopt;
    }
  }
}

std::optional<std::pair<VarSet, VarSet>> Vtree::split_of(VarSet s) const {
  auto i = find(s);
  if (!i || node(*i).leaf()) return std::nullopt;
  return std::make_pair(node(node(*i).left).scope, node(node(*i).right).scope);
}

namespace {

struct RawTree {
  std::vector<VtreeNode> nodes;  // only left/right/var are meaningful
  int root = 0;
};

}  // namespace

std::vector<Vtree> enumerate_vtrees(std::size_t n) {
  if (n < 2) throw std::invalid_argument("enumerate_vtrees: need n >= 2");
  if (n > 7) throw std::invalid_argument("enumerate_vtrees: n > 7 would enumerate too many trees");
  // Grow trees by inserting leaf k above every existing node (every edge plus
  // the root). Each unordered tree arises exactly once.
  RawTree base;
  base.nodes.resize(3);
  base.nodes[0].var = 0;
  base.nodes[1].var = 1;
  base.nodes[2].left = 0;
  base.nodes[2].right = 1;
  base.root = 2;
  std::vector<RawTree> trees = {base};
  for (std::size_t k = 2; k < n; ++k) {
    std::vector<RawTree> grown;
    for (const auto& t : trees) {
      for (std::size_t at = 0; at < t.nodes.size(); ++at) {
        RawTree g = t;
        VtreeNode leaf;
        leaf.var = static_cast<int>(k);
        g.nodes.push_back(leaf);
        const int leaf_id = static_cast<int>(g.nodes.size() - 1);
        VtreeNode join;
        join.left = static_cast<int>(at);
        join.right = leaf_id;
        g.nodes.push_back(join);
        const int join_id = static_cast<int>(g.nodes.size() - 1);
        if (g.root == static_cast<int>(at)) {
          g.root = join_id;
        } else {
          for (auto& nd : g.nodes) {
            if (&nd == &g.nodes[join_id]) continue;
            if (nd.left == static_cast<int>(at)) nd.left = join_id;
            else if (nd.right == static_cast<int>(at)) nd.right = join_id;
          }
        }
        grown.push_back(std::move(g));
      }
    }
    trees = std::move(grown);
  }
  std::vector<Vtree> out;
  out.reserve(trees.size());
  for (auto& t : trees) out.emplace_back(std::move(t.nodes), t.root);
  return out;
}

}  // namespace pclab
