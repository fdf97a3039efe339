#pragma once

// Vtrees over sequence positions and the leaf permutations used to lay a
// balanced tree over a sequence.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pclab {

// Set of variable (position) indices; bit i set <=> position i in the set.
using VarSet = std::uint64_t;
constexpr std::size_t kMaxVars = 64;

inline VarSet singleton(std::size_t v) { return VarSet{1} << v; }
inline VarSet full_set(std::size_t n) { return n >= 64 ? ~VarSet{0} : (VarSet{1} << n) - 1; }
int popcount(VarSet s);
std::vector<std::size_t> members(VarSet s);
std::string set_string(VarSet s);  // "{0,3,5}"

using Perm = std::vector<std::size_t>;

Perm standard_perm(std::size_t n);
// pi(2k) = r_k, pi(2k+1) = H + r_k with r the bit reversal of 0..H-1.
Perm shifted_induction_perm(std::size_t n);
Perm inverse_perm(const Perm& p);
bool is_permutation(const Perm& p);
bool is_power_of_two(std::size_t n);
std::size_t log2_exact(std::size_t n);  // throws unless n is a power of two

// mask[p] == 1 iff tree leaf p carries an original position >= t.
std::vector<std::uint8_t> future_mask(const Perm& pi, std::size_t t);

struct VtreeNode {
  VarSet scope = 0;
  int left = -1;
  int right = -1;
  int var = -1;  // leaves only
  int parent = -1;
  bool leaf() const { return left < 0; }
};

class Vtree {
 public:
  Vtree() = default;
  // Nodes may be in any order; structure is validated.
  Vtree(std::vector<VtreeNode> nodes, int root);

  // Balanced tree whose leaf i (left to right) carries position pi[i].
  static Vtree balanced(const Perm& pi);
  // Parses "((0 1) (2 3))"; a bare integer is a single-leaf tree.
  static Vtree parse(const std::string& text);

  std::string to_string() const;
  std::string to_string(int node) const;

  std::size_t num_vars() const { return num_vars_; }
  std::size_t size() const { return nodes_.size(); }
  int root() const { return root_; }
  const VtreeNode& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  const std::vector<VtreeNode>& nodes() const { return nodes_; }
  int leaf_of(std::size_t var) const { return leaf_of_[var]; }
  // Leaves in left-to-right order, as original positions.
  Perm leaf_order() const;

  // Node whose scope equals s, if any.
  std::optional<int> find(VarSet s) const;
  // Split (left scope, right scope) of the node with scope s, if s is internal.
  std::optional<std::pair<VarSet, VarSet>> split_of(VarSet s) const;

  bool operator==(const Vtree& other) const { return to_string() == other.to_string(); }

 private:
  std::vector<VtreeNode> nodes_;
  std::vector<int> leaf_of_;
  int root_ = -1;
  std::size_t num_vars_ = 0;
};

// Every leaf-labelled full binary tree over n variables (children unordered):
// (2n-3)!! trees.
std::vector<Vtree> enumerate_vtrees(std::size_t n);

}  // namespace pclab
