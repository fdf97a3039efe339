#pragma once

// Separation-rank oracle and the frontier / transfer-rank / selector checks.

#include <optional>
#include <random>

#include "pclab/balanced_pc.hpp"
#include "pclab/circuit.hpp"
#include "pclab/hmm.hpp"

namespace pclab {

// Dense nonnegative table over all assignments; variable 0 varies slowest.
struct JointTable {
  std::vector<std::size_t> cards;
  std::vector<double> values;

  std::size_t num_vars() const { return cards.size(); }
  double total() const;
  std::vector<std::uint32_t> assignment(std::size_t flat) const;
  std::size_t flat_index(std::span<const std::uint32_t> x) const;
};

constexpr std::size_t kMaxJointEntries = 1'000'000;

JointTable enumerate_joint(const Circuit& c);
JointTable enumerate_joint(const Hmm& h, std::size_t n);

// Numerical rank with singular values below rel_tol * sigma_max treated as 0
// (matrix first scaled to unit max entry). Row-major input.
int matrix_rank(const std::vector<double>& m, std::size_t rows, std::size_t cols,
                double rel_tol = 1e-9);

// Rank of the |X_A| x |X_B| unfolding, B the complement of A.
int separation_rank(const JointTable& t, VarSet a);

struct FrontierReport {
  VarSet a = 0, b = 0;
  std::vector<int> frontier_a, frontier_b;  // vtree node ids
  std::vector<std::size_t> dim_a, dim_b;    // d_v per frontier node
  double bound = 0;                         // min of the two products
  int measured_rank = 0;
};

// Interface size of a vtree node: circuit nodes with exactly its scope that
// feed a node of larger scope.
std::size_t local_state_dim(const Circuit& c, VarSet scope);

FrontierReport frontier_bound(const Circuit& c, VarSet a);

struct TransferReport {
  int node = -1;
  VarSet a = 0;
  std::size_t dim = 0;               // d_v
  std::size_t rows_a = 0, cols_b = 0;
  std::vector<double> phi;           // |X_A| x d_v
  std::vector<double> coef;          // d_v x |X_B|
  int coef_rank = 0;                 // rank of the raw coefficient matrix
  int transfer_rank = 0;             // r_v: rank after projecting on span(phi)
  int separation = 0;                // separation rank of the joint at (U_v, rest)
  double reconstruction_error = 0;   // max |phi * coef - joint|
};

TransferReport transfer_rank(const Circuit& c, int vtree_node);

struct WitnessReport {
  VarSet a = 0;
  int rank = 0;
  double bound = 0;
};

// Best cut over all nontrivial (A, B) splits (every A is a union of vtree
// subtree scopes).
WitnessReport best_cut_witness(const Circuit& c);

// Selector circuit over the variables of a and b plus one binary variable s:
// 0.5 * 1[s=1] a(y) + 0.5 * 1[s=0] b(y).
Circuit build_selector(const Circuit& a, const Circuit& b);

std::optional<Vtree> common_vtree(const Circuit& a, const Circuit& b);

// Makes every channel of the interface at vtree node (level, group) of a
// balanced PC a copy of channel 0.
void duplicate_channels(BalancedPc& pc, std::size_t level, std::size_t group);

// Random balanced PC for the sweeps (init scale 1 for generic parameters).
BalancedPc random_pc(std::size_t n, std::size_t vocab, std::size_t channels, bool shifted,
                     std::uint64_t seed);

struct SuiteCount {
  int passed = 0;
  int total = 0;
  int skipped = 0;
};

struct RankSuiteReport {
  SuiteCount frontier_bound_holds;         // rank <= frontier bound
  SuiteCount transfer_matches_separation;  // separation rank == transfer rank
  SuiteCount full_rank_attained;           // rank 2 at the root cut for C = 2
  SuiteCount duplication_collapses;        // forced duplication -> rank 1
  bool selector_decomposable = false;
  bool selector_structured = true;
  bool common_vtree_found = true;
  double selector_max_err = 1.0;
  bool selector_ok() const {
    return selector_decomposable && !selector_structured && !common_vtree_found && selector_max_err < 1e-9;
  }
};

// scale multiplies the number of random cases (1 -> 200/50/50/50).
RankSuiteReport run_rank_suite(double scale, std::uint64_t seed);

}  // namespace pclab
