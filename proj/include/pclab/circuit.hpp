#pragma once

// Generic log-space probabilistic circuits: input (table or indicator), sum
// and product nodes over categorical variables.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pclab/synthdata.hpp"
#include "pclab/vtree.hpp"

namespace pclab {

enum class NodeKind { kInput, kSum, kProduct };

struct CircuitNode {
  NodeKind kind = NodeKind::kInput;
  VarSet scope = 0;
  std::vector<std::size_t> children;
  std::vector<double> log_weights;  // sum nodes, one per child
  std::size_t var = 0;              // input nodes
  std::vector<double> log_table;    // input table over the variable's values
  int indicator = -1;               // >= 0: indicator input 1[var == indicator]
};

// Per-variable evidence; kMarginal means summed out.
using Evidence = std::vector<int>;
constexpr int kMarginal = -1;

struct ValidationReport {
  bool decomposable = true;
  bool smooth = true;
  bool structured = true;
  int bad_decomposable = -1;
  int bad_smooth = -1;
  int bad_structured = -1;
  std::string detail;
  bool ok() const { return decomposable && smooth && structured; }
};

// p(X_t | prefix) = W e with W columns in the simplex (V x k, row-major).
struct LatentInterface {
  std::size_t t = 0;
  std::vector<std::size_t> nodes;  // the k latent states
  std::size_t k = 0;
  std::size_t vocab = 0;
  std::vector<double> w;
  std::vector<double> e;
  double w_at(std::size_t v, std::size_t j) const { return w[v * k + j]; }
};

class Circuit {
 public:
  Circuit() = default;
  // One cardinality per variable.
  explicit Circuit(std::vector<std::size_t> cards);

  std::size_t add_input(std::size_t var, std::vector<double> log_table);
  std::size_t add_indicator(std::size_t var, std::size_t value);
  std::size_t add_sum(std::vector<std::size_t> children, std::vector<double> log_weights);
  std::size_t add_product(std::vector<std::size_t> children);
  void set_root(std::size_t id);

  // A vtree the circuit claims to respect; used by validate().
  void set_vtree(Vtree v) { vtree_ = std::move(v); }
  const std::optional<Vtree>& vtree() const { return vtree_; }

  std::size_t num_vars() const { return cards_.size(); }
  const std::vector<std::size_t>& cards() const { return cards_; }
  std::size_t size() const { return nodes_.size(); }
  const CircuitNode& node(std::size_t i) const { return nodes_[i]; }
  const std::vector<CircuitNode>& nodes() const { return nodes_; }
  std::size_t root() const;
  std::size_t param_count() const;

  // Log value of every node. lane_var >= 0 evaluates card(lane_var) lanes,
  // lane l fixing that variable to l; values are then laid out node-major.
  // override_values (if non-empty) replaces the value of listed nodes.
  std::vector<double> evaluate(const Evidence& ev, int lane_var = -1,
                               std::span<const std::pair<std::size_t, double>> overrides = {}) const;
  double log_value(const Evidence& ev) const;

  // Tokens for variables 0..x.size()-1; any further variables are summed out.
  double log_prob(std::span<const std::uint32_t> x) const;
  double marginal_log_prob(std::span<const std::uint32_t> x,
                           std::span<const std::uint8_t> marginalized) const;
  // p(X_t | x_<t) for t = prefix.size(); later variables summed out.
  std::vector<double> next_token(std::span<const std::uint32_t> prefix) const;
  double sequence_nll(const SequenceBatch& batch) const;

  LatentInterface latent_interface(std::span<const std::uint32_t> prefix) const;

  // Structured is checked against the attached vtree when present, else as
  // "some vtree can exist" (product scope family is laminar).
  ValidationReport validate() const;
  ValidationReport validate(const Vtree& v) const;
  // Every product split agrees with v (splits as unordered scope pairs).
  bool compatible_with(const Vtree& v, int* bad_node = nullptr) const;

  nlohmann::json to_json() const;
  static Circuit from_json(const nlohmann::json& j);

 private:
  void check_child(std::size_t c) const;
  Evidence evidence_for(std::span<const std::uint32_t> x) const;

  std::vector<std::size_t> cards_;
  std::vector<CircuitNode> nodes_;
  std::optional<std::size_t> root_;
  std::optional<Vtree> vtree_;
};

// Root sum over the components (identical variables and cardinalities).
Circuit mix(const std::vector<const Circuit*>& components, std::vector<double> log_weights);

double logsumexp(std::span<const double> v);

}  // namespace pclab
