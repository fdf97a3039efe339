#pragma once

// Balanced-tree structured-decomposable PCs with C channels per node, trained
// through the tape, and late mixtures of them.

#include <memory>

#include "pclab/circuit.hpp"
#include "pclab/model.hpp"
#include "pclab/vtree.hpp"

namespace pclab {

struct BalancedPcConfig {
  std::size_t n = 16;
  std::size_t vocab = 16;
  std::size_t channels = 8;
  Perm perm;  // empty: identity
  double init_scale = 0.1;
  std::uint64_t seed = 0;
};

// Leaf logits (N, C, V) indexed by tree leaf; stage s sum logits (N / 2^s, C, C);
// root logits (C). All mapped through log-softmax.
class BalancedPc : public Model {
 public:
  explicit BalancedPc(BalancedPcConfig cfg);

  std::string family() const override { return "pc"; }
  std::vector<diff::Parameter*> parameters() override;
  LossTerms loss(diff::Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                 bool training, std::mt19937_64& rng) override;
  nlohmann::json to_json() const override;
  static std::unique_ptr<BalancedPc> from_json(const nlohmann::json& j);

  // (B, N+1) with entry s = log p(x_<s) (later positions marginalized).
  diff::Tensor prefix_log_marginals(diff::Tape& tape, const SequenceBatch& data,
                                    std::span<const std::size_t> rows);

  Circuit compile() const;
  const BalancedPcConfig& config() const { return cfg_; }
  const Vtree& vtree() const { return vtree_; }
  void set_frozen(bool frozen);

  diff::Parameter& leaf() { return leaf_; }
  diff::Parameter& stage(std::size_t s) { return stages_.at(s); }
  diff::Parameter& root_weights() { return root_; }
  std::size_t num_stages() const { return stages_.size(); }

 private:
  BalancedPcConfig cfg_;
  Vtree vtree_;
  diff::Parameter leaf_;
  std::vector<diff::Parameter> stages_;
  diff::Parameter root_;
};

// Root sum over balanced PCs with distinct layouts.
class PcMixture : public Model {
 public:
  PcMixture(std::vector<std::unique_ptr<BalancedPc>> components, std::vector<double> root_logits = {});

  std::string family() const override { return "pc-mixture"; }
  std::vector<diff::Parameter*> parameters() override;
  LossTerms loss(diff::Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                 bool training, std::mt19937_64& rng) override;
  nlohmann::json to_json() const override;
  static std::unique_ptr<PcMixture> from_json(const nlohmann::json& j);

  Circuit compile() const;
  std::size_t size() const { return comps_.size(); }
  BalancedPc& component(std::size_t i) { return *comps_.at(i); }
  diff::Parameter& root_weights() { return root_; }
  // Frozen components keep their parameters; only root weights train.
  void freeze_components(bool frozen);

 private:
  std::vector<std::unique_ptr<BalancedPc>> comps_;
  diff::Parameter root_;
};

// Rows of a (rows x len) table through log-softmax.
std::vector<double> log_softmax_rows(const std::vector<double>& v, std::size_t len);

}  // namespace pclab
