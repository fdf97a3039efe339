#pragma once

// Decoder-only pre-norm Transformer with a logit or probability-space head,
// and fixed tree-structured attention masks.

#include <memory>

#include "pclab/diff/ops.hpp"
#include "pclab/model.hpp"
#include "pclab/vtree.hpp"

namespace pclab {

enum class HeadKind { kLogit, kProb };
enum class MaskKind { kVanilla, kAdjacent, kDistant };

std::string mask_name(MaskKind k);
MaskKind parse_mask(const std::string& s);

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d = 16;
  std::size_t context = 16;
  double dropout = 0.0;
  std::size_t vocab = 16;
  HeadKind head = HeadKind::kLogit;
  MaskKind mask = MaskKind::kVanilla;
  double init_scale = 0.02;
  std::uint64_t seed = 0;
};

// i may attend j iff j <= i and both sit in the same subtree of height
// layer + 1 of the balanced vtree (adjacent: identity layout, distant:
// shifted-induction layout).
diff::AttentionMask tree_attention_mask(MaskKind kind, std::size_t n, std::size_t layer);

// Convex combination of the basis rows: log sum_i c_i B_i with
// c = softplus(h) / sum softplus(h). h (d), log_basis (d, V) normalized rows.
std::vector<double> prob_head(std::span<const double> h, std::span<const double> log_basis,
                              std::size_t vocab);

class Transformer : public Model {
 public:
  explicit Transformer(TransformerConfig cfg);

  std::string family() const override {
    return cfg_.head == HeadKind::kLogit ? "transformer" : "prob-transformer";
  }
  std::vector<diff::Parameter*> parameters() override;
  LossTerms loss(diff::Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                 bool training, std::mt19937_64& rng) override;
  nlohmann::json to_json() const override;
  static std::unique_ptr<Transformer> from_json(const nlohmann::json& j);

  const TransformerConfig& config() const { return cfg_; }

  // Input is BOS followed by tokens 0..T-2; output position i predicts token i.
  // Returns (B, T, V) log-probabilities.
  diff::Tensor log_probs(diff::Tape& tape, std::span<const std::uint32_t> tokens, std::size_t batch,
                         std::size_t length, bool training, std::mt19937_64& rng);
  // Per-position distributions for one sequence (evaluation mode).
  std::vector<std::vector<double>> distributions(std::span<const std::uint32_t> tokens);

  diff::Parameter& output() { return out_; }
  diff::Parameter* find(const std::string& name);

 private:
  struct Block {
    diff::Parameter ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    diff::Parameter ln2_g, ln2_b, w1, b1, w2, b2;
  };

  TransformerConfig cfg_;
  diff::Parameter tok_, pos_;
  std::vector<Block> blocks_;
  diff::Parameter lnf_g_, lnf_b_;
  diff::Parameter out_;  // (d, V): logit map or basis logits
  std::vector<diff::AttentionMask> masks_;
};

}  // namespace pclab
