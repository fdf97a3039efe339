#pragma once

// Homogeneous HMMs over tokens and the Logit-HMM head, plus the closed-form
// parameter counts of the four output-bottleneck families.

#include <memory>

#include "pclab/circuit.hpp"
#include "pclab/model.hpp"

namespace pclab {

struct HmmConfig {
  std::size_t states = 4;
  std::size_t vocab = 16;
  double init_scale = 0.5;
  std::uint64_t seed = 0;
};

// Initial (d), transition (d, d) and emission (d, V) logits, each row mapped
// through log-softmax.
class Hmm : public Model {
 public:
  explicit Hmm(HmmConfig cfg);

  std::string family() const override { return "hmm"; }
  std::vector<diff::Parameter*> parameters() override { return {&init_, &trans_, &emit_}; }
  LossTerms loss(diff::Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                 bool training, std::mt19937_64& rng) override;
  nlohmann::json to_json() const override;
  static std::unique_ptr<Hmm> from_json(const nlohmann::json& j);

  const HmmConfig& config() const { return cfg_; }
  std::size_t states() const { return cfg_.states; }
  std::size_t vocab() const { return cfg_.vocab; }

  // Normalized log-parameters.
  std::vector<double> log_init() const;
  std::vector<double> log_trans() const;  // row j: p(z' | z = j)
  std::vector<double> log_emit() const;   // row j: p(x | z = j)

  // log p(z_t | x_<=t) for t = x.size() - 1 (normalized).
  std::vector<double> forward_filter(std::span<const std::uint32_t> x) const;
  // log p(z_t | x_<t) for t = prefix.size() (normalized).
  std::vector<double> predictive(std::span<const std::uint32_t> prefix) const;
  std::vector<double> next_token(std::span<const std::uint32_t> prefix) const;
  double log_prob(std::span<const std::uint32_t> x) const;

  // Chain compilation: P_t(j) = E_t(j) * S_{t+1}(j), S_t(j) = sum_k A[j,k] P_t(k).
  Circuit as_circuit(std::size_t n) const;

  diff::Parameter& init() { return init_; }
  diff::Parameter& trans() { return trans_; }
  diff::Parameter& emit() { return emit_; }

  // Tape path: per step t, the unnormalized predictive log-state (B, d)
  // log p(x_<t, z_t), and prefix marginals (B, N+1).
  struct TapeForward {
    std::vector<diff::Tensor> predictive;
    diff::Tensor prefix_logp;
  };
  TapeForward tape_forward(diff::Tape& tape, const SequenceBatch& data,
                           std::span<const std::size_t> rows, std::size_t steps);

 private:
  HmmConfig cfg_;
  diff::Parameter init_, trans_, emit_;
};

// HMM whose output is softmax(W e_t + b) with e_t = log p(z_t | x_<t).
class LogitHmm : public Model {
 public:
  explicit LogitHmm(HmmConfig cfg);

  std::string family() const override { return "logit-hmm"; }
  std::vector<diff::Parameter*> parameters() override;
  LossTerms loss(diff::Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                 bool training, std::mt19937_64& rng) override;
  nlohmann::json to_json() const override;
  static std::unique_ptr<LogitHmm> from_json(const nlohmann::json& j);

  std::vector<double> next_token(std::span<const std::uint32_t> prefix) const;

  Hmm& hmm() { return hmm_; }
  const Hmm& hmm() const { return hmm_; }
  diff::Parameter& head() { return head_; }
  diff::Parameter& bias() { return bias_; }

 private:
  Hmm hmm_;
  diff::Parameter head_;  // (V, d)
  diff::Parameter bias_;  // (V)
};

enum class Family { kHmm, kLogitHmm, kTransformer, kProbTransformer };

Family parse_family(const std::string& s);
std::string family_name(Family f);

// Transformer families use the implemented architecture: token embedding
// (V+1 rows incl. BOS), learned positions, `layers` pre-norm blocks with a 4d
// MLP, final layer norm and a d x V output map (logits or basis).
std::size_t param_count(Family f, std::size_t d, std::size_t vocab, std::size_t layers = 2,
                        std::size_t context = 64);

}  // namespace pclab
