#pragma once

// Gradient training shared by every model family: AdamW, early stopping on
// validation NLL, and the two mixture strategies.

#include <memory>
#include <stdexcept>

#include "pclab/balanced_pc.hpp"
#include "pclab/model.hpp"

namespace pclab {

struct OptimizerSpec {
  double lr = 0.01;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  // Per-family defaults: hmm/pc 0.01/0, logit-hmm 5e-4/5e-6,
  // transformer 1e-4/0.1, prob-transformer 5e-4/0.1.
  static OptimizerSpec for_family(const std::string& family);
  nlohmann::json to_json() const;
  static OptimizerSpec from_json(const nlohmann::json& j);
};

// Decoupled weight decay: p -= lr * wd * p, then the Adam step. Parameters
// with requires_grad == false are skipped.
class AdamW {
 public:
  AdamW(std::vector<diff::Parameter*> params, OptimizerSpec spec);
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<diff::Parameter*> params_;
  OptimizerSpec spec_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainSpec {
  OptimizerSpec opt;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t batch_size = 64;
  double clip_norm = 0.0;  // 0: off
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainSpec from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<double> train_nll;  // mean masked NLL per epoch (running, training mode)
  std::vector<double> valid_nll;  // per epoch, evaluation mode
  std::size_t best_epoch = 0;     // 0-based index into valid_nll
  double best_valid = 0.0;
  std::string stop_reason;        // patience | max_epochs
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean masked NLL per token over all rows (evaluation mode).
double evaluate(Model& model, const SequenceBatch& data, std::size_t batch_size = 256);

// Minimizes mean masked NLL and restores the best-validation parameters.
// Throws DivergenceError on a non-finite loss (best parameters restored first).
TrainReport train(Model& model, const SequenceBatch& train_data, const SequenceBatch& valid_data,
                  const TrainSpec& spec);

struct MixtureResult {
  std::unique_ptr<PcMixture> mixture;
  std::vector<TrainReport> stage1;  // specialists (Init Mix only)
  TrainReport report;               // joint / stage-2 run
};

// All components and root weights trained jointly from a fresh init.
MixtureResult train_mixture_scratch(const std::vector<BalancedPcConfig>& components,
                                    const SequenceBatch& train_data, const SequenceBatch& valid_data,
                                    const TrainSpec& spec);

struct Specialist {
  BalancedPcConfig config;
  Provenance provenance;
};

// Stage 1: each specialist on its provenance-matched subset. Stage 2: mix
// and train root weights only (finetune = false) or everything.
MixtureResult train_mixture_init(const std::vector<Specialist>& specialists,
                                 const SequenceBatch& train_data, const SequenceBatch& valid_data,
                                 const TrainSpec& stage1, const TrainSpec& stage2, bool finetune);

}  // namespace pclab
