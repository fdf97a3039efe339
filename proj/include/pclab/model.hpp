#pragma once

// Common interface of every trainable sequence model.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pclab/diff/tensor.hpp"
#include "pclab/synthdata.hpp"

namespace pclab {

// Sum of masked per-token NLLs over some rows, and how many tokens it covers.
struct LossTerms {
  diff::Tensor total;
  double count = 0.0;
};

class Model {
 public:
  virtual ~Model() = default;

  virtual std::string family() const = 0;
  virtual std::vector<diff::Parameter*> parameters() = 0;
  // Records the loss of `rows` of `data` on the tape. rng drives dropout.
  virtual LossTerms loss(diff::Tape& tape, const SequenceBatch& data,
                         std::span<const std::size_t> rows, bool training, std::mt19937_64& rng) = 0;
  virtual nlohmann::json to_json() const = 0;

  // Number of trainable scalars (frozen parameters included).
  std::size_t param_count();
};

// Turns prefix log-marginals L (B, N+1), L[b, s] = log p(x_<s), into the
// masked sum of -log p(x_t | x_<t) = L[b, t] - L[b, t+1].
LossTerms prefix_marginal_loss(diff::Tape& tape, const diff::Tensor& prefix_logp,
                               const SequenceBatch& data, std::span<const std::size_t> rows);

// Gaussian initial values.
std::vector<double> gaussian_values(std::size_t n, double scale, std::mt19937_64& rng);

// Parameter values as JSON ({name: [values]}) and back.
nlohmann::json params_to_json(const std::vector<const diff::Parameter*>& ps);
void params_from_json(const nlohmann::json& j, const std::vector<diff::Parameter*>& ps);

}  // namespace pclab
