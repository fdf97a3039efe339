#include "pclab/model.hpp"

#include <stdexcept>

#include "pclab/diff/ops.hpp"

namespace pclab {

std::size_t Model::param_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->size();
  return n;
}

LossTerms prefix_marginal_loss(diff::Tape& tape, const diff::Tensor& prefix_logp,
                               const SequenceBatch& data, std::span<const std::size_t> rows) {
  const std::size_t n = data.n;
  if (prefix_logp.shape() != diff::Shape{rows.size(), n + 1}) {
    throw diff::ShapeError("prefix marginals must be (B, N+1)");
  }
  std::vector<double> coef(rows.size() * (n + 1), 0.0);
  double count = 0.0;
  for (std::size_t b = 0; b < rows.size(); ++b) {
    auto m = data.mask_row(rows[b]);
    for (std::size_t t = 0; t < n; ++t) {
      if (!m[t]) continue;
      coef[b * (n + 1) + t] += 1.0;
      coef[b * (n + 1) + t + 1] -= 1.0;
      count += 1.0;
    }
  }
  auto c = tape.constant({rows.size(), n + 1}, std::move(coef));
  return {diff::sum(diff::mul(prefix_logp, c)), count};
}

std::vector<double> gaussian_values(std::size_t n, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

nlohmann::json params_to_json(const std::vector<const diff::Parameter*>& ps) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto* p : ps) {
    if (j.contains(p->name())) throw std::logic_error("duplicate parameter name " + p->name());
    j[p->name()] = p->value();
  }
  return j;
}

void params_from_json(const nlohmann::json& j, const std::vector<diff::Parameter*>& ps) {
  for (auto* p : ps) {
    auto v = j.at(p->name()).get<std::vector<double>>();
    if (v.size() != p->size()) {
      throw std::invalid_argument("parameter " + p->name() + " has " + std::to_string(v.size()) +
                                  " values, expected " + std::to_string(p->size()));
    }
    p->value() = std::move(v);
  }
}

}  // namespace pclab
