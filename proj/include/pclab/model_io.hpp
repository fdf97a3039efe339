#pragma once

// Model construction from a flat spec and the shared JSON model document.

#include <memory>
#include <string>

#include "pclab/model.hpp"

namespace pclab {

struct ModelSpec {
  std::string family = "hmm";  // hmm | logit-hmm | transformer | prob-transformer | pc
  std::size_t d = 8;           // latent states, width, or PC channels
  std::size_t vocab = 16;
  std::size_t n = 16;          // sequence length / context
  std::size_t layers = 2;
  std::size_t heads = 2;
  double dropout = 0.0;
  std::string mask = "vanilla";   // transformers: vanilla | adjacent | distant
  std::string layout = "standard";  // pc: standard | shifted
  double init_scale = 0.0;        // 0: family default
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

std::unique_ptr<Model> make_model(const ModelSpec& spec);

std::unique_ptr<Model> model_from_json(const nlohmann::json& j);
void save_model(const Model& m, const std::string& path);
std::unique_ptr<Model> load_model(const std::string& path);

}  // namespace pclab
