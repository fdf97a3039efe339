#include "pclab/model_io.hpp"

#include <fstream>
#include <stdexcept>

#include "pclab/balanced_pc.hpp"
#include "pclab/hmm.hpp"
#include "pclab/transformer.hpp"

namespace pclab {

nlohmann::json ModelSpec::to_json() const {
  return {{"family", family}, {"d", d},         {"vocab", vocab},   {"n", n},
          {"layers", layers}, {"heads", heads}, {"dropout", dropout}, {"mask", mask},
          {"layout", layout}, {"init_scale", init_scale}, {"seed", seed}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.family = j.value("family", s.family);
  s.d = j.value("d", s.d);
  s.vocab = j.value("vocab", s.vocab);
  s.n = j.value("n", s.n);
  s.layers = j.value("layers", s.layers);
  s.heads = j.value("heads", s.heads);
  s.dropout = j.value("dropout", s.dropout);
  s.mask = j.value("mask", s.mask);
  s.layout = j.value("layout", s.layout);
  s.init_scale = j.value("init_scale", s.init_scale);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::unique_ptr<Model> make_model(const ModelSpec& s) {
  if (s.family == "hmm" || s.family == "logit-hmm") {
    HmmConfig c;
    c.states = s.d;
    c.vocab = s.vocab;
    if (s.init_scale > 0) c.init_scale = s.init_scale;
    c.seed = s.seed;
    if (s.family == "hmm") return std::make_unique<Hmm>(c);
    return std::make_unique<LogitHmm>(c);
  }
  if (s.family == "transformer" || s.family == "prob-transformer") {
    TransformerConfig c;
    c.layers = s.layers;
    c.heads = s.heads;
    c.d = s.d;
    c.context = s.n;
    c.dropout = s.dropout;
    c.vocab = s.vocab;
    c.head = s.family == "transformer" ? HeadKind::kLogit : HeadKind::kProb;
    c.mask = parse_mask(s.mask);
    if (s.init_scale > 0) c.init_scale = s.init_scale;
    c.seed = s.seed;
    return std::make_unique<Transformer>(c);
  }
  if (s.family == "pc") {
    BalancedPcConfig c;
    c.n = s.n;
    c.vocab = s.vocab;
    c.channels = s.d;
    if (s.layout == "standard") {
      c.perm = standard_perm(s.n);
    } else if (s.layout == "shifted") {
      c.perm = shifted_induction_perm(s.n);
    } else {
      throw std::invalid_argument("unknown layout: " + s.layout);
    }
    if (s.init_scale > 0) c.init_scale = s.init_scale;
    c.seed = s.seed;
    return std::make_unique<BalancedPc>(c);
  }
  throw std::invalid_argument("unknown family: " + s.family);
}

std::unique_ptr<Model> model_from_json(const nlohmann::json& j) {
  const std::string f = j.at("family");
  if (f == "hmm") return Hmm::from_json(j);
  if (f == "logit-hmm") return LogitHmm::from_json(j);
  if (f == "transformer" || f == "prob-transformer") return Transformer::from_json(j);
  if (f == "pc") return BalancedPc::from_json(j);
  if (f == "pc-mixture") return PcMixture::from_json(j);
  throw std::invalid_argument("unknown model family: " + f);
}

void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << m.to_json().dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::unique_ptr<Model> load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace pclab
