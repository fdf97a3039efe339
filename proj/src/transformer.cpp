#include "pclab/transformer.hpp"

#include <cmath>
#include <stdexcept>

#include "pclab/balanced_pc.hpp"
#include "pclab/circuit.hpp"

namespace pclab {

using diff::Parameter;
using diff::Shape;
using diff::Tape;
using diff::Tensor;

std::string mask_name(MaskKind k) {
  switch (k) {
    case MaskKind::kVanilla: return "vanilla";
    case MaskKind::kAdjacent: return "adjacent";
    case MaskKind::kDistant: return "distant";
  }
  return "?";
}

MaskKind parse_mask(const std::string& s) {
  if (s == "vanilla") return MaskKind::kVanilla;
  if (s == "adjacent") return MaskKind::kAdjacent;
  if (s == "distant") return MaskKind::kDistant;
  throw std::invalid_argument("unknown mask kind '" + s + "'");
}

diff::AttentionMask tree_attention_mask(MaskKind kind, std::size_t n, std::size_t layer) {
  if (kind == MaskKind::kVanilla) return diff::AttentionMask::causal(n);
  const std::size_t depth = log2_exact(n);
  if (depth == 0 || layer >= depth) {
    throw std::invalid_argument("tree mask: layer " + std::to_string(layer) + " outside [0, log2 N)");
  }
  const Perm pi = kind == MaskKind::kAdjacent ? standard_perm(n) : shifted_induction_perm(n);
  const Perm inv = inverse_perm(pi);
  diff::AttentionMask m;
  m.length = n;
  m.allowed.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      m.allowed[i * n + j] = (inv[i] >> (layer + 1)) == (inv[j] >> (layer + 1));
  return m;
}

std::vector<double> prob_head(std::span<const double> h, std::span<const double> log_basis,
                              std::size_t vocab) {
  const std::size_t r = h.size();
  if (log_basis.size() != r * vocab) throw std::invalid_argument("prob_head: basis must be (r, V)");
  std::vector<double> logc(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double x = h[i];
    const double sp = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    logc[i] = std::log(sp);
  }
  const double z = logsumexp(logc);
  std::vector<double> out(vocab), tmp(r);
  for (std::size_t v = 0; v < vocab; ++v) {
    for (std::size_t i = 0; i < r; ++i) tmp[i] = logc[i] - z + log_basis[i * vocab + v];
    out[v] = std::exp(logsumexp(tmp));
  }
  return out;
}

Transformer::Transformer(TransformerConfig cfg) : cfg_(cfg) {
  const std::size_t d = cfg_.d, v = cfg_.vocab, n = cfg_.context;
  if (d == 0 || cfg_.heads == 0 || d % cfg_.heads) throw std::invalid_argument("d must be divisible by heads");
  if (v < 2 || n < 1 || cfg_.layers < 1) throw std::invalid_argument("invalid transformer config");
  if (cfg_.dropout < 0 || cfg_.dropout >= 1) throw std::invalid_argument("dropout must be in [0, 1)");
  std::mt19937_64 rng(cfg_.seed);
  auto g = [&](const std::string& name, Shape s) {
    return Parameter(name, s, gaussian_values(diff::numel(s), cfg_.init_scale, rng));
  };
  auto fill = [](const std::string& name, Shape s, double x) {
    return Parameter(name, s, std::vector<double>(diff::numel(s), x));
  };
  tok_ = g("tok", {v + 1, d});
  pos_ = g("pos", {n, d});
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "b" + std::to_string(l) + ".";
    blocks_.push_back(Block{fill(p + "ln1_g", {d}, 1.0), fill(p + "ln1_b", {d}, 0.0),
                            g(p + "wq", {d, d}), fill(p + "bq", {d}, 0.0),
                            g(p + "wk", {d, d}), fill(p + "bk", {d}, 0.0),
                            g(p + "wv", {d, d}), fill(p + "bv", {d}, 0.0),
                            g(p + "wo", {d, d}), fill(p + "bo", {d}, 0.0),
                            fill(p + "ln2_g", {d}, 1.0), fill(p + "ln2_b", {d}, 0.0),
                            g(p + "w1", {d, 4 * d}), fill(p + "b1", {4 * d}, 0.0),
                            g(p + "w2", {4 * d, d}), fill(p + "b2", {d}, 0.0)});
    masks_.push_back(cfg_.mask == MaskKind::kVanilla ? diff::AttentionMask::causal(n)
                                                     : tree_attention_mask(cfg_.mask, n, l));
  }
  if (cfg_.mask != MaskKind::kVanilla && cfg_.layers != log2_exact(n)) {
    throw std::invalid_argument("tree masks need log2(context) layers");
  }
  lnf_g_ = fill("lnf_g", {d}, 1.0);
  lnf_b_ = fill("lnf_b", {d}, 0.0);
  out_ = g("out", {d, v});
}

std::vector<Parameter*> Transformer::parameters() {
  std::vector<Parameter*> ps = {&tok_, &pos_};
  for (auto& b : blocks_) {
    for (auto* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                    &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
      ps.push_back(p);
    }
  }
  ps.push_back(&lnf_g_);
  ps.push_back(&lnf_b_);
  ps.push_back(&out_);
  return ps;
}

Parameter* Transformer::find(const std::string& name) {
  for (auto* p : parameters()) {
    if (p->name() == name) return p;
  }
  return nullptr;
}

Tensor Transformer::log_probs(Tape& tape, std::span<const std::uint32_t> tokens, std::size_t batch,
                              std::size_t length, bool training, std::mt19937_64& rng) {
  const std::size_t d = cfg_.d, v = cfg_.vocab;
  if (length > cfg_.context) throw std::invalid_argument("sequence longer than the context");
  if (cfg_.mask != MaskKind::kVanilla && length != cfg_.context) {
    throw std::invalid_argument("tree-masked model needs full-length sequences");
  }
  if (tokens.size() != batch * length) throw std::invalid_argument("token count != batch x length");
  std::vector<std::uint32_t> input(batch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    input[b * length] = static_cast<std::uint32_t>(v);  // BOS
    for (std::size_t t = 0; t + 1 < length; ++t) {
      const auto x = tokens[b * length + t];
      if (x >= v) throw std::out_of_range("token " + std::to_string(x) + " >= vocabulary");
      input[b * length + t + 1] = x;
    }
    if (tokens[b * length + length - 1] >= v) throw std::out_of_range("token out of range");
  }
  auto h = diff::embedding(tape.param(tok_), input, {batch, length});
  auto pos = diff::slice_last(diff::reshape(tape.param(pos_), {1, cfg_.context * d}), 0, length * d);
  h = diff::add(h, diff::reshape(pos, {1, length, d}));
  h = diff::dropout(h, cfg_.dropout, rng, training);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    auto& b = blocks_[l];
    diff::AttentionMask mask = masks_[l];
    if (length != cfg_.context) mask = diff::AttentionMask::causal(length);
    auto x = diff::layer_norm(h, tape.param(b.ln1_g), tape.param(b.ln1_b));
    auto q = diff::add(diff::matmul(x, tape.param(b.wq)), tape.param(b.bq));
    auto k = diff::add(diff::matmul(x, tape.param(b.wk)), tape.param(b.bk));
    auto vv = diff::add(diff::matmul(x, tape.param(b.wv)), tape.param(b.bv));
    auto a = diff::attention(q, k, vv, cfg_.heads, mask);
    a = diff::add(diff::matmul(a, tape.param(b.wo)), tape.param(b.bo));
    h = diff::add(h, diff::dropout(a, cfg_.dropout, rng, training));
    x = diff::layer_norm(h, tape.param(b.ln2_g), tape.param(b.ln2_b));
    auto m = diff::gelu(diff::add(diff::matmul(x, tape.param(b.w1)), tape.param(b.b1)));
    m = diff::add(diff::matmul(m, tape.param(b.w2)), tape.param(b.b2));
    h = diff::add(h, diff::dropout(m, cfg_.dropout, rng, training));
  }
  h = diff::layer_norm(h, tape.param(lnf_g_), tape.param(lnf_b_));
  if (cfg_.head == HeadKind::kLogit) {
    return diff::log_softmax(diff::matmul(h, tape.param(out_)));
  }
  // Probability-space head: log c = log_softmax(log softplus(h)), basis rows normalized.
  auto logc = diff::log_softmax(diff::log(diff::softplus(h)));
  auto log_basis = diff::log_softmax(tape.param(out_));  // (d, V)
  auto w = diff::reshape(diff::transpose_last2(log_basis), {1, v, d});
  auto lp = diff::log_matmul(diff::reshape(logc, {batch * length, 1, d}), w);
  return diff::reshape(lp, {batch, length, v});
}

LossTerms Transformer::loss(Tape& tape, const SequenceBatch& data, std::span<const std::size_t> rows,
                            bool training, std::mt19937_64& rng) {
  if (data.vocab != cfg_.vocab) throw std::invalid_argument("data vocabulary does not match the model");
  const std::size_t b = rows.size(), n = data.n;
  std::vector<std::uint32_t> toks(b * n);
  std::vector<double> coef(b * n, 0.0);
  double count = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    auto x = data.row(rows[i]);
    auto m = data.mask_row(rows[i]);
    std::copy(x.begin(), x.end(), toks.begin() + static_cast<std::ptrdiff_t>(i * n));
    for (std::size_t t = 0; t < n; ++t) {
      if (m[t]) {
        coef[i * n + t] = -1.0;
        count += 1.0;
      }
    }
  }
  auto lp = log_probs(tape, toks, b, n, training, rng);
  auto picked = diff::gather_last(lp, toks);  // (B, N)
  auto total = diff::sum(diff::mul(picked, tape.constant({b, n}, std::move(coef))));
  return {total, count};
}

std::vector<std::vector<double>> Transformer::distributions(std::span<const std::uint32_t> tokens) {
  Tape tape;
  std::mt19937_64 rng(0);
  auto lp = log_probs(tape, tokens, 1, tokens.size(), false, rng);
  std::vector<std::vector<double>> out(tokens.size(), std::vector<double>(cfg_.vocab));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t k = 0; k < cfg_.vocab; ++k) out[t][k] = std::exp(lp.values()[t * cfg_.vocab + k]);
  return out;
}

nlohmann::json Transformer::to_json() const {
  nlohmann::json j;
  j["family"] = family();
  j["layers"] = cfg_.layers;
  j["heads"] = cfg_.heads;
  j["d"] = cfg_.d;
  j["context"] = cfg_.context;
  j["dropout"] = cfg_.dropout;
  j["vocab"] = cfg_.vocab;
  j["mask"] = mask_name(cfg_.mask);
  j["init_scale"] = cfg_.init_scale;
  j["seed"] = cfg_.seed;
  auto self = const_cast<Transformer*>(this)->parameters();
  j["params"] = params_to_json(std::vector<const Parameter*>(self.begin(), self.end()));
  return j;
}

std::unique_ptr<Transformer> Transformer::from_json(const nlohmann::json& j) {
  TransformerConfig cfg;
  cfg.layers = j.at("layers");
  cfg.heads = j.at("heads");
  cfg.d = j.at("d");
  cfg.context = j.at("context");
  cfg.dropout = j.at("dropout");
  cfg.vocab = j.at("vocab");
  cfg.head = j.at("family") == "prob-transformer" ? HeadKind::kProb : HeadKind::kLogit;
  cfg.mask = parse_mask(j.at("mask"));
  cfg.init_scale = j.value("init_scale", 0.02);
  cfg.seed = j.value("seed", std::uint64_t{0});
  auto m = std::make_unique<Transformer>(cfg);
  params_from_json(j.at("params"), m->parameters());
  return m;
}

}  // namespace pclab
