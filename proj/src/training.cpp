#include "pclab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "pclab/diff/ops.hpp"

namespace pclab {
namespace {

bool has_loss(const SequenceBatch& d, std::size_t r) {
  for (auto m : d.mask_row(r))
    if (m) return true;
  return false;
}

}  // namespace

void OptimizerSpec::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("eps must be > 0");
}

OptimizerSpec OptimizerSpec::for_family(const std::string& family) {
  OptimizerSpec s;
  if (family == "hmm" || family == "pc" || family == "pc-mixture") {
    s.lr = 0.01;
  } else if (family == "logit-hmm") {
    s.lr = 5e-4;
    s.weight_decay = 5e-6;
  } else if (family == "transformer") {
    s.lr = 1e-4;
    s.weight_decay = 0.1;
  } else if (family == "prob-transformer") {
    s.lr = 5e-4;
    s.weight_decay = 0.1;
  } else {
    throw std::invalid_argument("unknown family: " + family);
  }
  return s;
}

nlohmann::json OptimizerSpec::to_json() const {
  return {{"kind", "adamw"}, {"lr", lr}, {"weight_decay", weight_decay},
          {"beta1", beta1},  {"beta2", beta2}, {"eps", eps}};
}

OptimizerSpec OptimizerSpec::from_json(const nlohmann::json& j) {
  if (j.value("kind", std::string("adamw")) != "adamw") throw std::invalid_argument("only adamw is supported");
  OptimizerSpec s;
  s.lr = j.value("lr", s.lr);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.eps = j.value("eps", s.eps);
  s.validate();
  return s;
}

AdamW::AdamW(std::vector<diff::Parameter*> params, OptimizerSpec spec)
    : params_(std::move(params)), spec_(spec) {
  spec_.validate();
  for (auto* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    if (!p->requires_grad) continue;
    auto& w = p->value();
    const auto& g = p->grad();
    const bool has_grad = g.size() == w.size();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has_grad ? g[k] : 0.0;
      w[k] -= spec_.lr * spec_.weight_decay * w[k];
      m[k] = spec_.beta1 * m[k] + (1 - spec_.beta1) * gk;
      v[k] = spec_.beta2 * v[k] + (1 - spec_.beta2) * gk * gk;
      w[k] -= spec_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + spec_.eps);
    }
  }
}

void TrainSpec::validate() const {
  opt.validate();
  if (max_epochs == 0) throw std::invalid_argument("max_epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(clip_norm >= 0)) throw std::invalid_argument("clip_norm must be >= 0");
}

nlohmann::json TrainSpec::to_json() const {
  return {{"optimizer", opt.to_json()}, {"max_epochs", max_epochs}, {"patience", patience},
          {"batch_size", batch_size},   {"clip_norm", clip_norm},   {"seed", seed}};
}

TrainSpec TrainSpec::from_json(const nlohmann::json& j) {
  TrainSpec s;
  if (j.contains("optimizer")) s.opt = OptimizerSpec::from_json(j["optimizer"]);
  s.max_epochs = j.value("max_epochs", s.max_epochs);
  s.patience = j.value("patience", s.patience);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

nlohmann::json TrainReport::to_json() const {
  return {{"train_nll", train_nll},       {"valid_nll", valid_nll}, {"best_epoch", best_epoch},
          {"best_valid", best_valid},     {"stop_reason", stop_reason},
          {"wall_seconds", wall_seconds}, {"seed", seed}};
}

double evaluate(Model& model, const SequenceBatch& data, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  std::mt19937_64 rng(0);  // unused in evaluation mode
  double total = 0, count = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.rows(); start += batch_size) {
    rows.clear();
    for (std::size_t r = start; r < std::min(data.rows(), start + batch_size); ++r) {
      if (has_loss(data, r)) rows.push_back(r);
    }
    if (rows.empty()) continue;
    diff::Tape tape;
    auto terms = model.loss(tape, data, rows, false, rng);
    total += terms.total.item();
    count += terms.count;
  }
  if (count == 0) throw std::invalid_argument("evaluate: no masked positions");
  return total / count;
}

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(const std::vector<diff::Parameter*>& ps) {
  Snapshot s;
  for (auto* p : ps) s.push_back(p->value());
  return s;
}

void restore(const std::vector<diff::Parameter*>& ps, const Snapshot& s) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value() = s[i];
}

void clip_gradients(const std::vector<diff::Parameter*>& ps, double max_norm) {
  double sq = 0;
  for (auto* p : ps)
    for (double g : p->grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0) return;
  const double f = max_norm / norm;
  for (auto* p : ps)
    for (double& g : p->grad()) g *= f;
}

}  // namespace

TrainReport train(Model& model, const SequenceBatch& train_data, const SequenceBatch& valid_data,
                  const TrainSpec& spec) {
  spec.validate();
  train_data.validate();
  valid_data.validate();
  const auto start = std::chrono::steady_clock::now();
  auto params = model.parameters();
  AdamW opt(params, spec.opt);
  std::mt19937_64 rng(spec.seed);

  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < train_data.rows(); ++r) {
    if (has_loss(train_data, r)) order.push_back(r);
  }
  if (order.empty()) throw std::invalid_argument("train: no masked positions in training data");

  TrainReport rep;
  rep.seed = spec.seed;
  Snapshot best;
  std::size_t since_best = 0;
  auto diverged = [&](const std::string& what) {
    if (!best.empty()) restore(params, best);
    throw DivergenceError("training diverged at epoch " + std::to_string(rep.valid_nll.size() + 1) + ": " + what);
  };

  for (std::size_t epoch = 0; epoch < spec.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0, count = 0;
    for (std::size_t b = 0; b < order.size(); b += spec.batch_size) {
      std::span<const std::size_t> rows(order.data() + b, std::min(spec.batch_size, order.size() - b));
      for (auto* p : params) p->zero_grad();
      diff::Tape tape;
      LossTerms terms;
      try {
        terms = model.loss(tape, train_data, rows, true, rng);
      } catch (const diff::NumericalError& e) {
        diverged(e.what());
      }
      const double batch_total = terms.total.item();
      if (!std::isfinite(batch_total)) diverged("non-finite loss");
      total += batch_total;
      count += terms.count;
      tape.backward(diff::scale(terms.total, 1.0 / terms.count));
      if (spec.clip_norm > 0) clip_gradients(params, spec.clip_norm);
      opt.step();
    }
    rep.train_nll.push_back(total / count);
    double v;
    try {
      v = evaluate(model, valid_data);
    } catch (const diff::NumericalError& e) {
      diverged(e.what());
    }
    if (!std::isfinite(v)) diverged("non-finite validation loss");
    rep.valid_nll.push_back(v);
    if (best.empty() || v < rep.best_valid) {
      rep.best_valid = v;
      rep.best_epoch = epoch;
      best = snapshot(params);
      since_best = 0;
    } else if (++since_best >= spec.patience && spec.patience > 0) {
      rep.stop_reason = "patience";
      break;
    }
  }
  if (rep.stop_reason.empty()) rep.stop_reason = "max_epochs";
  restore(params, best);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

MixtureResult train_mixture_scratch(const std::vector<BalancedPcConfig>& components,
                                    const SequenceBatch& train_data, const SequenceBatch& valid_data,
                                    const TrainSpec& spec) {
  if (components.empty()) throw std::invalid_argument("mixture needs at least one component");
  std::vector<std::unique_ptr<BalancedPc>> comps;
  for (const auto& c : components) comps.push_back(std::make_unique<BalancedPc>(c));
  MixtureResult out;
  out.mixture = std::make_unique<PcMixture>(std::move(comps));
  out.report = train(*out.mixture, train_data, valid_data, spec);
  return out;
}

MixtureResult train_mixture_init(const std::vector<Specialist>& specialists,
                                 const SequenceBatch& train_data, const SequenceBatch& valid_data,
                                 const TrainSpec& stage1, const TrainSpec& stage2, bool finetune) {
  if (specialists.empty()) throw std::invalid_argument("mixture needs at least one specialist");
  if (train_data.provenance.empty() || valid_data.provenance.empty()) {
    throw std::invalid_argument("train_mixture_init: data carries no provenance tags");
  }
  MixtureResult out;
  std::vector<std::unique_ptr<BalancedPc>> comps;
  for (const auto& s : specialists) {
    const auto tr = train_data.only(s.provenance);
    const auto va = valid_data.only(s.provenance);
    if (tr.rows() == 0 || va.rows() == 0) {
      throw std::invalid_argument("train_mixture_init: no rows tagged " + provenance_name(s.provenance));
    }
    auto pc = std::make_unique<BalancedPc>(s.config);
    out.stage1.push_back(train(*pc, tr, va, stage1));
    comps.push_back(std::move(pc));
  }
  out.mixture = std::make_unique<PcMixture>(std::move(comps));
  out.mixture->freeze_components(!finetune);
  out.report = train(*out.mixture, train_data, valid_data, stage2);
  out.mixture->freeze_components(false);
  return out;
}

}  // namespace pclab
