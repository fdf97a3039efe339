// pclab: dataset generation, training, experiment sweeps, rank verification
// and inspection. Exit codes: 0 success, 1 property failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "pclab/analysis.hpp"
#include "pclab/balanced_pc.hpp"
#include "pclab/experiments.hpp"
#include "pclab/hmm.hpp"
#include "pclab/model_io.hpp"
#include "pclab/training.hpp"
#include "pclab/transformer.hpp"

namespace {

using nlohmann::json;
using namespace pclab;

constexpr int kOk = 0, kFail = 1, kUsage = 2;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("bad config " + path + ": " + e.what());
  }
}

void print_checks(const std::vector<Check>& checks) {
  for (const auto& c : checks) std::printf("%-4s %s: %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
}

// ----------------------------------------------------------------- gen

struct GenOpts {
  std::string config, out, kind = "local-copy";
  std::size_t n = 16, vocab = 16, count = 1000;
  std::uint64_t seed = 0, task_seed = 0;
  double mix_p = 0.5;
  bool seed_set = false;
};

int cmd_gen(const GenOpts& o) {
  GenSpec g;
  if (!o.config.empty()) {
    const auto j = read_json(o.config);
    g.kind = parse_kind(j.value("kind", o.kind));
    g.n = j.value("n", o.n);
    g.vocab = j.value("vocab", o.vocab);
    g.count = j.value("count", o.count);
    g.seed = j.value("seed", o.seed);
    g.mix_p = j.value("mix_p", o.mix_p);
    g.task_seed = j.value("task_seed", o.task_seed);
  } else {
    g = {parse_kind(o.kind), o.n, o.vocab, o.count, o.seed, o.mix_p, o.task_seed};
  }
  if (o.seed_set) g.seed = o.seed;
  const auto batch = generate(g);
  if (o.out.empty()) throw UsageError("gen needs --out");
  save_dataset(o.out, batch, g);
  std::map<std::string, std::size_t> hist;
  for (auto p : batch.provenance) ++hist[provenance_name(p)];
  std::printf("wrote %zu rows of %s (n=%zu, V=%zu) to %s\n", batch.rows(), kind_name(g.kind).c_str(), g.n, g.vocab,
              o.out.c_str());
  for (const auto& [name, c] : hist) std::printf("  %-10s %zu\n", name.c_str(), c);
  return kOk;
}

// --------------------------------------------------------------- train

int cmd_train(const std::string& config, std::uint64_t seed, bool seed_set, const std::string& out) {
  json j = config.empty() ? json::object() : read_json(config);
  auto ms = ModelSpec::from_json(j.value("model", json::object()));
  auto ds = DataSpec::from_json(j.value("data", json::object()));
  TrainSpec ts;
  if (j.contains("train")) {
    ts = TrainSpec::from_json(j["train"]);
  } else {
    ts.opt = OptimizerSpec::for_family(ms.family);
    if (ms.family.find("transformer") != std::string::npos) ts.clip_norm = 1.0;
  }
  if (seed_set) {
    ms.seed = seed;
    ts.seed = seed;
  }
  ms.vocab = ds.vocab;
  ms.n = ds.n;
  j["model"] = ms.to_json();
  j["data"] = ds.to_json();
  j["train"] = ts.to_json();

  auto model = make_model(ms);
  const auto tr = ds.train(), va = ds.valid();
  TrainReport rep;
  try {
    rep = train(*model, tr, va, ts);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "pclab train: %s\n", e.what());
    return kFail;
  }
  for (std::size_t e = 0; e < rep.valid_nll.size(); ++e) {
    std::printf("epoch %3zu  train %.4f  valid %.4f\n", e + 1, rep.train_nll[e], rep.valid_nll[e]);
  }
  std::printf("best valid %.4f at epoch %zu (%s), %zu params, %.1fs\n", rep.best_valid, rep.best_epoch + 1,
              rep.stop_reason.c_str(), model->param_count(), rep.wall_seconds);
  if (!out.empty()) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(out) / ("train-" + config_hash(j));
    fs::create_directories(dir);
    std::ofstream(dir / "config.json") << j.dump(2) << '\n';
    std::ofstream(dir / "report.json") << rep.to_json().dump() << '\n';
    save_model(*model, (dir / "model.json").string());
    std::printf("wrote %s\n", dir.string().c_str());
  }
  return kOk;
}

// ----------------------------------------------------------------- run

int cmd_run(const std::string& experiment, const std::string& config, double scale, std::size_t jobs,
            std::uint64_t seed, bool seed_set, const std::string& out) {
  json cfg;
  if (!config.empty()) {
    cfg = read_json(config);
    if (!experiment.empty() && cfg.value("experiment", experiment) != experiment) {
      throw UsageError("config is for experiment " + cfg.value("experiment", std::string("?")));
    }
  } else {
    if (experiment.empty()) throw UsageError("run needs an experiment name or --config");
    cfg = preset(experiment, scale);
  }
  if (seed_set) {
    if (cfg.contains("seeds")) cfg["seeds"] = {seed};
    if (cfg.contains("seed")) cfg["seed"] = seed;
  }
  const auto res = run_experiment(cfg, jobs);
  if (!res.summary.empty()) {
    std::printf("%-40s %5s %10s %10s\n", "cell", "runs", "mean", "std");
    for (const auto& s : res.summary) std::printf("%-40s %5zu %10.4f %10.4f\n", s.cell.c_str(), s.runs, s.mean, s.std);
  }
  for (const auto& r : res.rows) {
    if (r.status != "ok") std::printf("note: %s seed %llu %s\n", r.cell.c_str(), static_cast<unsigned long long>(r.seed), r.status.c_str());
  }
  print_checks(res.checks);
  std::printf("%s in %.1fs\n", res.passed() ? "all checks passed" : "some checks failed", res.wall_seconds);
  if (!out.empty()) std::printf("wrote %s\n", write_results(res, out).c_str());
  return res.passed() ? kOk : kFail;
}

// -------------------------------------------------------------- inspect

Perm layout_perm(const std::string& layout, std::size_t n) {
  if (layout == "standard") return standard_perm(n);
  if (layout == "shifted") return shifted_induction_perm(n);
  throw UsageError("unknown layout: " + layout);
}

std::string scope_text(VarSet s) { return set_string(s); }

void dump_circuit(const Circuit& c) {
  std::printf("circuit: %zu variables, %zu nodes, %zu parameters, root %zu\n", c.num_vars(), c.size(),
              c.param_count(), c.root());
  if (c.vtree()) std::printf("vtree: %s\n", c.vtree()->to_string().c_str());
  const auto rep = c.validate();
  std::printf("decomposable=%s smooth=%s structured=%s\n", rep.decomposable ? "true" : "false",
              rep.smooth ? "true" : "false", rep.structured ? "true" : "false");
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& n = c.node(i);
    std::printf("%5zu ", i);
    switch (n.kind) {
      case NodeKind::kInput:
        if (n.indicator >= 0) {
          std::printf("ind  x%zu=%d", n.var, n.indicator);
        } else {
          std::printf("in   x%zu", n.var);
        }
        break;
      case NodeKind::kSum: std::printf("sum  %s", scope_text(n.scope).c_str()); break;
      case NodeKind::kProduct: std::printf("prod %s", scope_text(n.scope).c_str()); break;
    }
    if (!n.children.empty()) {
      std::printf(" <-");
      for (auto ch : n.children) std::printf(" %zu", ch);
    }
    std::printf("\n");
  }
}

struct InspectOpts {
  std::string what, layout = "standard", mask = "adjacent", model;
  std::size_t n = 8, layer = 0, channels = 2, vocab = 2;
};

int cmd_inspect(const InspectOpts& o) {
  if (o.what == "vtree") {
    const auto v = Vtree::balanced(layout_perm(o.layout, o.n));
    std::printf("%s\n", v.to_string().c_str());
    return kOk;
  }
  if (o.what == "mask") {
    const auto m = tree_attention_mask(parse_mask(o.mask), o.n, o.layer);
    for (std::size_t i = 0; i < o.n; ++i) {
      for (std::size_t j = 0; j < o.n; ++j) std::putchar(m(i, j) ? '1' : '.');
      std::putchar('\n');
    }
    return kOk;
  }
  if (o.what == "circuit") {
    if (!o.model.empty()) {
      auto m = load_model(o.model);
      if (auto* pc = dynamic_cast<BalancedPc*>(m.get())) {
        dump_circuit(pc->compile());
      } else if (auto* mix = dynamic_cast<PcMixture*>(m.get())) {
        dump_circuit(mix->compile());
      } else if (auto* h = dynamic_cast<Hmm*>(m.get())) {
        dump_circuit(h->as_circuit(o.n));
      } else {
        throw UsageError("model family " + m->family() + " has no circuit form");
      }
      return kOk;
    }
    BalancedPcConfig cfg;
    cfg.n = o.n;
    cfg.vocab = o.vocab;
    cfg.channels = o.channels;
    cfg.perm = layout_perm(o.layout, o.n);
    dump_circuit(BalancedPc(cfg).compile());
    return kOk;
  }
  throw UsageError("inspect: expected vtree, mask or circuit");
}

// --------------------------------------------------------------- verify

int cmd_verify(double scale, std::uint64_t seed, bool seed_set) {
  auto cfg = preset("rank-verify", scale);
  if (seed_set) cfg["seed"] = seed;
  const auto res = run_experiment(cfg);
  print_checks(res.checks);
  std::printf("%s in %.1fs\n", res.passed() ? "all properties hold" : "property failure", res.wall_seconds);
  return res.passed() ? kOk : kFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pclab: probabilistic circuits vs. Transformers, desk-scale"};
  app.require_subcommand(1);

  std::string config, out;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  double scale = 1.0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file");
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--out", out, "output path or directory");
    sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--scale", scale, "size multiplier")->check(CLI::PositiveNumber);
  };

  GenOpts gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset cache file");
  add_common(g);
  g->add_option("--kind", gen.kind, "local-copy | induction-copy | mixed | sparse-last");
  g->add_option("--n", gen.n, "sequence length");
  g->add_option("--vocab", gen.vocab, "vocabulary size");
  g->add_option("--count", gen.count, "number of rows");
  g->add_option("--mix-p", gen.mix_p, "mixed: probability of a local-copy row");
  g->add_option("--task-seed", gen.task_seed, "sparse-last: target permutation seed");

  auto* t = app.add_subcommand("train", "train one model from a config");
  add_common(t);

  std::string experiment;
  auto* r = app.add_subcommand("run", "run an experiment preset or config");
  add_common(r);
  r->add_option("experiment", experiment, "output-bottleneck | layout-selectivity | fixed-routing | mixture | rank-verify");

  auto* v = app.add_subcommand("verify", "rank-theory property sweeps");
  add_common(v);

  InspectOpts ins;
  auto* i = app.add_subcommand("inspect", "dump a vtree, attention mask or circuit as text");
  add_common(i);
  i->add_option("what", ins.what, "vtree | mask | circuit")->required();
  i->add_option("--n", ins.n, "number of positions");
  i->add_option("--layout", ins.layout, "standard | shifted");
  i->add_option("--mask", ins.mask, "vanilla | adjacent | distant");
  i->add_option("--layer", ins.layer, "attention layer");
  i->add_option("--channels", ins.channels, "PC channels");
  i->add_option("--vocab", ins.vocab, "PC vocabulary");
  i->add_option("--model", ins.model, "saved model document");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  auto given = [](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
  try {
    if (g->parsed()) {
      gen.config = config;
      gen.out = out;
      gen.seed = seed;
      gen.seed_set = given(g, "--seed");
      return cmd_gen(gen);
    }
    if (t->parsed()) return cmd_train(config, seed, given(t, "--seed"), out);
    if (r->parsed()) return cmd_run(experiment, config, scale, jobs, seed, given(r, "--seed"), out);
    if (v->parsed()) return cmd_verify(scale, seed, given(v, "--seed"));
    if (i->parsed()) {
      if (!config.empty()) ins.model = config;
      return cmd_inspect(ins);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "pclab: %s\n", e.what());
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "pclab: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pclab: error: %s\n", e.what());
    return kFail;
  }
  return kUsage;
}
