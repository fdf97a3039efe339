#include "pclab/experiments.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "pclab/analysis.hpp"
#include "pclab/balanced_pc.hpp"
#include "pclab/diff/tensor.hpp"
#include "pclab/hmm.hpp"
#include "pclab/model_io.hpp"
#include "pclab/training.hpp"

namespace pclab {
namespace {

using nlohmann::json;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::size_t scaled(std::size_t v, double scale, std::size_t lo = 1) {
  return std::max(lo, static_cast<std::size_t>(std::llround(static_cast<double>(v) * scale)));
}

json train_json(double lr, double wd, std::size_t epochs, std::size_t patience, std::size_t batch,
                double clip, double scale) {
  TrainSpec t;
  t.opt.lr = lr;
  t.opt.weight_decay = wd;
  t.max_epochs = scaled(epochs, scale);
  t.patience = patience;
  t.batch_size = batch;
  t.clip_norm = clip;
  return t.to_json();
}

json data_json(DataKind kind, std::size_t n, std::size_t vocab, std::size_t train_rows,
               std::size_t valid_rows, std::uint64_t seed, double scale) {
  DataSpec d;
  d.kind = kind;
  d.n = n;
  d.vocab = vocab;
  d.train_rows = scaled(train_rows, scale, 8);
  d.valid_rows = scaled(valid_rows, scale, 8);
  d.seed = seed;
  return d.to_json();
}

TrainSpec train_spec(const json& j, std::uint64_t seed) {
  auto t = TrainSpec::from_json(j);
  t.seed = seed;
  return t;
}

// Fills the outcome of one training run into a row.
void record(ResultRow& row, Model& m, const TrainReport& rep) {
  row.best_valid = rep.best_valid;
  row.param_count = m.param_count();
  row.epochs = rep.valid_nll.size();
  row.best_epoch = rep.best_epoch;
  row.wall_seconds = rep.wall_seconds;
  row.report = rep.to_json();
}

void record_failure(ResultRow& row, const std::exception& e) {
  row.best_valid = kNaN;
  row.status = std::string("diverged: ") + e.what();
}

template <class Fn>
void guarded(ResultRow& row, Fn&& fn) {
  try {
    fn();
  } catch (const DivergenceError& e) {
    record_failure(row, e);
  } catch (const diff::NumericalError& e) {
    record_failure(row, e);
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

double mean_of(const ExperimentResult& r, const std::string& cell) {
  const auto* s = r.find(cell);
  return s ? s->mean : kNaN;
}

// ---------------------------------------------------------------- presets

json preset_output_bottleneck(double scale) {
  json c;
  c["experiment"] = "output-bottleneck";
  c["seeds"] = {0, 1, 2};
  c["data"] = data_json(DataKind::kSparseLast, 8, 50, 3000, 750, 11, scale);
  c["families"] = {"hmm", "logit-hmm", "transformer", "prob-transformer"};
  c["d"] = {4, 6, 8, 10};
  c["layers"] = 2;
  c["heads"] = 2;
  c["train"] = {
      {"hmm", train_json(0.01, 0.0, 300, 5, 64, 0.0, scale)},
      {"logit-hmm", train_json(5e-4, 5e-6, 300, 5, 64, 0.0, scale)},
      {"transformer", train_json(2e-3, 0.1, 60, 5, 64, 1.0, scale)},
      {"prob-transformer", train_json(2e-3, 0.1, 60, 5, 64, 1.0, scale)},
  };
  c["margin"] = 0.05;
  return c;
}

json preset_layout_selectivity(double scale) {
  json c;
  c["experiment"] = "layout-selectivity";
  c["seeds"] = {0};
  c["datasets"] = {data_json(DataKind::kLocalCopy, 16, 16, 4000, 1000, 21, scale),
                   data_json(DataKind::kInductionCopy, 16, 16, 4000, 1000, 22, scale)};
  c["layouts"] = {"standard", "shifted"};
  c["channels"] = 8;
  c["init_scale"] = 2.0;
  c["train"] = train_json(0.1, 0.0, 40, 5, 64, 0.0, scale);
  c["floor_tolerance"] = 0.15;
  c["mismatch_ratio"] = 1.5;
  return c;
}

json preset_fixed_routing(double scale) {
  json c;
  c["experiment"] = "fixed-routing";
  c["seeds"] = {0, 1, 2};
  c["data"] = data_json(DataKind::kMixed, 16, 16, 2000, 500, 31, scale);
  c["masks"] = {"vanilla", "adjacent", "distant"};
  c["d"] = 16;
  c["heads"] = 2;
  c["layers"] = 4;
  c["dropout"] = 0.0;
  c["train"] = train_json(2e-3, 0.1, 60, 5, 64, 1.0, scale);
  c["margin"] = 0.03;
  return c;
}

json preset_mixture(double scale) {
  json c;
  c["experiment"] = "mixture";
  c["seeds"] = {0, 1, 2};
  c["data"] = data_json(DataKind::kMixed, 16, 16, 4000, 1000, 41, scale);
  c["channels"] = 8;
  c["init_scale"] = 2.0;
  c["stage1"] = train_json(0.1, 0.0, 30, 5, 64, 0.0, scale);
  c["stage2"] = train_json(0.1, 0.0, 10, 3, 64, 0.0, scale);
  c["scratch"] = train_json(0.1, 0.0, 30, 5, 64, 0.0, scale);
  c["margin"] = 0.2;
  return c;
}

json preset_rank_verify(double scale) {
  json c;
  c["experiment"] = "rank-verify";
  c["seed"] = 7;
  c["scale"] = scale;
  return c;
}

// ------------------------------------------------------------- runners

using Task = std::function<std::vector<ResultRow>()>;

std::vector<ResultRow> run_tasks(const std::vector<Task>& tasks, std::size_t jobs) {
  std::vector<std::vector<ResultRow>> out(tasks.size());
  parallel_for(tasks.size(), jobs, [&](std::size_t i) { out[i] = tasks[i](); });
  std::vector<ResultRow> rows;
  for (auto& v : out)
    for (auto& r : v) rows.push_back(std::move(r));
  return rows;
}

std::vector<std::uint64_t> seeds_of(const json& c) {
  auto s = c.at("seeds").get<std::vector<std::uint64_t>>();
  if (s.empty()) throw std::invalid_argument("config: seeds must be nonempty");
  return s;
}

void run_output_bottleneck(const json& c, std::size_t jobs, ExperimentResult& res) {
  const auto data = DataSpec::from_json(c.at("data"));
  const auto train_data = data.train(), valid_data = data.valid();
  std::vector<Task> tasks;
  const auto families = c.at("families").get<std::vector<std::string>>();
  const auto ds = c.at("d").get<std::vector<std::size_t>>();
  for (const auto& f : families) {
    if (!c.at("train").contains(f)) throw std::invalid_argument("config: no train spec for " + f);
    for (auto d : ds)
      for (auto seed : seeds_of(c)) {
        tasks.push_back([&, f, d, seed] {
          ResultRow row;
          row.experiment = res.experiment;
          row.family = f;
          row.d = d;
          row.seed = seed;
          row.dataset = kind_name(data.kind);
          row.cell = "family=" + f + ";d=" + std::to_string(d);
          ModelSpec ms;
          ms.family = f;
          ms.d = d;
          ms.vocab = data.vocab;
          ms.n = data.n;
          ms.layers = c.value("layers", 2);
          ms.heads = c.value("heads", 2);
          ms.seed = seed;
          auto m = make_model(ms);
          guarded(row, [&] { record(row, *m, train(*m, train_data, valid_data, train_spec(c["train"][f], seed))); });
          return std::vector<ResultRow>{row};
        });
      }
  }
  res.rows = run_tasks(tasks, jobs);
  res.summary = summarize(res.rows);
  const double margin = c.value("margin", 0.05);
  for (auto d : ds) {
    const auto key = [&](const std::string& f) { return "family=" + f + ";d=" + std::to_string(d); };
    const double h = mean_of(res, key("hmm")), lh = mean_of(res, key("logit-hmm"));
    const double t = mean_of(res, key("transformer")), pt = mean_of(res, key("prob-transformer"));
    res.checks.push_back({"d=" + std::to_string(d) + " logit-hmm < hmm - " + fmt(margin), lh <= h - margin,
                          "logit-hmm " + fmt(lh) + ", hmm " + fmt(h)});
    res.checks.push_back({"d=" + std::to_string(d) + " transformer < prob-transformer - " + fmt(margin),
                          t <= pt - margin, "transformer " + fmt(t) + ", prob-transformer " + fmt(pt)});
  }
}

void run_layout_selectivity(const json& c, std::size_t jobs, ExperimentResult& res) {
  std::vector<DataSpec> specs;
  for (const auto& j : c.at("datasets")) specs.push_back(DataSpec::from_json(j));
  std::vector<SequenceBatch> trains, valids;
  for (const auto& s : specs) {
    trains.push_back(s.train());
    valids.push_back(s.valid());
  }
  const auto layouts = c.at("layouts").get<std::vector<std::string>>();
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (const auto& layout : layouts)
      for (auto seed : seeds_of(c)) {
        tasks.push_back([&, i, layout, seed] {
          ResultRow row;
          row.experiment = res.experiment;
          row.family = "pc";
          row.d = c.value("channels", 8);
          row.seed = seed;
          row.dataset = kind_name(specs[i].kind);
          row.variant = layout;
          row.cell = "dataset=" + row.dataset + ";layout=" + layout;
          ModelSpec ms;
          ms.family = "pc";
          ms.d = row.d;
          ms.vocab = specs[i].vocab;
          ms.n = specs[i].n;
          ms.layout = layout;
          ms.init_scale = c.value("init_scale", 0.0);
          ms.seed = seed;
          auto m = make_model(ms);
          guarded(row, [&] { record(row, *m, train(*m, trains[i], valids[i], train_spec(c["train"], seed))); });
          return std::vector<ResultRow>{row};
        });
      }
  res.rows = run_tasks(tasks, jobs);
  res.summary = summarize(res.rows);

  const double tol = c.value("floor_tolerance", 0.15), ratio = c.value("mismatch_ratio", 1.5);
  const auto cell = [](const std::string& d, const std::string& l) { return "dataset=" + d + ";layout=" + l; };
  for (const auto& s : specs) {
    const auto name = kind_name(s.kind);
    if (s.kind == DataKind::kLocalCopy) {
      const double floor = local_copy_floor(s.vocab), m = mean_of(res, cell(name, "standard"));
      res.checks.push_back({"local matched layout within " + fmt(tol * 100) + "% of floor",
                            m <= floor * (1 + tol),
                            "standard " + fmt(m) + ", floor " + fmt(floor) + ", limit " + fmt(floor * (1 + tol))});
      const double mm = mean_of(res, cell(name, "shifted"));
      res.checks.push_back({"local mismatched >= " + fmt(ratio) + " x matched", mm >= ratio * m,
                            "shifted " + fmt(mm) + ", standard " + fmt(m) + ", ratio " + fmt(mm / m)});
    } else if (s.kind == DataKind::kInductionCopy) {
      const double m = mean_of(res, cell(name, "shifted")), mm = mean_of(res, cell(name, "standard"));
      res.checks.push_back({"induction mismatched >= " + fmt(ratio) + " x matched", mm >= ratio * m,
                            "standard " + fmt(mm) + ", shifted " + fmt(m) + ", ratio " + fmt(mm / m)});
    }
  }
}

void run_fixed_routing(const json& c, std::size_t jobs, ExperimentResult& res) {
  const auto data = DataSpec::from_json(c.at("data"));
  const auto train_data = data.train(), valid_data = data.valid();
  const auto masks = c.at("masks").get<std::vector<std::string>>();
  std::vector<Task> tasks;
  for (const auto& mask : masks)
    for (auto seed : seeds_of(c)) {
      tasks.push_back([&, mask, seed] {
        ResultRow row;
        row.experiment = res.experiment;
        row.family = "transformer";
        row.d = c.value("d", 16);
        row.seed = seed;
        row.dataset = kind_name(data.kind);
        row.variant = mask;
        row.cell = "mask=" + mask;
        ModelSpec ms;
        ms.family = "transformer";
        ms.d = row.d;
        ms.vocab = data.vocab;
        ms.n = data.n;
        ms.layers = c.value("layers", 4);
        ms.heads = c.value("heads", 2);
        ms.dropout = c.value("dropout", 0.0);
        ms.mask = mask;
        ms.seed = seed;
        auto m = make_model(ms);
        guarded(row, [&] { record(row, *m, train(*m, train_data, valid_data, train_spec(c["train"], seed))); });
        return std::vector<ResultRow>{row};
      });
    }
  res.rows = run_tasks(tasks, jobs);
  res.summary = summarize(res.rows);
  const double margin = c.value("margin", 0.03), v = mean_of(res, "mask=vanilla");
  for (const auto& mask : masks) {
    if (mask == "vanilla") continue;
    const double f = mean_of(res, "mask=" + mask);
    res.checks.push_back({"vanilla <= " + mask + " - " + fmt(margin), v <= f - margin,
                          "vanilla " + fmt(v) + ", " + mask + " " + fmt(f)});
  }
}

void run_mixture(const json& c, std::size_t jobs, ExperimentResult& res) {
  const auto data = DataSpec::from_json(c.at("data"));
  if (data.kind != DataKind::kMixed) throw std::invalid_argument("mixture experiment needs mixed data");
  const auto train_data = data.train(), valid_data = data.valid();
  const std::size_t channels = c.value("channels", 8);
  const double init_scale = c.value("init_scale", 0.0);
  auto pc_config = [&](bool shifted, std::uint64_t seed) {
    BalancedPcConfig cfg;
    cfg.n = data.n;
    cfg.vocab = data.vocab;
    cfg.channels = channels;
    cfg.perm = shifted ? shifted_induction_perm(data.n) : standard_perm(data.n);
    if (init_scale > 0) cfg.init_scale = init_scale;
    cfg.seed = seed;
    return cfg;
  };
  auto base_row = [&](const std::string& variant, std::uint64_t seed) {
    ResultRow row;
    row.experiment = res.experiment;
    row.family = "pc";
    row.d = channels;
    row.seed = seed;
    row.dataset = kind_name(data.kind);
    row.variant = variant;
    row.cell = "variant=" + variant;
    return row;
  };
  std::vector<Task> tasks;
  for (auto seed : seeds_of(c)) {
    const std::vector<Specialist> specs = {{pc_config(false, seed), Provenance::kLocal},
                                           {pc_config(true, stream_seed(seed, 1)), Provenance::kInduction}};
    for (bool finetune : {false, true}) {
      tasks.push_back([&, specs, seed, finetune] {
        auto mix_row = base_row(finetune ? "init-mix-finetune" : "init-mix", seed);
        std::vector<ResultRow> rows;
        guarded(mix_row, [&] {
          auto r = train_mixture_init(specs, train_data, valid_data, train_spec(c["stage1"], seed),
                                      train_spec(c["stage2"], seed), finetune);
          record(mix_row, *r.mixture, r.report);
          json stage1 = json::array();
          for (auto& s : r.stage1) stage1.push_back(s.to_json());
          mix_row.report = {{"stage1", stage1}, {"stage2", r.report.to_json()}};
          for (auto& s : r.stage1) mix_row.wall_seconds += s.wall_seconds;
          if (!finetune) {
            // The frozen components are the trained specialists.
            for (std::size_t k = 0; k < r.mixture->size(); ++k) {
              auto row = base_row(k == 0 ? "specialist-standard" : "specialist-shifted", seed);
              auto& comp = r.mixture->component(k);
              row.best_valid = evaluate(comp, valid_data);
              row.param_count = comp.param_count();
              row.epochs = r.stage1[k].valid_nll.size();
              row.best_epoch = r.stage1[k].best_epoch;
              row.wall_seconds = r.stage1[k].wall_seconds;
              row.report = r.stage1[k].to_json();
              rows.push_back(row);
            }
          }
        });
        rows.insert(rows.begin(), mix_row);
        return rows;
      });
    }
    tasks.push_back([&, seed] {
      auto row = base_row("scratch-mix", seed);
      guarded(row, [&] {
        auto r = train_mixture_scratch({pc_config(false, seed), pc_config(true, stream_seed(seed, 1))}, train_data,
                                       valid_data, train_spec(c["scratch"], seed));
        record(row, *r.mixture, r.report);
      });
      return std::vector<ResultRow>{row};
    });
    for (bool shifted : {false, true}) {
      tasks.push_back([&, seed, shifted] {
        auto row = base_row(shifted ? "single-shifted" : "single-standard", seed);
        BalancedPc pc(pc_config(shifted, seed));
        guarded(row, [&] { record(row, pc, train(pc, train_data, valid_data, train_spec(c["scratch"], seed))); });
        return std::vector<ResultRow>{row};
      });
    }
  }
  res.rows = run_tasks(tasks, jobs);
  res.summary = summarize(res.rows);

  // Best single: the strongest single-layout model, whether a specialist or
  // trained on all of the mixed data.
  double best = std::numeric_limits<double>::infinity();
  std::string best_name;
  for (const char* v : {"specialist-standard", "specialist-shifted", "single-standard", "single-shifted"}) {
    const double m = mean_of(res, std::string("variant=") + v);
    if (!(m >= best)) {
      best = m;
      best_name = v;
    }
  }
  const double margin = c.value("margin", 0.2);
  const double init = mean_of(res, "variant=init-mix"), scratch = mean_of(res, "variant=scratch-mix");
  res.checks.push_back({"init mix <= best single - " + fmt(margin), init <= best - margin,
                        "init mix " + fmt(init) + ", best single " + fmt(best) + " (" + best_name + ")"});
  res.checks.push_back({"scratch mix >= init mix", scratch >= init,
                        "scratch mix " + fmt(scratch) + ", init mix " + fmt(init)});
}

void run_rank_verify(const json& c, ExperimentResult& res) {
  const auto rep = run_rank_suite(c.value("scale", 1.0), c.value("seed", 7));
  auto count = [&](const char* name, const SuiteCount& s, int need) {
    res.checks.push_back({name, s.passed >= need && s.total > 0,
                          std::to_string(s.passed) + "/" + std::to_string(s.total) +
                              (s.skipped ? " (" + std::to_string(s.skipped) + " skipped)" : "")});
  };
  count("rank <= frontier bound", rep.frontier_bound_holds, rep.frontier_bound_holds.total + rep.frontier_bound_holds.skipped);
  count("separation rank == transfer rank", rep.transfer_matches_separation, rep.transfer_matches_separation.total);
  count("generic C=2 circuits reach rank 2", rep.full_rank_attained,
        static_cast<int>(std::ceil(0.9 * rep.full_rank_attained.total)));
  count("channel duplication drops rank to 1", rep.duplication_collapses, rep.duplication_collapses.total);
  res.checks.push_back({"selector: decomposable, not structured, no common vtree, exact conditionals",
                        rep.selector_ok(),
                        std::string(rep.common_vtree_found ? "common vtree found" : "no common vtree") +
                            "; structured=" + (rep.selector_structured ? "true" : "false") +
                            "; decomposable=" + (rep.selector_decomposable ? "true" : "false") +
                            "; max table error " + std::to_string(rep.selector_max_err)});
  const std::pair<Family, double> golden[] = {{Family::kHmm, 0.40e6}, {Family::kLogitHmm, 0.85e6}};
  for (auto [f, want] : golden) {
    const auto n = static_cast<double>(param_count(f, 8, 50257));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2fM", n / 1e6);
    res.checks.push_back({"param count " + family_name(f) + " d=8 V=50257", std::abs(n - want) < 0.005e6,
                          std::string(buf)});
  }
}

}  // namespace

nlohmann::json DataSpec::to_json() const {
  return {{"kind", kind_name(kind)}, {"n", n},           {"vocab", vocab},         {"train_rows", train_rows},
          {"valid_rows", valid_rows}, {"mix_p", mix_p}, {"task_seed", task_seed}, {"seed", seed}};
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
  DataSpec d;
  d.kind = parse_kind(j.value("kind", kind_name(d.kind)));
  d.n = j.value("n", d.n);
  d.vocab = j.value("vocab", d.vocab);
  d.train_rows = j.value("train_rows", d.train_rows);
  d.valid_rows = j.value("valid_rows", d.valid_rows);
  d.mix_p = j.value("mix_p", d.mix_p);
  d.task_seed = j.value("task_seed", d.task_seed);
  d.seed = j.value("seed", d.seed);
  if (d.kind == DataKind::kCharText) throw std::invalid_argument("data spec: text data is ingested, not generated");
  return d;
}

SequenceBatch DataSpec::train() const {
  return generate({kind, n, vocab, train_rows, stream_seed(seed, 1), mix_p, task_seed});
}

SequenceBatch DataSpec::valid() const {
  return generate({kind, n, vocab, valid_rows, stream_seed(seed, 2), mix_p, task_seed});
}

bool ExperimentResult::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return !checks.empty();
}

const CellSummary* ExperimentResult::find(const std::string& cell) const {
  for (const auto& s : summary)
    if (s.cell == cell) return &s;
  return nullptr;
}

nlohmann::json ExperimentResult::summary_json() const {
  json cells = json::array();
  for (const auto& s : summary) {
    cells.push_back({{"cell", s.cell}, {"runs", s.runs},
                     {"mean", std::isfinite(s.mean) ? json(s.mean) : json(nullptr)},
                     {"std", std::isfinite(s.std) ? json(s.std) : json(nullptr)}});
  }
  json cs = json::array();
  for (const auto& c : checks) cs.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  return {{"experiment", experiment}, {"cells", cells}, {"checks", cs}, {"passed", passed()},
          {"wall_seconds", wall_seconds}};
}

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"output-bottleneck", "layout-selectivity", "fixed-routing",
                                                 "mixture", "rank-verify"};
  return names;
}

nlohmann::json preset(const std::string& experiment, double scale) {
  if (!(scale > 0)) throw std::invalid_argument("scale must be positive");
  if (experiment == "output-bottleneck") return preset_output_bottleneck(scale);
  if (experiment == "layout-selectivity") return preset_layout_selectivity(scale);
  if (experiment == "fixed-routing") return preset_fixed_routing(scale);
  if (experiment == "mixture") return preset_mixture(scale);
  if (experiment == "rank-verify") return preset_rank_verify(scale);
  throw std::invalid_argument("unknown experiment: " + experiment);
}

ExperimentResult run_experiment(const nlohmann::json& config, std::size_t jobs) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult res;
  res.experiment = config.at("experiment").get<std::string>();
  res.config = config;
  if (res.experiment == "output-bottleneck") {
    run_output_bottleneck(config, jobs, res);
  } else if (res.experiment == "layout-selectivity") {
    run_layout_selectivity(config, jobs, res);
  } else if (res.experiment == "fixed-routing") {
    run_fixed_routing(config, jobs, res);
  } else if (res.experiment == "mixture") {
    run_mixture(config, jobs, res);
  } else if (res.experiment == "rank-verify") {
    run_rank_verify(config, res);
  } else {
    throw std::invalid_argument("unknown experiment: " + res.experiment);
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
        next = count;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

std::vector<CellSummary> summarize(const std::vector<ResultRow>& rows) {
  std::vector<CellSummary> out;
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : rows) {
    if (!values.count(r.cell)) out.push_back({r.cell});
    values[r.cell].push_back(r.best_valid);
  }
  for (auto& s : out) {
    const auto& v = values[s.cell];
    s.runs = v.size();
    double sum = 0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double sq = 0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.std = v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return out;
}

std::string csv_header() {
  return "experiment,cell,family,dataset,variant,d,seed,best_valid_nll,param_count,epochs,best_epoch,"
         "wall_seconds,status";
}

std::string csv_line(const ResultRow& r) {
  std::ostringstream os;
  auto quoted = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  char nll[32];
  if (std::isfinite(r.best_valid)) {
    std::snprintf(nll, sizeof nll, "%.6f", r.best_valid);
  } else {
    std::snprintf(nll, sizeof nll, "nan");
  }
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.2f", r.wall_seconds);
  os << r.experiment << ',' << quoted(r.cell) << ',' << r.family << ',' << r.dataset << ',' << r.variant << ','
     << r.d << ',' << r.seed << ',' << nll << ',' << r.param_count << ',' << r.epochs << ',' << r.best_epoch << ','
     << wall << ',' << quoted(r.status);
  return os.str();
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string write_results(const ExperimentResult& r, const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / (r.experiment + "-" + config_hash(r.config));
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  open("config.json") << r.config.dump(2) << '\n';
  {
    auto f = open("results.csv");
    f << csv_header() << '\n';
    for (const auto& row : r.rows) f << csv_line(row) << '\n';
  }
  open("summary.json") << r.summary_json().dump(2) << '\n';
  {
    auto f = open("reports.jsonl");
    for (const auto& row : r.rows) {
      f << json{{"cell", row.cell}, {"seed", row.seed}, {"status", row.status}, {"report", row.report}}.dump()
        << '\n';
    }
  }
  return dir.string();
}

}  // namespace pclab
