// Acceptance gate: every shipped claim checked end to end, one verdict
// line per criterion. Tolerances and budgets are pinned here, not in
// configs. Exits nonzero if anything fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ceip/flow.hpp"
#include "ceip/harness.hpp"
#include "ceip/mixture.hpp"
#include "ceip/retrieval.hpp"
#include "ceip/rl.hpp"
#include "ceip/rng.hpp"
#include "oracles.hpp"

using namespace ceip;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

MlpSpec spec_of(int in, std::vector<int> hidden, int out, bool bn = false) {
  MlpSpec s;
  s.input_dim = in;
  s.hidden_widths = std::move(hidden);
  s.output_dim = out;
  s.batchnorm = bn;
  return s;
}

void randomize(Vec& p, Rng& rng, double scale = 0.5) {
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = rng.normal() * scale;
}

ConditionedAffineFlow random_flow(int cond, int width, int q,
                                  std::uint64_t seed, Rng& rng,
                                  bool bn = false) {
  ConditionedAffineFlow f(spec_of(cond, {width}, q, bn),
                          spec_of(cond, {width}, q, bn), seed);
  Vec p = f.joint_params();
  randomize(p, rng);
  f.set_joint_params(p);
  return f;
}

Vec clip_unit(Vec a) { return a.cwiseMax(-1.0).cwiseMin(1.0); }

// ---- criterion 1: flow correctness ----

Outcome flow_correctness() {
  Rng rng(2024);
  double worst_rt = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int q = 1 + static_cast<int>(rng.uniform_int(0, 3));
    AffineMap m;
    m.scale.resize(q);
    m.shift.resize(q);
    Vec a(q);
    for (int j = 0; j < q; ++j) {
      m.scale[j] = std::exp(rng.uniform(-3.0, 3.0));
      m.shift[j] = rng.normal() * 2.0;
      a[j] = rng.normal() * 3.0;
    }
    const Vec back = affine_forward(m, affine_inverse(m, a));
    for (int j = 0; j < q; ++j) {
      const double rel = std::abs(back[j] - a[j]) / (1.0 + std::abs(a[j]));
      worst_rt = std::max(worst_rt, rel);
    }
  }
  if (worst_rt > 1e-9)
    return {false, fmt("round-trip rel err %.2e exceeds 1e-9", worst_rt)};

  double worst_mass = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    AffineMap m;
    m.scale = Vec::Constant(1, std::exp(rng.uniform(-1.5, 1.5)));
    m.shift = Vec::Constant(1, rng.normal());
    const double lo = m.shift[0] - 12.0 * m.scale[0];
    const double hi = m.shift[0] + 12.0 * m.scale[0];
    const double mass = oracles::simpson(
        [&](double x) {
          Vec a(1);
          a[0] = x;
          return std::exp(affine_log_likelihood(m, a));
        },
        lo, hi);
    worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
  }
  if (worst_mass > 1e-3)
    return {false, fmt("quadrature |mass-1| %.2e exceeds 1e-3", worst_mass)};

  AffineMap ident;
  ident.scale = Vec::Ones(2);
  ident.shift = Vec::Zero(2);
  const double ll0 = affine_log_likelihood(ident, Vec::Zero(2));
  const double err0 = std::abs(ll0 - (-std::log(2.0 * M_PI)));
  AffineMap two;
  two.scale = Vec::Constant(2, 2.0);
  two.shift = Vec::Zero(2);
  const double ll2 = affine_log_likelihood(two, Vec::Zero(2));
  const double err2 =
      std::abs(ll2 - (-std::log(2.0 * M_PI) - 2.0 * std::log(2.0)));
  if (err0 > 1e-9 || err2 > 1e-9)
    return {false,
            fmt("closed forms off: origin %.2e, scale-2 %.2e", err0, err2)};
  return {true, fmt("round-trip %.1e (tol 1e-9), |mass-1| %.1e (tol 1e-3), "
                    "closed forms %.1e/%.1e (tol 1e-9)",
                    worst_rt, worst_mass, err0, err2)};
}

// ---- criterion 2: gradient fidelity ----

Outcome gradient_fidelity() {
  Rng rng(777);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int cond = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const int q = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const bool bn = trial % 2 == 1;
    ConditionedAffineFlow flow =
        random_flow(cond, 6, q, 300 + trial, rng, bn);
    std::vector<UaPair> batch;
    for (int i = 0; i < 6; ++i) {
      UaPair pair;
      pair.u = Vec(cond);
      pair.a = Vec(q);
      for (int j = 0; j < cond; ++j) pair.u[j] = rng.normal();
      for (int j = 0; j < q; ++j) pair.a[j] = rng.normal();
      batch.push_back(pair);
    }
    Vec analytic;
    flow_loss_grad(flow, batch, &analytic);
    const Vec fd = oracles::fd_gradient(
        [&](const Vec& params) {
          ConditionedAffineFlow probe = flow;
          probe.set_joint_params(params);
          return flow_loss_grad(probe, batch, nullptr);
        },
        flow.joint_params());
    worst = std::max(worst, oracles::grad_rel_err(analytic, fd));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const int n_bases = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const int q = 1 + static_cast<int>(rng.uniform_int(0, 1));
    const int cond = 1 + static_cast<int>(rng.uniform_int(0, 1));
    const bool bn = trial % 2 == 1;
    std::vector<ConditionedAffineFlow> bases;
    for (int i = 0; i < n_bases; ++i)
      bases.push_back(random_flow(cond, 5, q, 900 + trial * 8 + i, rng));
    CombinedFlow cf(std::move(bases), spec_of(cond, {6}, 2 * n_bases, bn),
                    40 + trial);
    randomize(cf.coeff_net().params(), rng);
    std::vector<UaPair> batch;
    for (int i = 0; i < 5; ++i) {
      UaPair pair;
      pair.u = Vec(cond);
      pair.a = Vec(q);
      for (int j = 0; j < cond; ++j) pair.u[j] = rng.normal();
      for (int j = 0; j < q; ++j) pair.a[j] = rng.normal();
      batch.push_back(pair);
    }
    Vec analytic;
    combination_loss_grad(cf, batch, &analytic);
    const Vec fd = oracles::fd_gradient(
        [&](const Vec& params) {
          CombinedFlow probe = cf;
          probe.coeff_net().params() = params;
          return combination_loss_grad(probe, batch, nullptr);
        },
        cf.coeff_net().params());
    worst = std::max(worst, oracles::grad_rel_err(analytic, fd));
  }
  if (worst > 1e-4)
    return {false, fmt("worst rel err %.2e exceeds 1e-4", worst)};
  return {true, fmt("100 configs, worst rel err %.1e (tol 1e-4)", worst)};
}

// ---- criterion 3: MLE recovery ----

Outcome mle_recovery() {
  Rng rng(7);
  std::vector<UaPair> pairs;
  Vec u(1);
  u << 0.5;
  for (int i = 0; i < 5000; ++i) {
    Vec a(1);
    a << 2.0 * rng.normal() + 1.0;
    pairs.push_back({u, a});
  }
  ConditionedAffineFlow flow(spec_of(1, {32}, 1), spec_of(1, {32}, 1), 3);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 40;
  cfg.seed = 11;
  train_single_flow(flow, pairs, cfg);
  const AffineMap m = flow.effective_affine(u);
  const bool ok =
      std::abs(m.scale[0] - 2.0) <= 0.1 && std::abs(m.shift[0] - 1.0) <= 0.05;
  return {ok, fmt("scale %.4f (want 2 +- 0.1), shift %.4f (want 1 +- 0.05)",
                  m.scale[0], m.shift[0])};
}

// ---- criterion 4: mixture correctness ----

Outcome mixture_correctness() {
  Rng rng(91);
  const int cond = 2, q = 2, n = 3;
  std::vector<ConditionedAffineFlow> bases;
  for (int i = 0; i < n; ++i)
    bases.push_back(random_flow(cond, 5, q, 500 + i, rng));

  CombinedFlow cf(bases, spec_of(cond, {16}, 2 * n), 9);
  double worst_onehot = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    Vec u(cond);
    for (int j = 0; j < cond; ++j) u[j] = rng.normal();
    for (int j = 0; j < n; ++j) {
      Vec onehot = Vec::Zero(n);
      onehot[j] = 1.0;
      cf.inject_coefficients(onehot, onehot);
      const AffineMap got = cf.effective_affine(u);
      const AffineMap want = bases[j].effective_affine(u);
      worst_onehot = std::max(
          {worst_onehot, (got.scale - want.scale).cwiseAbs().maxCoeff(),
           (got.shift - want.shift).cwiseAbs().maxCoeff()});
    }
  }
  cf.clear_injection();
  if (worst_onehot > 1e-12)
    return {false, fmt("onehot mismatch %.2e exceeds 1e-12", worst_onehot)};

  const int j = 1;
  std::vector<std::string> before;
  for (const auto& b : cf.bases()) before.push_back(flow_digest(b));
  auto draw_pair = [&] {
    UaPair p;
    p.u = Vec(cond);
    for (int d = 0; d < cond; ++d) p.u[d] = rng.normal();
    Vec z(q);
    for (int d = 0; d < q; ++d) z[d] = rng.normal();
    p.a = affine_forward(bases[j].effective_affine(p.u), z);
    return p;
  };
  std::vector<UaPair> train, val;
  for (int i = 0; i < 2500; ++i) train.push_back(draw_pair());
  for (int i = 0; i < 600; ++i) val.push_back(draw_pair());
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 40;
  cfg.seed = 21;
  train_combination(cf, train, cfg);

  double base_nll = 0.0;
  for (const auto& p : val)
    base_nll -= affine_log_likelihood(bases[j].effective_affine(p.u), p.a);
  base_nll /= static_cast<double>(val.size());
  const double cf_nll = combination_eval_nll(cf, val);

  for (std::size_t i = 0; i < before.size(); ++i)
    if (flow_digest(cf.bases()[i]) != before[i])
      return {false, fmt("base %zu digest changed by combination training", i)};
  if (cf_nll > base_nll + 0.1)
    return {false, fmt("combination val NLL %.4f vs base %.4f (+0.1 allowed)",
                       cf_nll, base_nll)};
  return {true,
          fmt("onehot %.1e (tol 1e-12), val NLL %.4f vs base %.4f "
              "(tol +0.1), digests frozen",
              worst_onehot, cf_nll, base_nll)};
}

// ---- criterion 5: PARROT reduction ----

Outcome parrot_reduction() {
  Rng rng(13);
  ConditionedAffineFlow flow = random_flow(3, 6, 2, 88, rng);
  PriorBundle bundle;
  bundle.flow = CombinedFlow({flow}, spec_of(3, {1}, 2), 5);
  bundle.flow.inject_coefficients(Vec::Ones(1), Vec::Ones(1));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Vec s(3), z(2);
    for (int j = 0; j < 3; ++j) s[j] = rng.normal();
    for (int j = 0; j < 2; ++j) z[j] = rng.uniform(-3.0, 3.0);
    const Vec got = prior_step(bundle, s, z);
    const Vec want = clip_unit(affine_forward(flow.effective_affine(s), z));
    worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
  }
  if (worst > 1e-12)
    return {false, fmt("bundle/direct mismatch %.2e exceeds 1e-12", worst)};
  return {true, fmt("100 steps, max |bundle - direct| %.1e (tol 1e-12)",
                    worst)};
}

// ---- criterion 6: push-forward property ----

TransitionTriple triple1d(double s, double s_next, int traj, int step) {
  TransitionTriple t;
  t.s = Vec::Constant(1, s);
  t.a = Vec::Zero(1);
  t.s_next = Vec::Constant(1, s_next);
  t.traj_id = traj;
  t.step_index = step;
  return t;
}

Outcome push_forward() {
  // 1-D fixture: keys 0.0 -> next 1.0 (step 0), 0.5 -> next 2.0 (step 1)
  {
    RetrievalDatabase db({triple1d(0.0, 1.0, 0, 0), triple1d(0.5, 2.0, 0, 1)},
                         1.0);
    const Vec s = Vec::Zero(1);
    const auto first = db.retrieve_next(s);
    if (first.s_next[0] != 1.0 || db.markers()[0] != 0)
      return {false, "fixture: fresh query did not pick key 0.0 -> 1.0"};
    const auto second = db.retrieve_next(s);
    if (second.s_next[0] != 2.0)
      return {false, "fixture: penalized re-query did not advance to 2.0"};
    RetrievalDatabase nn({triple1d(0.0, 1.0, 0, 0), triple1d(0.5, 2.0, 0, 1)},
                         0.0);
    nn.retrieve_next(s);
    if (nn.retrieve_next(s).s_next[0] != 1.0)
      return {false, "fixture: C = 0 re-query left nearest neighbor"};
  }

  // strict forward progress needs C above the largest key-distance gap,
  // so keys and query stay inside a +-0.3 box (gap <= 0.36 < C = 1)
  Rng rng(606);
  for (int trial = 0; trial < 30; ++trial) {
    const int len = 3 + static_cast<int>(rng.uniform_int(0, 5));
    std::vector<TransitionTriple> ts;
    for (int i = 0; i < len; ++i)
      ts.push_back(triple1d(rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 1.0), 0,
                            i));
    RetrievalDatabase db(ts, 1.0);
    Vec s = Vec::Constant(1, rng.uniform(-0.3, 0.3));
    int prev = -1;
    for (int k = 0; k < len; ++k) {
      const auto got = db.retrieve_next(s);
      if (got.step_index <= prev)
        return {false, fmt("constant query indices not strictly increasing "
                           "(trial %d)",
                           trial)};
      prev = got.step_index;
    }
    if (prev != len - 1)
      return {false, fmt("constant query stopped at %d of %d", prev, len - 1)};
  }

  Rng brng(402);
  for (int trial = 0; trial < 1000; ++trial) {
    const int ds = 1 + static_cast<int>(brng.uniform_int(0, 2));
    const int n_traj = 1 + static_cast<int>(brng.uniform_int(0, 2));
    std::vector<TransitionTriple> ts;
    for (int tr = 0; tr < n_traj; ++tr) {
      const int len = 2 + static_cast<int>(brng.uniform_int(0, 3));
      for (int i = 0; i < len; ++i) {
        TransitionTriple t;
        t.s = Vec(ds);
        t.s_next = Vec(ds);
        t.a = Vec::Zero(1);
        for (int d = 0; d < ds; ++d) {
          t.s[d] = brng.uniform(-1.0, 1.0);
          t.s_next[d] = brng.uniform(-1.0, 1.0);
        }
        t.traj_id = tr;
        t.step_index = i;
        ts.push_back(t);
      }
    }
    RetrievalDatabase db(ts, 0.0);
    for (int qi = 0; qi < 5; ++qi) {
      Vec s(ds);
      for (int d = 0; d < ds; ++d) s[d] = brng.uniform(-1.0, 1.0);
      const auto got = db.retrieve_next(s);
      // transitions are in (traj, step) order, so first strict minimum
      // reproduces the lexicographic tie-break
      std::size_t best = 0;
      for (std::size_t i = 1; i < ts.size(); ++i)
        if ((ts[i].s - s).squaredNorm() < (ts[best].s - s).squaredNorm())
          best = i;
      if (got.traj_id != ts[best].traj_id ||
          got.step_index != ts[best].step_index)
        return {false, fmt("C = 0 differs from brute force (trial %d)",
                           trial)};
    }
  }
  return {true, "fixture outcomes exact, constant-query indices strictly "
                "increase, C = 0 == brute force on 1000 databases"};
}

// ---- criteria 7-11: experiment pipelines on the shipped configs ----

fs::path out_root() {
  return fs::temp_directory_path() / "ceip-acceptance";
}

ExperimentConfig load_config(const std::string& name, const char* criterion) {
  ExperimentConfig cfg =
      ExperimentConfig::load(std::string(CEIP_CONFIG_DIR) + "/" + name);
  fs::path out = out_root() / criterion;
  fs::remove_all(out);
  cfg.out = out.string();
  return cfg;
}

double mean_final_return(const std::vector<RunOutcome>& runs) {
  double acc = 0.0;
  for (const auto& r : runs) acc += r.final_return;
  return acc / static_cast<double>(runs.size());
}

double mean_final_subtasks(const std::vector<RunOutcome>& runs) {
  double acc = 0.0;
  for (const auto& r : runs) acc += r.final_subtasks;
  return acc / static_cast<double>(runs.size());
}

Outcome desk_rl_headline() {
  ExperimentConfig cfg = load_config("point_reach.json", "c7");
  cfg.variant = "CEIP";
  const double ceip = mean_final_return(run_pipeline(cfg, {}, false));
  cfg.variant = "naive";
  const double naive = mean_final_return(run_pipeline(cfg, {}, false));
  const bool ok = ceip >= -15.0 && ceip - naive >= 10.0;
  return {ok, fmt("CEIP mean final return %.2f (floor -15), naive %.2f "
                  "(gap %.2f, floor 10), 5 seeds",
                  ceip, naive, ceip - naive)};
}

Outcome ablation_ordering() {
  ExperimentConfig cfg = load_config("waypoint_stall.json", "c8");
  cfg.variant = "CEIP+TS+EX+forward";
  const double fwd = mean_final_subtasks(run_pipeline(cfg, {}, false));
  cfg.variant = "CEIP+TS+EX";
  const double plain = mean_final_subtasks(run_pipeline(cfg, {}, false));
  return {fwd > plain,
          fmt("mean subtasks with push-forward %.2f vs without %.2f "
              "(strict >), 5 seeds",
              fwd, plain)};
}

Outcome missing_subtask() {
  ExperimentConfig cfg = load_config("waypoint_missing.json", "c9");
  cfg.variant = "CEIP+TS+EX+forward";
  const double with_ts = mean_final_subtasks(run_pipeline(cfg, {}, false));
  cfg.variant = "CEIP+EX+forward";
  const double without = mean_final_subtasks(run_pipeline(cfg, {}, false));
  return {with_ts > without,
          fmt("mean subtasks with TS flow %.2f vs without %.2f (strict >), "
              "5 seeds",
              with_ts, without)};
}

Outcome bc_ordering() {
  ExperimentConfig cfg = load_config("waypoint.json", "c10");
  cfg.variant = "BC+EX";
  const double bc_ex = mean_final_subtasks(run_pipeline(cfg, {}, false));
  cfg.variant = "BC";
  const double bc = mean_final_subtasks(run_pipeline(cfg, {}, false));
  return {bc_ex >= bc,
          fmt("mean subtasks BC+EX %.2f vs BC %.2f (>=), 5 seeds", bc_ex, bc)};
}

std::vector<char> slurp_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome reproducibility() {
  ExperimentConfig base =
      ExperimentConfig::load(std::string(CEIP_CONFIG_DIR) +
                             "/waypoint_stall.json");
  base.variant = "CEIP+TS+EX+forward";
  base.seeds = {0};
  fs::path roots[2] = {out_root() / "c11a", out_root() / "c11b"};
  std::string run_dirs[2];
  for (int i = 0; i < 2; ++i) {
    fs::remove_all(roots[i]);
    ExperimentConfig cfg = base;
    cfg.out = roots[i].string();
    run_dirs[i] = run_pipeline(cfg, {}, false).front().dir;
  }
  int compared = 0;
  for (const auto& entry : fs::directory_iterator(roots[0] / "cache")) {
    if (entry.path().extension() != ".ckpt") continue;
    const fs::path twin = roots[1] / "cache" / entry.path().filename();
    if (!fs::exists(twin))
      return {false, fmt("checkpoint %s missing from repeat run",
                         entry.path().filename().c_str())};
    if (slurp_bytes(entry.path()) != slurp_bytes(twin))
      return {false, fmt("checkpoint %s differs between runs",
                         entry.path().filename().c_str())};
    ++compared;
  }
  if (compared == 0) return {false, "no checkpoints produced"};
  const auto csv_a = slurp_bytes(fs::path(run_dirs[0]) / "eval.csv");
  const auto csv_b = slurp_bytes(fs::path(run_dirs[1]) / "eval.csv");
  if (csv_a.empty() || csv_a != csv_b)
    return {false, "eval.csv differs between runs"};
  return {true, fmt("%d checkpoints and eval.csv bit-identical across two "
                    "runs",
                    compared)};
}

}  // namespace

int main() {
  std::printf("acceptance gate: configs from %s\n", CEIP_CONFIG_DIR);
  int failures = 0;
  auto criterion = [&](int num, const char* label, double budget_s,
                       const std::function<Outcome()>& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double dt =
        std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_budget = budget_s <= 0.0 || dt <= budget_s;
    const bool pass = o.pass && in_budget;
    if (!pass) ++failures;
    std::string timing = budget_s > 0.0
                             ? fmt("[%.1fs, budget %.0fs]", dt, budget_s)
                             : fmt("[%.1fs]", dt);
    std::printf("criterion %2d %s  %s: %s  %s\n", num, pass ? "PASS" : "FAIL",
                label, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  };

  criterion(1, "flow correctness", 10, flow_correctness);
  criterion(2, "gradient fidelity", 30, gradient_fidelity);
  criterion(3, "MLE recovery", 60, mle_recovery);
  criterion(4, "mixture correctness", 120, mixture_correctness);
  criterion(5, "single-flow reduction", 5, parrot_reduction);
  criterion(6, "push-forward retrieval", 10, push_forward);
  criterion(7, "point-reach headline", 1200, desk_rl_headline);
  criterion(8, "push-forward ablation", 1200, ablation_ordering);
  criterion(9, "missing-subtask effect", 1200, missing_subtask);
  criterion(10, "behavior-cloning ordering", 0, bc_ordering);
  criterion(11, "bit-exact reproducibility", 0, reproducibility);

  if (failures == 0)
    std::printf("RESULT: 11/11 PASS\n");
  else
    std::printf("RESULT: %d criterion(s) FAILED\n", failures);
  return failures == 0 ? 0 : 1;
}
