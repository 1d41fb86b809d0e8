#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ceip/errors.hpp"
#include "ceip/harness.hpp"

namespace {

struct Opts {
  std::string config;
  std::string variant;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

void add_common(CLI::App* cmd, Opts& o) {
  cmd->add_option("--config", o.config, "experiment configuration JSON");
  cmd->add_option("--variant", o.variant, "variant name (ablate: comma list)");
  cmd->add_option("--out", o.out, "output directory override");
  cmd->add_option("--seed", o.seed, "run a single seed instead of the list");
  cmd->add_flag("--resume", o.resume, "reuse finished runs with a matching hash");
}

ceip::ExperimentConfig resolve(const Opts& o) {
  ceip::ExperimentConfig cfg = o.config.empty()
                                   ? ceip::ExperimentConfig{}
                                   : ceip::ExperimentConfig::load(o.config);
  if (!o.variant.empty()) cfg.variant = o.variant;
  if (!o.out.empty()) cfg.out = o.out;
  if (o.seed) cfg.seeds = {*o.seed};
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t comma = s.find(',', start);
    if (comma == std::string::npos) {
      if (start < s.size()) out.push_back(s.substr(start));
      break;
    }
    if (comma > start) out.push_back(s.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

void print_runs(const std::vector<ceip::RunOutcome>& runs) {
  for (const ceip::RunOutcome& r : runs) {
    std::cout << r.dir << "  final_return=" << r.final_return
              << "  final_subtasks=" << r.final_subtasks;
    if (r.report.aborted) std::cout << "  [aborted]";
    if (r.reused) std::cout << "  [resumed]";
    std::cout << "\n";
  }
}

int dispatch(int argc, char** argv) {
  CLI::App app{
      "demonstration-guided RL pipeline: flow priors, transition retrieval, "
      "soft actor-critic over the latent action space"};
  app.require_subcommand(1);
  Opts o;
  std::vector<std::string> curve_dirs;
  std::string curves_out = "curves.csv";

  CLI::App* gen = app.add_subcommand("gen-data", "generate demonstration sets");
  CLI::App* cluster = app.add_subcommand("cluster", "cluster the task-agnostic pool");
  CLI::App* flows = app.add_subcommand("train-flows", "train the variant's base flows");
  CLI::App* combo = app.add_subcommand("train-combo", "train the combination coefficients");
  CLI::App* rl = app.add_subcommand("train-rl", "train and evaluate the policy");
  CLI::App* pipe = app.add_subcommand("pipeline", "run every stage for one variant");
  CLI::App* ablate = app.add_subcommand("ablate", "run the variant table and summarize");
  CLI::App* curves = app.add_subcommand("curves", "merge run reports into one CSV");
  for (CLI::App* c : {gen, cluster, flows, combo, rl, pipe, ablate}) add_common(c, o);
  curves->add_option("dirs", curve_dirs, "run directories (or roots) to merge");
  curves->add_option("--out", curves_out, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad flags are configuration errors
  }

  if (gen->parsed()) {
    ceip::Pipeline p(resolve(o));
    for (const std::string& f : p.ensure_data()) std::cout << f << "\n";
    return 0;
  }
  if (cluster->parsed()) {
    ceip::Pipeline p(resolve(o));
    p.ensure_data();
    std::cout << p.ensure_cluster() << "\n";
    return 0;
  }
  if (flows->parsed()) {
    ceip::ExperimentConfig cfg = resolve(o);
    ceip::Pipeline p(cfg);
    ceip::VariantSpec vs = ceip::variant_spec(cfg.variant);
    using P = ceip::VariantSpec::Prior;
    if (vs.prior == P::combination) {
      for (const std::string& f : p.ensure_ta_flows(vs.use_explicit))
        std::cout << f << "\n";
      if (vs.include_ts) std::cout << p.ensure_ts_flow(vs.use_explicit) << "\n";
    } else if (vs.prior == P::parrot) {
      std::cout << (vs.parrot_data == "ts"
                        ? p.ensure_ts_flow(vs.use_explicit)
                        : p.ensure_pooled_flow(vs.parrot_data, vs.use_explicit))
                << "\n";
    } else {
      std::cout << "variant " << cfg.variant << " trains no flows\n";
    }
    return 0;
  }
  if (combo->parsed()) {
    ceip::ExperimentConfig cfg = resolve(o);
    ceip::VariantSpec vs = ceip::variant_spec(cfg.variant);
    if (vs.prior != ceip::VariantSpec::Prior::combination) {
      std::cout << "variant " << cfg.variant << " has no combination stage\n";
      return 0;
    }
    ceip::Pipeline p(cfg);
    std::cout << p.ensure_combination(vs.include_ts, vs.use_explicit) << "\n";
    return 0;
  }
  if (rl->parsed() || pipe->parsed()) {
    ceip::ExperimentConfig cfg = resolve(o);
    print_runs(ceip::run_pipeline(cfg, {}, o.resume));
    return 0;
  }
  if (ablate->parsed()) {
    ceip::ExperimentConfig cfg = o.config.empty()
                                     ? ceip::ExperimentConfig{}
                                     : ceip::ExperimentConfig::load(o.config);
    if (!o.out.empty()) cfg.out = o.out;
    if (o.seed) cfg.seeds = {*o.seed};
    cfg.validate();
    std::vector<std::string> variants =
        o.variant.empty() ? std::vector<std::string>{} : split_list(o.variant);
    std::cout << ceip::run_ablation(cfg, variants, {}, o.resume) << "\n";
    return 0;
  }
  if (curves->parsed()) {
    int n = ceip::write_curves(curve_dirs, curves_out);
    std::cout << curves_out << "  (" << n << " rows)\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ceip::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ceip::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ceip::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
