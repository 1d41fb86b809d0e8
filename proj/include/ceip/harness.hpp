#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ceip/dataset.hpp"
#include "ceip/envworld.hpp"
#include "ceip/mixture.hpp"
#include "ceip/rl.hpp"
#include "json.hpp"

namespace ceip {

// Hidden widths + batchnorm; input/output dims are resolved from the
// environment and the conditioning mode when the net is built.
struct NetSpec {
  std::vector<int> hidden{32};
  bool batchnorm = false;
};

// One experiment, resolved from a single JSON file with defaults filled
// in. The defaults describe the point-reach setup: eight task-agnostic
// directions, a 4.5 target azimuth, eight clusters.
struct ExperimentConfig {
  std::string name = "point-reach";

  std::string env_kind = "point_reach";  // or "waypoint_chain"
  PointReachConfig reach;
  WaypointChainConfig chain;

  std::vector<double> ta_directions{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<std::vector<Vec>> ta_chains;  // waypoint tasks
  int ta_trajs_per_task = 40;
  int ts_trajs = 4;
  ExpertConfig expert;
  std::uint64_t data_seed = 1234;

  int cluster_k = 8;
  std::uint64_t cluster_seed = 7;

  NetSpec flow_net;
  TrainConfig flow_train;
  NetSpec combo_net;
  TrainConfig combo_train;
  NetSpec bc_net{{64}, false};
  TrainConfig bc_train;

  SacConfig rl;
  double retrieval_penalty = 1.0;

  std::string variant = "CEIP";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string out = "runs";

  int n_tasks() const;
  void validate() const;

  // canonical resolved form: every field present, keys sorted on dump
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
};

// Hash of the experiment identity: the canonical JSON minus variant,
// seeds and output directory (those select runs, they don't change what
// is being trained). Embedded in every artifact this pipeline writes.
std::string config_hash(const ExperimentConfig& cfg);
// per-run hash: experiment identity + effective variant + seed
std::string run_hash(const ExperimentConfig& cfg, const std::string& variant,
                     std::uint64_t seed);

struct VariantSpec {
  enum class Prior { combination, parrot, bc, replay, naive };
  Prior prior = Prior::combination;
  bool include_ts = false;       // task-specific flow among the bases
  std::string parrot_data;       // "ta" | "ts" | "pooled"
  bool use_explicit = false;
  bool use_forward = false;

  bool trains_rl() const { return prior != Prior::bc && prior != Prior::replay; }
};

const std::vector<std::string>& variant_names();
// throws ConfigError listing the valid names
VariantSpec variant_spec(const std::string& name);

struct RunOutcome {
  std::string dir;
  EvalReport report;
  double final_return = 0.0;
  double final_subtasks = 0.0;
  bool reused = false;
};

// Stage driver. Every ensure_* call is content-addressed by the hash of
// the config sections it depends on: a matching artifact on disk is
// reused as-is, so ablation variants share flows and reruns resume at
// stage boundaries for free.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }

  std::vector<std::string> ensure_data();
  std::string ensure_cluster(ClusterAssignment* out = nullptr);
  std::vector<std::string> ensure_ta_flows(bool with_explicit);
  std::string ensure_ts_flow(bool with_explicit);
  // which: "ta" (pooled task-agnostic) or "pooled" (TA + TS)
  std::string ensure_pooled_flow(const std::string& which, bool with_explicit);
  std::string ensure_combination(bool include_ts, bool with_explicit);

  // Trains (or resumes) one variant/seed run and writes
  // <out>/runs/<variant>/seed<k>/{eval.csv, run.json, policy.ckpt}.
  RunOutcome run_variant(const std::string& variant, std::uint64_t seed,
                         bool resume);

  // deployment-ready prior for a variant, artifacts built on demand
  PriorBundle build_bundle(const std::string& variant);
  EnvFactory env_factory() const;

 private:
  std::vector<Trajectory>& ta_pool();
  std::vector<Trajectory>& ts_pool();
  std::vector<std::vector<Trajectory>> clustered_tasks();
  ConditionedAffineFlow train_flow_on(const std::vector<Trajectory>& trajs,
                                      bool with_explicit,
                                      const std::string& seed_tag);
  std::string flow_path(const nlohmann::json& key) const;
  int state_dim() const;
  int act_dim() const;

  ExperimentConfig cfg_;
  std::string data_hash_, cluster_hash_;
  std::optional<std::vector<Trajectory>> ta_cache_, ts_cache_;
  std::optional<ClusterAssignment> cluster_cache_;
};

// Full pipeline for cfg.variant over the given seeds (empty = cfg.seeds);
// stage failures rethrow with the stage name prefixed.
std::vector<RunOutcome> run_pipeline(const ExperimentConfig& cfg,
                                     const std::vector<std::uint64_t>& seeds,
                                     bool resume);

// Runs every listed variant over the seeds and writes <out>/ablation.csv
// (final mean +- std. per variant). Empty variant list = the whole table.
std::string run_ablation(const ExperimentConfig& cfg,
                         std::vector<std::string> variants,
                         const std::vector<std::uint64_t>& seeds, bool resume);

// Merges run directories into a long-form (variant, seed, step, return)
// CSV; directories without a readable report are warned about and
// skipped. Returns the number of data rows written.
int write_curves(const std::vector<std::string>& run_dirs,
                 const std::string& out_csv);

}  // namespace ceip
