#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ceip/numerics.hpp"

namespace ceip {

struct Trajectory {
  std::vector<Vec> states;   // dim ds
  std::vector<Vec> actions;  // dim q, inside the action box
  std::string task_label;    // empty = unlabeled

  int length() const { return static_cast<int>(states.size()); }
};

struct TransitionTriple {
  Vec s, a, s_next;
  int traj_id = 0;
  int step_index = 0;
};

struct DatasetMeta {
  std::string env;
  int ds = 0;
  int q = 0;
  std::uint64_t seed = 0;
  std::string generator;
};

struct DemoDataset {
  std::vector<std::vector<Trajectory>> clusters;  // D_1 .. D_n
  std::vector<Trajectory> task_specific;          // D_{n+1}
  DatasetMeta meta;

  int n_clusters() const { return static_cast<int>(clusters.size()); }
};

struct ClusterAssignment {
  int k = 0;
  std::vector<Vec> centroids;
  std::vector<int> labels;  // feature index -> cluster id
  double objective = 0.0;
  std::vector<double> objective_trace;  // after each assignment pass
};

struct UaPair {
  Vec u;  // condition: s or [s, s_next]
  Vec a;  // action
};

// JSON-lines trajectory files; one trajectory per line, sidecar
// <path>.meta.json with env/dims/seed info.
void save_trajectories(const std::string& path,
                       const std::vector<Trajectory>& trajs,
                       const DatasetMeta& meta);
std::vector<Trajectory> load_trajectories(const std::string& path,
                                          DatasetMeta* meta = nullptr);

// Groups a flat file into clusters by task label (order of first
// appearance); task_specific stays empty.
DemoDataset load_dataset(const std::string& path);

std::pair<std::vector<UaPair>, std::vector<UaPair>> split_train_val(
    const std::vector<UaPair>& pairs, double ratio, std::uint64_t seed);

ClusterAssignment kmeans_cluster(const std::vector<Vec>& features, int k,
                                 std::uint64_t seed, int max_iters = 100);

// Condition/action training pairs; u = [s, s_next] when with_explicit.
std::vector<UaPair> build_condition_pairs(const std::vector<Trajectory>& trajs,
                                          bool with_explicit);

std::vector<Vec> last_states(const std::vector<Trajectory>& trajs);

std::vector<TransitionTriple> collect_transitions(
    const std::vector<Trajectory>& trajs);

}  // namespace ceip
