#pragma once

#include <vector>

#include "ceip/dataset.hpp"

namespace ceip {

struct RetrievedTransition {
  Vec s_next;
  int traj_id = 0;
  int step_index = 0;
};

// Explicit prior: task-specific transitions queried by nearest state key
// under a push-forward penalty. Each trajectory carries a last-referenced
// marker r; querying penalizes steps at or before r in their trajectory
// and advances the winning trajectory's marker, so a repeated query walks
// forward through the demonstration instead of getting stuck.
class RetrievalDatabase {
 public:
  RetrievalDatabase() = default;
  RetrievalDatabase(std::vector<TransitionTriple> transitions,
                    double penalty = 1.0);

  bool empty() const { return transitions_.empty(); }
  int size() const { return static_cast<int>(transitions_.size()); }
  double penalty() const { return penalty_; }
  int state_dim() const;
  const std::vector<TransitionTriple>& transitions() const {
    return transitions_;
  }
  const std::vector<int>& markers() const { return markers_; }

  // All markers back to -1 (episode start).
  void reset_episode();

  // argmin over transitions of |s_key - s|^2 + C * [step_index <= r(traj)],
  // ties broken by smallest (traj_id, step_index); advances the winning
  // trajectory's marker to the chosen step.
  RetrievedTransition retrieve_next(const Vec& s);

 private:
  std::vector<TransitionTriple> transitions_;
  std::vector<int> markers_;         // indexed by dense trajectory slot
  std::vector<int> traj_ids_;        // slot -> original traj_id
  std::vector<int> slot_of_;         // per-transition trajectory slot
  double penalty_ = 1.0;
};

// u = [s, s_next_hat], the condition fed to flows when the explicit prior
// is active.
Vec make_condition(const Vec& s, const Vec& s_next_hat);

}  // namespace ceip
