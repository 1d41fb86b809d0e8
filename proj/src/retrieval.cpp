#include "ceip/retrieval.hpp"

#include <map>

#include "ceip/errors.hpp"

namespace ceip {

RetrievalDatabase::RetrievalDatabase(std::vector<TransitionTriple> transitions,
                                     double penalty)
    : transitions_(std::move(transitions)), penalty_(penalty) {
  std::map<int, int> slot;
  slot_of_.reserve(transitions_.size());
  for (const auto& t : transitions_) {
    auto [it, inserted] = slot.try_emplace(t.traj_id, static_cast<int>(slot.size()));
    slot_of_.push_back(it->second);
  }
  traj_ids_.resize(slot.size());
  for (const auto& [id, s] : slot) traj_ids_[s] = id;
  markers_.assign(slot.size(), -1);
}

int RetrievalDatabase::state_dim() const {
  return transitions_.empty() ? 0 : static_cast<int>(transitions_[0].s.size());
}

void RetrievalDatabase::reset_episode() {
  markers_.assign(markers_.size(), -1);
}

RetrievedTransition RetrievalDatabase::retrieve_next(const Vec& s) {
  if (transitions_.empty()) throw ConfigError("empty retrieval database");
  if (s.size() != transitions_[0].s.size())
    throw ShapeError("query state dim mismatch");

  int best = -1;
  double best_cost = 0.0;
  for (int i = 0; i < static_cast<int>(transitions_.size()); ++i) {
    const auto& t = transitions_[i];
    double cost = (t.s - s).squaredNorm();
    if (t.step_index <= markers_[slot_of_[i]]) cost += penalty_;
    if (best < 0 || cost < best_cost) {
      best = i;
      best_cost = cost;
    } else if (cost == best_cost) {
      const auto& bt = transitions_[best];
      if (t.traj_id < bt.traj_id ||
          (t.traj_id == bt.traj_id && t.step_index < bt.step_index))
        best = i;
    }
  }

  const auto& win = transitions_[best];
  markers_[slot_of_[best]] = win.step_index;
  return {win.s_next, win.traj_id, win.step_index};
}

Vec make_condition(const Vec& s, const Vec& s_next_hat) {
  if (s.size() != s_next_hat.size()) throw ShapeError("condition dim mismatch");
  Vec u(2 * s.size());
  u << s, s_next_hat;
  return u;
}

}  // namespace ceip
