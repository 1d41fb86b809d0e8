#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ceip/dataset.hpp"
#include "ceip/rng.hpp"

namespace ceip {

struct StepResult {
  Vec state;
  double reward = 0.0;
  bool done = false;
  bool truncated = false;  // done by time limit rather than task completion
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int horizon() const = 0;
  virtual Vec reset(std::uint64_t seed) = 0;
  virtual StepResult step(const Vec& a) = 0;
  virtual int subtasks_completed() const { return 0; }
};

using EnvFactory = std::function<std::unique_ptr<Env>()>;

// Reach a hidden goal placed at a fixed distance along a configured
// azimuth; -1 reward per step outside the goal vicinity, 0 inside, fixed
// 40-step episodes. State is position + one-step delta + a constant
// gripper scalar padded to 10 dims.
struct PointReachConfig {
  double direction = 0.0;  // azimuth in units of pi/4
  double goal_distance = 0.3;
  double goal_noise = 0.015;
  double reach_threshold = 0.05;
  double step_scale = 0.033;
  int horizon = 40;
  bool warmup = true;  // random drift for U{5..20} steps before the episode
  // Scale on the warmup action; keeps the drifted start close enough that
  // the straight-line optimum stays near -10 in the kinematic dynamics.
  double warmup_action_scale = 0.25;
};

class PointReachEnv final : public Env {
 public:
  static constexpr int kStateDim = 10;
  static constexpr int kActionDim = 4;

  explicit PointReachEnv(PointReachConfig cfg);

  int state_dim() const override { return kStateDim; }
  int action_dim() const override { return kActionDim; }
  int horizon() const override { return cfg_.horizon; }
  Vec reset(std::uint64_t seed) override;
  StepResult step(const Vec& a) override;

  const Vec& goal() const { return goal_; }
  double distance_to_goal() const { return (pos_ - goal_).norm(); }

 private:
  void apply(const Vec& a);
  Vec observe() const;

  PointReachConfig cfg_;
  Vec pos_, prev_pos_, goal_;
  int step_count_ = 0;
  bool live_ = false;
};

// Visit an ordered chain of 2-D waypoints; +1 exactly once per waypoint,
// awarded only in order, episode ends when the chain is complete. State
// is position + completion flags + the flattened waypoint layout.
struct WaypointChainConfig {
  std::vector<Vec> waypoints;  // 2-D each, visited in order
  double capture_radius = 0.08;
  double step_scale = 0.05;
  int horizon = 100;
};

class WaypointChainEnv final : public Env {
 public:
  explicit WaypointChainEnv(WaypointChainConfig cfg);

  int n_waypoints() const { return static_cast<int>(cfg_.waypoints.size()); }
  int state_dim() const override { return 2 + 3 * n_waypoints(); }
  int action_dim() const override { return 2; }
  int horizon() const override { return cfg_.horizon; }
  Vec reset(std::uint64_t seed) override;
  StepResult step(const Vec& a) override;
  int subtasks_completed() const override;

 private:
  Vec observe() const;

  WaypointChainConfig cfg_;
  Vec pos_;
  std::vector<bool> flags_;
  int step_count_ = 0;
  bool live_ = false;
};

struct ExpertConfig {
  double gain = 8.0;
  double noise_sigma = 0.03;
  int dwell = 0;  // waypoint follower: hover steps after each capture
};

// Proportional controller toward a known goal (set per episode).
class ReachExpert {
 public:
  explicit ReachExpert(ExpertConfig cfg) : cfg_(cfg) {}
  void set_goal(const Vec& goal3) { goal_ = goal3; }
  Vec action(const Vec& state, Rng& rng) const;

 private:
  ExpertConfig cfg_;
  Vec goal_;
};

// Proportional controller toward the next uncompleted waypoint, parsed
// from the state; optionally hovers for a few steps after each capture.
class WaypointExpert {
 public:
  explicit WaypointExpert(ExpertConfig cfg) : cfg_(cfg) {}
  void begin_episode();
  Vec action(const Vec& state, Rng& rng);

 private:
  ExpertConfig cfg_;
  int prev_completed_ = 0;
  int dwell_left_ = 0;
};

std::vector<Trajectory> generate_reach_dataset(const PointReachConfig& cfg,
                                               const ExpertConfig& expert,
                                               int n_traj, std::uint64_t seed,
                                               const std::string& label);

std::vector<Trajectory> generate_waypoint_dataset(
    const WaypointChainConfig& cfg, const ExpertConfig& expert, int n_traj,
    std::uint64_t seed, const std::string& label);

}  // namespace ceip
