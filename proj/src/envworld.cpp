#include "ceip/envworld.hpp"

#include <cmath>

#include "ceip/errors.hpp"

namespace ceip {

namespace {

Vec clip_box(const Vec& a) { return a.cwiseMax(-1.0).cwiseMin(1.0); }

constexpr double kPi = 3.14159265358979323846;

}  // namespace

PointReachEnv::PointReachEnv(PointReachConfig cfg) : cfg_(cfg) {
  if (cfg_.horizon < 1) throw ConfigError("horizon must be positive");
  if (cfg_.step_scale <= 0.0) throw ConfigError("step_scale must be positive");
  pos_ = Vec::Zero(3);
  prev_pos_ = Vec::Zero(3);
  goal_ = Vec::Zero(3);
}

Vec PointReachEnv::reset(std::uint64_t seed) {
  Rng rng(seed);
  const double azimuth = kPi * cfg_.direction / 4.0;
  goal_ << cfg_.goal_distance * std::cos(azimuth),
      cfg_.goal_distance * std::sin(azimuth), 0.0;
  for (int i = 0; i < 3; ++i)
    goal_[i] += rng.uniform(-cfg_.goal_noise, cfg_.goal_noise);

  pos_.setZero();
  prev_pos_.setZero();
  if (cfg_.warmup) {
    Vec w(kActionDim);
    for (int i = 0; i < kActionDim; ++i) w[i] = rng.normal();
    w = clip_box(w) * cfg_.warmup_action_scale;
    const auto x = rng.uniform_int(5, 20);
    for (std::int64_t i = 0; i < x; ++i) apply(w);
  }
  step_count_ = 0;
  live_ = true;
  return observe();
}

void PointReachEnv::apply(const Vec& a) {
  prev_pos_ = pos_;
  pos_ += cfg_.step_scale * a.head(3);
}

Vec PointReachEnv::observe() const {
  Vec s = Vec::Zero(kStateDim);
  s.head(3) = pos_;
  s.segment(3, 3) = pos_ - prev_pos_;
  return s;
}

StepResult PointReachEnv::step(const Vec& a) {
  if (!live_) throw UsageError("step on a finished episode");
  if (a.size() != kActionDim) throw ShapeError("action dim mismatch");
  apply(clip_box(a));
  ++step_count_;
  StepResult r;
  r.reward = distance_to_goal() < cfg_.reach_threshold ? 0.0 : -1.0;
  r.done = step_count_ >= cfg_.horizon;
  r.truncated = r.done;  // fixed-length episodes only ever time out
  r.state = observe();
  if (r.done) live_ = false;
  return r;
}

WaypointChainEnv::WaypointChainEnv(WaypointChainConfig cfg)
    : cfg_(std::move(cfg)) {
  if (cfg_.waypoints.empty()) throw ConfigError("waypoint chain is empty");
  for (const auto& w : cfg_.waypoints)
    if (w.size() != 2) throw ShapeError("waypoints must be 2-D");
  if (cfg_.horizon < 1) throw ConfigError("horizon must be positive");
  pos_ = Vec::Zero(2);
  flags_.assign(cfg_.waypoints.size(), false);
}

Vec WaypointChainEnv::reset(std::uint64_t) {
  pos_.setZero();
  flags_.assign(cfg_.waypoints.size(), false);
  step_count_ = 0;
  live_ = true;
  return observe();
}

Vec WaypointChainEnv::observe() const {
  const int k = n_waypoints();
  Vec s(2 + 3 * k);
  s.head(2) = pos_;
  for (int i = 0; i < k; ++i) s[2 + i] = flags_[i] ? 1.0 : 0.0;
  for (int i = 0; i < k; ++i) s.segment(2 + k + 2 * i, 2) = cfg_.waypoints[i];
  return s;
}

int WaypointChainEnv::subtasks_completed() const {
  int n = 0;
  for (const bool f : flags_) n += f ? 1 : 0;
  return n;
}

StepResult WaypointChainEnv::step(const Vec& a) {
  if (!live_) throw UsageError("step on a finished episode");
  if (a.size() != 2) throw ShapeError("action dim mismatch");
  pos_ += cfg_.step_scale * clip_box(a);
  ++step_count_;
  StepResult r;
  const int next = subtasks_completed();
  if (next < n_waypoints() &&
      (pos_ - cfg_.waypoints[next]).norm() < cfg_.capture_radius) {
    flags_[next] = true;
    r.reward = 1.0;
  }
  const bool complete = subtasks_completed() == n_waypoints();
  r.done = complete || step_count_ >= cfg_.horizon;
  r.truncated = r.done && !complete;
  r.state = observe();
  if (r.done) live_ = false;
  return r;
}

Vec ReachExpert::action(const Vec& state, Rng& rng) const {
  if (goal_.size() != 3) throw ConfigError("reach expert has no goal");
  Vec a = Vec::Zero(PointReachEnv::kActionDim);
  a.head(3) = cfg_.gain * (goal_ - state.head(3));
  for (int i = 0; i < a.size(); ++i) a[i] += cfg_.noise_sigma * rng.normal();
  return clip_box(a);
}

void WaypointExpert::begin_episode() {
  prev_completed_ = 0;
  dwell_left_ = 0;
}

Vec WaypointExpert::action(const Vec& state, Rng& rng) {
  const int k = static_cast<int>((state.size() - 2) / 3);
  int completed = 0;
  while (completed < k && state[2 + completed] > 0.5) ++completed;
  if (completed > prev_completed_) dwell_left_ = cfg_.dwell;
  prev_completed_ = completed;

  Vec a = Vec::Zero(2);
  if (dwell_left_ > 0) {
    --dwell_left_;
  } else if (completed < k) {
    const Vec target = state.segment(2 + k + 2 * completed, 2);
    a = cfg_.gain * (target - state.head(2));
  }
  for (int i = 0; i < a.size(); ++i) a[i] += cfg_.noise_sigma * rng.normal();
  return clip_box(a);
}

std::vector<Trajectory> generate_reach_dataset(const PointReachConfig& cfg,
                                               const ExpertConfig& expert,
                                               int n_traj, std::uint64_t seed,
                                               const std::string& label) {
  if (n_traj < 1) throw ConfigError("n_traj must be at least 1");
  PointReachEnv env(cfg);
  ReachExpert ex(expert);
  std::vector<Trajectory> out;
  out.reserve(n_traj);
  for (int t = 0; t < n_traj; ++t) {
    Vec s = env.reset(derive_seed(seed, "episode", t));
    ex.set_goal(env.goal());
    Rng noise(derive_seed(seed, "expert", t));
    Trajectory traj;
    traj.task_label = label;
    bool done = false;
    while (!done) {
      const Vec a = ex.action(s, noise);
      traj.states.push_back(s);
      traj.actions.push_back(a);
      const StepResult r = env.step(a);
      s = r.state;
      done = r.done;
    }
    out.push_back(std::move(traj));
  }
  return out;
}

std::vector<Trajectory> generate_waypoint_dataset(
    const WaypointChainConfig& cfg, const ExpertConfig& expert, int n_traj,
    std::uint64_t seed, const std::string& label) {
  if (n_traj < 1) throw ConfigError("n_traj must be at least 1");
  WaypointChainEnv env(cfg);
  WaypointExpert ex(expert);
  std::vector<Trajectory> out;
  out.reserve(n_traj);
  for (int t = 0; t < n_traj; ++t) {
    Vec s = env.reset(derive_seed(seed, "episode", t));
    ex.begin_episode();
    Rng noise(derive_seed(seed, "expert", t));
    Trajectory traj;
    traj.task_label = label;
    bool done = false;
    while (!done) {
      const Vec a = ex.action(s, noise);
      traj.states.push_back(s);
      traj.actions.push_back(a);
      const StepResult r = env.step(a);
      s = r.state;
      done = r.done;
    }
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace ceip
