#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ceip/envworld.hpp"
#include "ceip/mixture.hpp"
#include "ceip/retrieval.hpp"

namespace ceip {

// Everything the step function needs: the (possibly injected-coefficient)
// combination flow, the optional transition database, and the variant
// flags. The database penalty carries the push-forward setting: C = 1
// style when use_forward, 0 otherwise.
struct PriorBundle {
  CombinedFlow flow;
  std::optional<RetrievalDatabase> db;
  bool use_ts_flow = false;
  bool use_explicit = false;
  bool use_forward = false;

  void validate(int ds) const;
  void reset_episode() {
    if (db) db->reset_episode();
  }
};

// u = s, or [s, retrieved next state] when a database is supplied; the
// one retrieval path shared by the latent prior and behavior cloning.
Vec conditioned_state(RetrievalDatabase* db, const Vec& s);

// z in [-3,3]^q -> environment action: retrieve (optionally), evaluate the
// effective affine map at the condition, apply it to z, clip to the box.
Vec prior_step(PriorBundle& bundle, const Vec& s, const Vec& z);

// Squashed-Gaussian policy over the latent box [-3,3]^q.
class LatentGaussianPolicy {
 public:
  static constexpr double kZBound = 3.0;
  static constexpr double kLogStdMin = -20.0;
  static constexpr double kLogStdMax = 2.0;
  static constexpr double kJacobianEps = 1e-6;

  LatentGaussianPolicy() = default;
  LatentGaussianPolicy(MlpSpec spec, std::uint64_t seed);

  int q() const { return net_.spec().output_dim / 2; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  struct Sample {
    Vec z;
    double log_prob = 0.0;
  };
  Sample sample(const Vec& s, Rng& rng) const;
  Vec mean_action(const Vec& s) const;  // deterministic: 3*tanh(mean)

 private:
  Mlp net_;
};

// Off-policy transitions over the latent MDP; actions stored here are
// latent vectors, never environment actions.
class ReplayBuffer {
 public:
  ReplayBuffer(int ds, int q, long capacity);

  long size() const { return size_; }
  void push(const Vec& s, const Vec& z, double r, const Vec& s_next,
            bool terminal);

  struct Batch {
    Mat s, z, s_next;
    Vec r, not_done;
  };
  Batch sample(int batch_size, Rng& rng) const;

 private:
  Mat s_, z_, s_next_;
  Vec r_, not_done_;
  long capacity_ = 0, size_ = 0, head_ = 0;
};

struct SacConfig {
  long total_steps = 30000;
  int batch_size = 256;
  int warmup_random_steps = 1000;
  long replay_capacity = 100000;
  double gamma = 0.99;
  double tau = 0.005;
  double lr = 3e-4;
  int update_every = 1;  // environment steps per gradient step
  long eval_interval = 1000;
  int eval_episodes = 10;
  std::vector<int> actor_hidden = {256, 256};
  std::vector<int> critic_hidden = {256, 256};
  double fixed_alpha = -1.0;  // <= 0: automatic tuning toward entropy -q
  std::uint64_t seed = 0;

  void validate() const;
};

struct EvalRow {
  long step = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_length = 0.0;
  double mean_subtasks = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  bool aborted = false;  // non-finite loss cut training short
};

struct SacResult {
  LatentGaussianPolicy policy;
  EvalReport report;
};

// Standard twin-critic SAC over the latent MDP induced by the prior;
// evaluation episodes (deterministic mean action) run on a bundle copy so
// training-episode markers are untouched.
SacResult train_sac(const EnvFactory& make_env, PriorBundle& bundle,
                    const SacConfig& cfg);

// Rolls deterministic episodes; on_episode runs before each reset
// (database marker reset), act maps state to environment action.
EvalRow evaluate_actions(Env& env, const std::function<Vec(const Vec&)>& act,
                         const std::function<void()>& on_episode,
                         int n_episodes, std::uint64_t seed);

EvalRow evaluate_policy(Env& env, const LatentGaussianPolicy& policy,
                        PriorBundle& bundle, int n_episodes,
                        std::uint64_t seed);

// Behavior cloning: least-squares regression a = g(u) with the shared
// minibatch loop; a single pair trains full-batch without validation.
Mlp train_bc(const std::vector<UaPair>& pairs, const MlpSpec& spec,
             const TrainConfig& cfg, TrainReport* report = nullptr);

// Deployment-time BC action: condition exactly as prior_step does, then
// clip the regressed action to the box.
Vec bc_action(const Mlp& net, RetrievalDatabase* db, const Vec& s);

}  // namespace ceip
