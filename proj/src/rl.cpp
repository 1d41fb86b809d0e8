#include "ceip/rl.hpp"

#include <algorithm>
#include <cmath>

#include "ceip/errors.hpp"

namespace ceip {

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec clip_box(const Vec& a) { return a.cwiseMax(-1.0).cwiseMin(1.0); }

// Per-column log-density of z = 3*tanh(m + sigma*eps) given the clamped
// log-stds and the noise actually drawn.
Vec column_log_prob(const Mat& log_std, const Mat& eps, const Mat& t) {
  const double c = -0.5 * std::log(2.0 * kPi);
  const auto jac = (LatentGaussianPolicy::kZBound *
                        (1.0 - t.array().square()) +
                    LatentGaussianPolicy::kJacobianEps)
                       .log();
  return (c - log_std.array() - 0.5 * eps.array().square() - jac)
      .matrix()
      .colwise()
      .sum()
      .transpose();
}

}  // namespace

void PriorBundle::validate(int ds) const {
  if (use_forward && !use_explicit)
    throw ConfigError("push-forward requires the explicit prior");
  if (use_explicit) {
    if (!db) throw ConfigError("explicit prior requires a database");
    if (flow.condition_dim() != 2 * ds)
      throw ConfigError("explicit prior needs condition dim 2*ds");
    if (use_forward && db->penalty() <= 0.0)
      throw ConfigError("push-forward needs a positive penalty");
    if (!use_forward && db->penalty() != 0.0)
      throw ConfigError("penalty must be zero without push-forward");
  } else {
    if (flow.condition_dim() != ds)
      throw ConfigError("implicit-only prior needs condition dim ds");
  }
}

Vec conditioned_state(RetrievalDatabase* db, const Vec& s) {
  if (!db) return s;
  return make_condition(s, db->retrieve_next(s).s_next);
}

Vec prior_step(PriorBundle& bundle, const Vec& s, const Vec& z) {
  RetrievalDatabase* db =
      bundle.use_explicit && bundle.db ? &*bundle.db : nullptr;
  const Vec u = conditioned_state(db, s);
  return clip_box(affine_forward(bundle.flow.effective_affine(u), z));
}

LatentGaussianPolicy::LatentGaussianPolicy(MlpSpec spec, std::uint64_t seed)
    : net_(spec, seed) {
  if (spec.output_dim < 2 || spec.output_dim % 2 != 0)
    throw ConfigError("policy net must emit (mean, log-std) pairs");
  if (spec.batchnorm)
    throw ConfigError("policy net cannot use batchnorm");
}

LatentGaussianPolicy::Sample LatentGaussianPolicy::sample(const Vec& s,
                                                          Rng& rng) const {
  const Vec raw = net_.forward(s);
  const int n = q();
  const Vec m = raw.head(n);
  const Vec l = raw.tail(n).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  Vec eps(n);
  for (int i = 0; i < n; ++i) eps[i] = rng.normal();
  const Vec x = m + l.array().exp().matrix().cwiseProduct(eps);
  const Vec t = x.array().tanh().matrix();

  Sample out;
  out.z = kZBound * t;
  out.log_prob = 0.0;
  for (int i = 0; i < n; ++i)
    out.log_prob += -0.5 * std::log(2.0 * kPi) - l[i] - 0.5 * eps[i] * eps[i] -
                    std::log(kZBound * (1.0 - t[i] * t[i]) + kJacobianEps);
  return out;
}

Vec LatentGaussianPolicy::mean_action(const Vec& s) const {
  const Vec raw = net_.forward(s);
  return kZBound * raw.head(q()).array().tanh().matrix();
}

ReplayBuffer::ReplayBuffer(int ds, int q, long capacity)
    : capacity_(capacity) {
  if (ds < 1 || q < 1 || capacity < 1)
    throw ConfigError("replay buffer dims and capacity must be positive");
  s_ = Mat::Zero(ds, capacity);
  z_ = Mat::Zero(q, capacity);
  s_next_ = Mat::Zero(ds, capacity);
  r_ = Vec::Zero(capacity);
  not_done_ = Vec::Zero(capacity);
}

void ReplayBuffer::push(const Vec& s, const Vec& z, double r,
                        const Vec& s_next, bool terminal) {
  s_.col(head_) = s;
  z_.col(head_) = z;
  s_next_.col(head_) = s_next;
  r_[head_] = r;
  not_done_[head_] = terminal ? 0.0 : 1.0;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

ReplayBuffer::Batch ReplayBuffer::sample(int batch_size, Rng& rng) const {
  if (size_ < 1) throw ConfigError("cannot sample an empty replay buffer");
  Batch b;
  b.s.resize(s_.rows(), batch_size);
  b.z.resize(z_.rows(), batch_size);
  b.s_next.resize(s_.rows(), batch_size);
  b.r.resize(batch_size);
  b.not_done.resize(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const auto j = rng.uniform_int(0, size_ - 1);
    b.s.col(i) = s_.col(j);
    b.z.col(i) = z_.col(j);
    b.s_next.col(i) = s_next_.col(j);
    b.r[i] = r_[j];
    b.not_done[i] = not_done_[j];
  }
  return b;
}

void SacConfig::validate() const {
  if (total_steps < 1) throw ConfigError("total_steps must be positive");
  if (warmup_random_steps >= total_steps)
    throw ConfigError("warmup_random_steps must be below total_steps");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (replay_capacity < batch_size)
    throw ConfigError("replay capacity below batch size");
  if (gamma <= 0.0 || gamma >= 1.0) throw ConfigError("gamma must be in (0,1)");
  if (tau <= 0.0 || tau > 1.0) throw ConfigError("tau must be in (0,1]");
  if (update_every < 1) throw ConfigError("update_every must be positive");
  if (eval_interval < 1) throw ConfigError("eval_interval must be positive");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be positive");
}

namespace {

struct SacNets {
  LatentGaussianPolicy policy;
  Mlp q1, q2, q1_target, q2_target;
  AdamState opt_actor, opt_q1, opt_q2, opt_alpha;
  double log_alpha = 0.0;
};

// One gradient step: twin-critic regression to the soft target, actor
// ascent on the reparameterized objective, entropy coefficient step,
// polyak target update. Returns false when a loss turns non-finite.
bool sac_update(SacNets& nets, const ReplayBuffer& buf, const SacConfig& cfg,
                double target_entropy, Rng& rng) {
  const auto batch = buf.sample(cfg.batch_size, rng);
  const int B = cfg.batch_size;
  const int qn = nets.policy.q();
  const int ds = static_cast<int>(batch.s.rows());
  const double alpha = std::exp(nets.log_alpha);
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  const double zb = LatentGaussianPolicy::kZBound;

  // soft target from the next-state policy sample
  const Mat raw2 = nets.policy.net().forward(batch.s_next);
  const Mat l2 = raw2.bottomRows(qn)
                     .cwiseMax(LatentGaussianPolicy::kLogStdMin)
                     .cwiseMin(LatentGaussianPolicy::kLogStdMax);
  Mat eps2(qn, B);
  for (int c = 0; c < B; ++c)
    for (int r = 0; r < qn; ++r) eps2(r, c) = rng.normal();
  const Mat sigma2 = l2.array().exp().matrix();
  const Mat t2 =
      (raw2.topRows(qn) + sigma2.cwiseProduct(eps2)).array().tanh().matrix();
  const Vec logp2 = column_log_prob(l2, eps2, t2);

  Mat in2(ds + qn, B);
  in2.topRows(ds) = batch.s_next;
  in2.bottomRows(qn) = zb * t2;
  const Mat tq1 = nets.q1_target.forward(in2);
  const Mat tq2 = nets.q2_target.forward(in2);
  Vec y(B);
  for (int i = 0; i < B; ++i)
    y[i] = batch.r[i] +
           cfg.gamma * batch.not_done[i] *
               (std::min(tq1(0, i), tq2(0, i)) - alpha * logp2[i]);

  // critics
  Mat in(ds + qn, B);
  in.topRows(ds) = batch.s;
  in.bottomRows(qn) = batch.z;
  for (Mlp* critic : {&nets.q1, &nets.q2}) {
    Mlp::Cache cache;
    const Mat qv = critic->forward_train(in, cache);
    const Vec err = qv.row(0).transpose() - y;
    if (!err.allFinite()) return false;
    Mat gout = (2.0 / B) * err.transpose();
    Vec grad(critic->params().size());
    grad.setZero();
    critic->backward(cache, gout, grad);
    adam_step(critic->params(),  grad,
              critic == &nets.q1 ? nets.opt_q1 : nets.opt_q2, adam);
  }

  // actor
  Mlp::Cache actor_cache;
  const Mat raw = nets.policy.net().forward_train(batch.s, actor_cache);
  const Mat l_raw = raw.bottomRows(qn);
  const Mat l = l_raw.cwiseMax(LatentGaussianPolicy::kLogStdMin)
                    .cwiseMin(LatentGaussianPolicy::kLogStdMax);
  Mat eps(qn, B);
  for (int c = 0; c < B; ++c)
    for (int r = 0; r < qn; ++r) eps(r, c) = rng.normal();
  const Mat sigma = l.array().exp().matrix();
  const Mat t =
      (raw.topRows(qn) + sigma.cwiseProduct(eps)).array().tanh().matrix();
  const Vec logp = column_log_prob(l, eps, t);
  if (!logp.allFinite()) return false;

  Mat ain(ds + qn, B);
  ain.topRows(ds) = batch.s;
  ain.bottomRows(qn) = zb * t;
  Mlp::Cache c1, c2;
  const Mat qa1 = nets.q1.forward_train(ain, c1);
  const Mat qa2 = nets.q2.forward_train(ain, c2);
  Mat mask1 = Mat::Zero(1, B), mask2 = Mat::Zero(1, B);
  for (int i = 0; i < B; ++i)
    (qa1(0, i) <= qa2(0, i) ? mask1 : mask2)(0, i) = 1.0;
  Vec scratch1(nets.q1.params().size()), scratch2(nets.q2.params().size());
  scratch1.setZero();
  scratch2.setZero();
  Mat gin1, gin2;
  nets.q1.backward(c1, mask1, scratch1, &gin1);
  nets.q2.backward(c2, mask2, scratch2, &gin2);
  const Mat dqdz = gin1.bottomRows(qn) + gin2.bottomRows(qn);

  const Mat omt2 = (1.0 - t.array().square()).matrix();
  const Mat dz_dx = zb * omt2;  // also the tanh-jacobian diagonal
  const Mat d_term = ((2.0 * zb * t.array() * omt2.array()) /
                      (zb * omt2.array() + LatentGaussianPolicy::kJacobianEps))
                         .matrix();
  const Mat se = sigma.cwiseProduct(eps);
  Mat gm = ((alpha * d_term.array() - dqdz.array() * dz_dx.array()) / B)
               .matrix();
  Mat gl = ((alpha * (-1.0 + d_term.array() * se.array()) -
             dqdz.array() * dz_dx.array() * se.array()) /
            B)
               .matrix();
  const auto inside = ((l_raw.array() > LatentGaussianPolicy::kLogStdMin) &&
                       (l_raw.array() < LatentGaussianPolicy::kLogStdMax))
                          .cast<double>();
  gl.array() *= inside;
  Mat gout(2 * qn, B);
  gout.topRows(qn) = gm;
  gout.bottomRows(qn) = gl;
  Vec agrad(nets.policy.net().params().size());
  agrad.setZero();
  nets.policy.net().backward(actor_cache, gout, agrad);
  if (!agrad.allFinite()) return false;
  adam_step(nets.policy.net().params(), agrad, nets.opt_actor, adam);

  // entropy coefficient
  if (cfg.fixed_alpha <= 0.0) {
    Vec la(1), ga(1);
    la[0] = nets.log_alpha;
    ga[0] = -(logp.array() + target_entropy).mean();
    adam_step(la, ga, nets.opt_alpha, adam);
    nets.log_alpha = la[0];
  }

  // polyak averaging toward the live critics
  nets.q1_target.params() =
      (1.0 - cfg.tau) * nets.q1_target.params() + cfg.tau * nets.q1.params();
  nets.q2_target.params() =
      (1.0 - cfg.tau) * nets.q2_target.params() + cfg.tau * nets.q2.params();
  return true;
}

}  // namespace

EvalRow evaluate_actions(Env& env, const std::function<Vec(const Vec&)>& act,
                         const std::function<void()>& on_episode,
                         int n_episodes, std::uint64_t seed) {
  if (n_episodes < 1) throw ConfigError("need at least one episode");
  Vec returns(n_episodes);
  double length_sum = 0.0, subtask_sum = 0.0;
  for (int e = 0; e < n_episodes; ++e) {
    if (on_episode) on_episode();
    Vec s = env.reset(derive_seed(seed, "ep", e));
    double ret = 0.0;
    int len = 0;
    bool done = false;
    while (!done) {
      const StepResult r = env.step(act(s));
      ret += r.reward;
      ++len;
      s = r.state;
      done = r.done;
    }
    returns[e] = ret;
    length_sum += len;
    subtask_sum += env.subtasks_completed();
  }
  EvalRow row;
  row.mean_return = returns.mean();
  row.std_return =
      std::sqrt((returns.array() - row.mean_return).square().mean());
  row.mean_length = length_sum / n_episodes;
  row.mean_subtasks = subtask_sum / n_episodes;
  return row;
}

EvalRow evaluate_policy(Env& env, const LatentGaussianPolicy& policy,
                        PriorBundle& bundle, int n_episodes,
                        std::uint64_t seed) {
  return evaluate_actions(
      env,
      [&](const Vec& s) { return prior_step(bundle, s, policy.mean_action(s)); },
      [&] { bundle.reset_episode(); }, n_episodes, seed);
}

SacResult train_sac(const EnvFactory& make_env, PriorBundle& bundle,
                    const SacConfig& cfg) {
  cfg.validate();
  auto env = make_env();
  auto eval_env = make_env();
  const int ds = env->state_dim();
  const int qn = env->action_dim();
  bundle.validate(ds);
  if (bundle.flow.action_dim() != qn)
    throw ConfigError("flow action dim must match the environment");

  MlpSpec actor_spec;
  actor_spec.input_dim = ds;
  actor_spec.hidden_widths = cfg.actor_hidden;
  actor_spec.output_dim = 2 * qn;
  MlpSpec critic_spec;
  critic_spec.input_dim = ds + qn;
  critic_spec.hidden_widths = cfg.critic_hidden;
  critic_spec.output_dim = 1;

  SacNets nets{
      LatentGaussianPolicy(actor_spec, derive_seed(cfg.seed, "actor")),
      Mlp(critic_spec, derive_seed(cfg.seed, "critic", 1)),
      Mlp(critic_spec, derive_seed(cfg.seed, "critic", 2)),
      Mlp(critic_spec, derive_seed(cfg.seed, "critic", 1)),
      Mlp(critic_spec, derive_seed(cfg.seed, "critic", 2)),
      AdamState(0), AdamState(0), AdamState(0), AdamState(1),
      cfg.fixed_alpha > 0.0 ? std::log(cfg.fixed_alpha) : 0.0};
  nets.opt_actor = AdamState(nets.policy.net().params().size());
  nets.opt_q1 = AdamState(nets.q1.params().size());
  nets.opt_q2 = AdamState(nets.q2.params().size());
  const double target_entropy = -static_cast<double>(qn);

  ReplayBuffer buf(ds, qn, cfg.replay_capacity);
  Rng rollout_rng(derive_seed(cfg.seed, "rollout"));
  Rng update_rng(derive_seed(cfg.seed, "update"));

  EvalReport report;
  long episode_index = 0;
  bundle.reset_episode();
  Vec s = env->reset(derive_seed(cfg.seed, "episode", episode_index++));

  for (long step = 1; step <= cfg.total_steps; ++step) {
    Vec z(qn);
    if (step <= cfg.warmup_random_steps) {
      for (int i = 0; i < qn; ++i)
        z[i] = rollout_rng.uniform(-LatentGaussianPolicy::kZBound,
                                   LatentGaussianPolicy::kZBound);
    } else {
      z = nets.policy.sample(s, rollout_rng).z;
    }
    const Vec a = prior_step(bundle, s, z);
    const StepResult r = env->step(a);
    buf.push(s, z, r.reward, r.state, r.done && !r.truncated);
    s = r.state;
    if (r.done) {
      bundle.reset_episode();
      s = env->reset(derive_seed(cfg.seed, "episode", episode_index++));
    }

    if (step > cfg.warmup_random_steps && step % cfg.update_every == 0 &&
        buf.size() >= cfg.batch_size) {
      bool ok = false;
      try {
        ok = sac_update(nets, buf, cfg, target_entropy, update_rng);
      } catch (const NumericError&) {
        ok = false;
      }
      if (!ok) {
        report.aborted = true;
        break;
      }
    }

    if (step % cfg.eval_interval == 0) {
      PriorBundle eval_bundle = bundle;  // independent episode markers
      EvalRow row = evaluate_policy(*eval_env, nets.policy, eval_bundle,
                                    cfg.eval_episodes,
                                    derive_seed(cfg.seed, "eval", step));
      row.step = step;
      report.rows.push_back(row);
    }
  }
  return {std::move(nets.policy), std::move(report)};
}

namespace {

class BcTrainable final : public Trainable {
 public:
  BcTrainable(Mlp& net, const std::vector<UaPair>& pairs)
      : net_(net), pairs_(pairs) {}

  Vec& params() override { return net_.params(); }

  double loss_grad(const std::vector<int>& idx, Vec& grad) override {
    Mlp::Cache cache;
    Mat U, A;
    gather(idx, U, A);
    const Mat out = net_.forward_train(U, cache);
    const Mat err = out - A;
    grad.resize(net_.params().size());
    grad.setZero();
    const Mat gout = (2.0 / static_cast<double>(idx.size())) * err;
    net_.backward(cache, gout, grad);
    return err.array().square().colwise().sum().mean();
  }

  double eval_loss(const std::vector<int>& idx) override {
    Mat U, A;
    gather(idx, U, A);
    const Mat err = net_.forward(U) - A;
    return err.array().square().colwise().sum().mean();
  }

  Vec save_state() override { return net_.save_state(); }
  void load_state(const Vec& s) override { net_.load_state(s); }

 private:
  void gather(const std::vector<int>& idx, Mat& U, Mat& A) const {
    U.resize(pairs_[0].u.size(), idx.size());
    A.resize(pairs_[0].a.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      U.col(i) = pairs_[idx[i]].u;
      A.col(i) = pairs_[idx[i]].a;
    }
  }

  Mlp& net_;
  const std::vector<UaPair>& pairs_;
};

}  // namespace

Mlp train_bc(const std::vector<UaPair>& pairs, const MlpSpec& spec,
             const TrainConfig& cfg, TrainReport* report) {
  if (pairs.empty()) throw DataError("behavior cloning needs data");
  if (spec.input_dim != pairs[0].u.size() ||
      spec.output_dim != pairs[0].a.size())
    throw ShapeError("behavior-cloning net dims do not match the pairs");
  cfg.validate();
  Mlp net(spec, derive_seed(cfg.seed, "bc"));

  if (pairs.size() < 2) {
    // too small to split: full-batch descent, no validation
    BcTrainable model(net, pairs);
    const std::vector<int> all{0};
    AdamState opt(net.params().size());
    Vec grad;
    TrainReport rep;
    for (int e = 0; e < cfg.epochs; ++e) {
      const double loss = model.loss_grad(all, grad);
      if (!std::isfinite(loss)) {
        rep.aborted_nonfinite = true;
        break;
      }
      clip_grad_norm(grad, cfg.clip_norm);
      adam_step(net.params(), grad, opt, {cfg.lr, 0.9, 0.999, 1e-8});
      rep.train_history.push_back(loss);
      ++rep.batches_fed;
    }
    rep.best_val = model.eval_loss(all);
    if (report) *report = rep;
    return net;
  }

  BcTrainable model(net, pairs);
  TrainReport rep = train_minibatch(model, static_cast<int>(pairs.size()), cfg);
  if (report) *report = rep;
  return net;
}

Vec bc_action(const Mlp& net, RetrievalDatabase* db, const Vec& s) {
  return clip_box(net.forward(conditioned_state(db, s)));
}

}  // namespace ceip
