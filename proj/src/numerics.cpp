#include "ceip/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ceip {

void MlpSpec::validate() const {
  if (input_dim < 1 || output_dim < 1)
    throw ShapeError("mlp dims must be >= 1");
  if (hidden_widths.empty()) throw ShapeError("mlp needs a hidden layer");
  for (const int w : hidden_widths)
    if (w < 1) throw ShapeError("mlp hidden width must be >= 1");
}

std::vector<std::pair<int, int>> MlpSpec::linear_dims() const {
  std::vector<std::pair<int, int>> dims;
  int in = input_dim;
  for (const int w : hidden_widths) {
    dims.emplace_back(in, w);
    in = w;
  }
  dims.emplace_back(in, output_dim);
  return dims;
}

Eigen::Index MlpSpec::param_count() const {
  return make_layout(*this).total;
}

ParamLayout make_layout(const MlpSpec& spec) {
  spec.validate();
  ParamLayout layout;
  Eigen::Index off = 0;
  const auto dims = spec.linear_dims();
  const int n_hidden = static_cast<int>(spec.hidden_widths.size());
  for (int l = 0; l < static_cast<int>(dims.size()); ++l) {
    const auto [in, out] = dims[l];
    layout.weight.push_back({off, static_cast<Eigen::Index>(in) * out});
    off += layout.weight.back().size;
    layout.bias.push_back({off, out});
    off += out;
    if (spec.batchnorm && l < n_hidden) {
      layout.gamma.push_back({off, out});
      off += out;
      layout.beta.push_back({off, out});
      off += out;
    }
  }
  layout.total = off;
  return layout;
}

namespace {

Eigen::Map<const Mat> map_w(const Vec& p, const ParamLayout::Slice& s, int in,
                            int out) {
  return Eigen::Map<const Mat>(p.data() + s.offset, out, in);
}

Eigen::Map<const Vec> map_v(const Vec& p, const ParamLayout::Slice& s) {
  return Eigen::Map<const Vec>(p.data() + s.offset, s.size);
}

Eigen::Map<Mat> map_w(Vec& p, const ParamLayout::Slice& s, int in, int out) {
  return Eigen::Map<Mat>(p.data() + s.offset, out, in);
}

Eigen::Map<Vec> map_v(Vec& p, const ParamLayout::Slice& s) {
  return Eigen::Map<Vec>(p.data() + s.offset, s.size);
}

}  // namespace

Mlp::Mlp(MlpSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
  spec_.validate();
  layout_ = make_layout(spec_);
  params_ = Vec::Zero(layout_.total);
  Rng rng(init_seed);
  const auto dims = spec_.linear_dims();
  for (int l = 0; l < static_cast<int>(dims.size()); ++l) {
    const auto [in, out] = dims[l];
    const double bound = std::sqrt(6.0 / in);
    auto w = map_w(params_, layout_.weight[l], in, out);
    for (Eigen::Index j = 0; j < w.size(); ++j)
      w.data()[j] = rng.uniform(-bound, bound);
  }
  for (const auto& s : layout_.gamma) map_v(params_, s).setOnes();
  for (int l = 0; l < static_cast<int>(spec_.hidden_widths.size()); ++l) {
    if (!spec_.batchnorm) break;
    bn_.push_back({Vec::Zero(spec_.hidden_widths[l]),
                   Vec::Ones(spec_.hidden_widths[l])});
  }
}

Mat Mlp::forward(const Mat& x) const {
  if (x.rows() != spec_.input_dim) throw ShapeError("mlp input dim mismatch");
  const auto dims = spec_.linear_dims();
  const int n_hidden = static_cast<int>(spec_.hidden_widths.size());
  Mat a = x;
  for (int l = 0; l < static_cast<int>(dims.size()); ++l) {
    const auto [in, out] = dims[l];
    Mat z = (map_w(params_, layout_.weight[l], in, out) * a).colwise() +
            map_v(params_, layout_.bias[l]);
    if (l == n_hidden) return z;
    if (spec_.batchnorm) {
      const Vec inv_std = (bn_[l].running_var.array() + kBnEps).rsqrt();
      const Vec g = map_v(params_, layout_.gamma[l]);
      const Vec b = map_v(params_, layout_.beta[l]);
      z = (((z.colwise() - bn_[l].running_mean).array().colwise() *
            (g.array() * inv_std.array()))
               .colwise() +
           b.array())
              .matrix();
    }
    a = z.cwiseMax(0.0);
  }
  return a;  // unreachable
}

Vec Mlp::forward(const Vec& x) const { return forward(Mat(x)).col(0); }

Mat Mlp::forward_train(const Mat& x, Cache& cache) {
  if (x.rows() != spec_.input_dim) throw ShapeError("mlp input dim mismatch");
  const Eigen::Index batch = x.cols();
  if (spec_.batchnorm && batch < 2)
    throw ShapeError("batchnorm training needs batch >= 2");
  const auto dims = spec_.linear_dims();
  const int n_hidden = static_cast<int>(spec_.hidden_widths.size());
  cache.input = x;
  cache.post.assign(n_hidden, Mat());
  cache.xhat.assign(spec_.batchnorm ? n_hidden : 0, Mat());
  cache.inv_std.assign(spec_.batchnorm ? n_hidden : 0, Vec());
  Mat a = x;
  for (int l = 0; l < static_cast<int>(dims.size()); ++l) {
    const auto [in, out] = dims[l];
    Mat z = (map_w(params_, layout_.weight[l], in, out) * a).colwise() +
            map_v(params_, layout_.bias[l]);
    if (l == n_hidden) return z;
    if (spec_.batchnorm) {
      const Vec mean = z.rowwise().mean();
      const Mat centered = z.colwise() - mean;
      const Vec var = centered.array().square().rowwise().mean();
      const Vec inv_std = (var.array() + kBnEps).rsqrt();
      cache.xhat[l] = centered.array().colwise() * inv_std.array();
      cache.inv_std[l] = inv_std;
      const double unbias = static_cast<double>(batch) / (batch - 1);
      bn_[l].running_mean = (1.0 - kBnMomentum) * bn_[l].running_mean +
                            kBnMomentum * mean;
      bn_[l].running_var = (1.0 - kBnMomentum) * bn_[l].running_var +
                           kBnMomentum * (unbias * var);
      const Vec g = map_v(params_, layout_.gamma[l]);
      const Vec b = map_v(params_, layout_.beta[l]);
      z = ((cache.xhat[l].array().colwise() * g.array()).colwise() + b.array())
              .matrix();
    }
    a = z.cwiseMax(0.0);
    cache.post[l] = a;
  }
  return a;  // unreachable
}

void Mlp::backward(const Cache& cache, const Mat& grad_out, Vec& param_grad,
                   Mat* grad_in) const {
  if (param_grad.size() != layout_.total)
    throw ShapeError("param grad size mismatch");
  const auto dims = spec_.linear_dims();
  const int n_hidden = static_cast<int>(spec_.hidden_widths.size());
  const auto check = [](const Mat& m, int layer) {
    if (!m.allFinite())
      throw NumericError("non-finite gradient in mlp backward", layer);
  };
  Mat g = grad_out;
  for (int l = n_hidden; l >= 0; --l) {
    if (l < n_hidden) {
      // through relu, then batchnorm when present
      g = (cache.post[l].array() > 0.0).select(g, 0.0);
      if (spec_.batchnorm) {
        const Vec gam = map_v(params_, layout_.gamma[l]);
        map_v(param_grad, layout_.gamma[l]) +=
            (g.array() * cache.xhat[l].array()).rowwise().sum().matrix();
        map_v(param_grad, layout_.beta[l]) += g.rowwise().sum();
        const Mat dxhat = g.array().colwise() * gam.array();
        const double n = static_cast<double>(g.cols());
        const Vec sum_dx = dxhat.rowwise().sum();
        const Vec sum_dx_xhat =
            (dxhat.array() * cache.xhat[l].array()).rowwise().sum();
        g = ((dxhat * n).colwise() - sum_dx).array() -
            (cache.xhat[l].array().colwise() * sum_dx_xhat.array());
        g = (g.array().colwise() * (cache.inv_std[l].array() / n)).matrix();
      }
    }
    const auto [in, out] = dims[l];
    const Mat& act = (l == 0) ? cache.input : cache.post[l - 1];
    Mat dw = g * act.transpose();
    check(dw, l);
    map_w(param_grad, layout_.weight[l], in, out) += dw;
    map_v(param_grad, layout_.bias[l]) += g.rowwise().sum();
    if (l > 0 || grad_in) {
      Mat gp = map_w(params_, layout_.weight[l], in, out).transpose() * g;
      if (l == 0) {
        *grad_in = gp;
        return;
      }
      g = std::move(gp);
    }
  }
}

Vec Mlp::save_state() const {
  Vec state(state_size());
  state.head(params_.size()) = params_;
  Eigen::Index off = params_.size();
  for (const auto& s : bn_) {
    state.segment(off, s.running_mean.size()) = s.running_mean;
    off += s.running_mean.size();
    state.segment(off, s.running_var.size()) = s.running_var;
    off += s.running_var.size();
  }
  return state;
}

void Mlp::load_state(const Vec& state) {
  if (state.size() != state_size()) throw ShapeError("mlp state size mismatch");
  params_ = state.head(params_.size());
  Eigen::Index off = params_.size();
  for (auto& s : bn_) {
    s.running_mean = state.segment(off, s.running_mean.size());
    off += s.running_mean.size();
    s.running_var = state.segment(off, s.running_var.size());
    off += s.running_var.size();
  }
}

Eigen::Index Mlp::state_size() const {
  Eigen::Index n = params_.size();
  for (const auto& s : bn_) n += s.running_mean.size() + s.running_var.size();
  return n;
}

void adam_step(Vec& params, const Vec& grads, AdamState& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size() ||
      params.size() != state.first_moment.size())
    throw ShapeError("adam size mismatch");
  state.step_count += 1;
  state.first_moment =
      cfg.beta1 * state.first_moment + (1.0 - cfg.beta1) * grads;
  state.second_moment = cfg.beta2 * state.second_moment +
                        (1.0 - cfg.beta2) * grads.array().square().matrix();
  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step_count);
  params.array() -= cfg.lr * (state.first_moment.array() / bc1) /
                    ((state.second_moment.array() / bc2).sqrt() + cfg.epsilon);
}

double clip_grad_norm(Vec& grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip norm must be positive");
  const double norm = grads.norm();
  if (norm > max_norm) grads *= max_norm / norm;
  return norm;
}

Vec grad_scalar(const ScalarObjective& objective, const Vec& params) {
  Vec grad = Vec::Zero(params.size());
  objective(params, &grad);
  if (!grad.allFinite()) throw NumericError("non-finite gradient");
  return grad;
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || early_stop_min_batches < 1)
    throw ConfigError("train counts must be >= 1");
  if (lr <= 0.0 || clip_norm <= 0.0) throw ConfigError("lr/clip must be > 0");
  if (!(val_ratio > 0.0 && val_ratio < 1.0))
    throw ConfigError("val_ratio must be in (0,1)");
  if (!(early_stop_window_frac > 0.0 && early_stop_window_frac <= 1.0))
    throw ConfigError("early_stop_window_frac must be in (0,1]");
}

void split_indices(int n, double train_ratio, std::uint64_t seed,
                   std::vector<int>& train, std::vector<int>& val) {
  if (n < 2) throw DataError("need at least 2 items to split");
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    throw ConfigError("split ratio must be in (0,1)");
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  const long n_train =
      std::clamp<long>(std::lround(train_ratio * n), 1, n - 1);
  train.assign(perm.begin(), perm.begin() + n_train);
  val.assign(perm.begin() + n_train, perm.end());
}

TrainReport train_minibatch(Trainable& model, int n_items,
                            const TrainConfig& cfg) {
  cfg.validate();
  std::vector<int> train_idx, val_idx;
  split_indices(n_items, 1.0 - cfg.val_ratio, derive_seed(cfg.seed, "split"),
                train_idx, val_idx);

  TrainReport report;
  Vec best_state = model.save_state();
  report.best_val = model.eval_loss(val_idx);
  long best_batches = 0;

  AdamState opt(model.params().size());
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Vec grad;
  std::vector<int> batch;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = static_cast<int>(train_idx.size()) - 1; i > 0; --i)
      std::swap(train_idx[i], train_idx[shuffle_rng.uniform_int(0, i)]);
    double epoch_sum = 0.0;
    int epoch_batches = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(train_idx.size(), start + cfg.batch_size);
      // a stray single-sample batch is dropped (batchnorm needs >= 2)
      if (end - start < 2 && train_idx.size() > 1) continue;
      batch.assign(train_idx.begin() + start, train_idx.begin() + end);
      const double loss = model.loss_grad(batch, grad);
      if (!std::isfinite(loss)) {
        report.aborted_nonfinite = true;
        model.load_state(best_state);
        return report;
      }
      clip_grad_norm(grad, cfg.clip_norm);
      adam_step(model.params(), grad, opt, adam);
      report.batches_fed += 1;
      epoch_sum += loss;
      epoch_batches += 1;
    }
    report.train_history.push_back(
        epoch_batches > 0 ? epoch_sum / epoch_batches : 0.0);
    const double val = model.eval_loss(val_idx);
    report.val_history.push_back(val);
    if (val < report.best_val) {
      report.best_val = val;
      report.best_epoch = epoch;
      best_state = model.save_state();
      best_batches = report.batches_fed;
    }
    if (report.batches_fed > cfg.early_stop_min_batches &&
        static_cast<double>(report.batches_fed - best_batches) >=
            cfg.early_stop_window_frac * report.batches_fed) {
      report.early_stopped = true;
      break;
    }
  }
  model.load_state(best_state);
  return report;
}

}  // namespace ceip
