#include <cmath>
#include <vector>

#include "ceip/numerics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using ceip::Mat;
using ceip::Mlp;
using ceip::MlpSpec;
using ceip::Vec;

namespace {

MlpSpec small_spec(int in, std::vector<int> hidden, int out, bool bn = false) {
  MlpSpec s;
  s.input_dim = in;
  s.hidden_widths = std::move(hidden);
  s.output_dim = out;
  s.batchnorm = bn;
  return s;
}

// squared-error objective against fixed targets; grad filled via backward
double mlp_loss(Mlp& net, const Mat& x, const Mat& target, Vec* grad) {
  if (!grad) {
    Mlp::Cache cache;
    Mlp probe = net;  // keep running stats untouched for value-only calls
    const Mat y = probe.forward_train(x, cache);
    return 0.5 * (y - target).squaredNorm();
  }
  Mlp::Cache cache;
  const Mat y = net.forward_train(x, cache);
  grad->setZero();
  net.backward(cache, y - target, *grad);
  return 0.5 * (y - target).squaredNorm();
}

}  // namespace

TEST_CASE("mlp forward with zero parameters is zero") {
  Mlp net(small_spec(3, {4}, 2), 1);
  net.params().setZero();
  const Vec x = Vec::Constant(3, 1.5);
  const Vec y = net.forward(x);
  CHECK(y.isZero(0.0));
}

TEST_CASE("mlp forward identity layers pass nonnegative input") {
  Mlp net(small_spec(2, {2}, 2), 1);
  net.params().setZero();
  const auto& lay = net.layout();
  for (int l = 0; l < 2; ++l) {
    Eigen::Map<Mat> w(net.params().data() + lay.weight[l].offset, 2, 2);
    w.setIdentity();
  }
  Vec x(2);
  x << 1.0, 2.0;
  const Vec y = net.forward(x);
  CHECK(y(0) == doctest::Approx(1.0));
  CHECK(y(1) == doctest::Approx(2.0));
}

TEST_CASE("mlp forward matches hand arithmetic") {
  // 2 -> 2 -> 1, weights set by hand; oracle evaluated with plain loops
  Mlp net(small_spec(2, {2}, 1), 1);
  const auto& lay = net.layout();
  double w0[2][2] = {{0.5, -1.0}, {2.0, 0.25}};
  double b0[2] = {0.1, -0.2};
  double w1[1][2] = {{1.5, -0.5}};
  double b1[1] = {0.3};
  Eigen::Map<Mat> W0(net.params().data() + lay.weight[0].offset, 2, 2);
  Eigen::Map<Mat> W1(net.params().data() + lay.weight[1].offset, 1, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) W0(i, j) = w0[i][j];
  net.params()[lay.bias[0].offset] = b0[0];
  net.params()[lay.bias[0].offset + 1] = b0[1];
  W1(0, 0) = w1[0][0];
  W1(0, 1) = w1[0][1];
  net.params()[lay.bias[1].offset] = b1[0];

  const double x[2] = {1.0, -1.0};
  double h[2];
  for (int i = 0; i < 2; ++i) {
    h[i] = b0[i];
    for (int j = 0; j < 2; ++j) h[i] += w0[i][j] * x[j];
    h[i] = h[i] > 0.0 ? h[i] : 0.0;
  }
  double expect = b1[0];
  for (int j = 0; j < 2; ++j) expect += w1[0][j] * h[j];

  Vec xv(2);
  xv << x[0], x[1];
  CHECK(net.forward(xv)(0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mlp inference forward is pure") {
  Mlp net(small_spec(3, {5, 4}, 2, true), 7);
  Vec x(3);
  x << 0.3, -1.2, 2.0;
  const Vec y1 = net.forward(x);
  const Vec y2 = net.forward(x);
  CHECK(y1 == y2);
}

TEST_CASE("grad_scalar on linear and quadratic objectives") {
  const Vec p = Vec::LinSpaced(5, -2.0, 2.0);
  const Vec g_sum = ceip::grad_scalar(
      [](const Vec& params, Vec* grad) {
        if (grad) grad->setOnes();
        return params.sum();
      },
      p);
  CHECK(g_sum.isApprox(Vec::Ones(5)));

  const Vec g_quad = ceip::grad_scalar(
      [](const Vec& params, Vec* grad) {
        if (grad) *grad = params;
        return 0.5 * params.squaredNorm();
      },
      p);
  CHECK(g_quad.isApprox(p));
}

TEST_CASE("mlp gradients match finite differences") {
  ceip::Rng rng(42);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int in = 1 + static_cast<int>(rng.uniform_int(0, 3));
    const int out = 1 + static_cast<int>(rng.uniform_int(0, 2));
    std::vector<int> hidden;
    const int depth = 1 + static_cast<int>(rng.uniform_int(0, 1));
    for (int d = 0; d < depth; ++d)
      hidden.push_back(2 + static_cast<int>(rng.uniform_int(0, 4)));
    const bool bn = trial % 2 == 1;
    Mlp net(small_spec(in, hidden, out, bn), 1000 + trial);
    // fully random params (zero biases would park relu kinks exactly at
    // the evaluation point, where the loss is not differentiable)
    for (Eigen::Index i = 0; i < net.params().size(); ++i)
      net.params()[i] = rng.normal() * 0.6;

    const int batch = 3 + static_cast<int>(rng.uniform_int(0, 4));
    Mat x(in, batch), target(out, batch);
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < target.size(); ++i)
      target.data()[i] = rng.normal();

    Vec analytic = Vec::Zero(net.params().size());
    mlp_loss(net, x, target, &analytic);
    const Vec fd = oracles::fd_gradient(
        [&](const Vec& p) {
          Mlp probe = net;
          probe.params() = p;
          Vec* none = nullptr;
          return mlp_loss(probe, x, target, none);
        },
        net.params());
    CHECK(oracles::grad_rel_err(analytic, fd) <= 1e-4);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("batchnorm running stats follow the momentum update") {
  Mlp net(small_spec(1, {2}, 1, true), 3);
  Mat x(1, 4);
  x << 1.0, 2.0, 3.0, 4.0;
  Mlp::Cache cache;
  // linear layer output per unit: w*x + b
  const auto& lay = net.layout();
  Eigen::Map<Mat> W0(net.params().data() + lay.weight[0].offset, 2, 1);
  const Vec w = W0.col(0);
  const double b0 = net.params()[lay.bias[0].offset];
  const double b1 = net.params()[lay.bias[0].offset + 1];
  net.forward_train(x, cache);

  const double mean_x = 2.5;
  const double var_x = (2.25 + 0.25 + 0.25 + 2.25) / 4.0;  // biased
  for (int unit = 0; unit < 2; ++unit) {
    const double bias = unit == 0 ? b0 : b1;
    const double mu = w[unit] * mean_x + bias;
    const double var = w[unit] * w[unit] * var_x;
    CHECK(net.bn_state()[0].running_mean[unit] ==
          doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(net.bn_state()[0].running_var[unit] ==
          doctest::Approx(0.9 + 0.1 * var * 4.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("mlp state save/load round-trips") {
  Mlp net(small_spec(2, {3}, 2, true), 11);
  Mat x = Mat::Random(2, 5);
  Mlp::Cache cache;
  net.forward_train(x, cache);
  const Vec state = net.save_state();
  Mlp other(small_spec(2, {3}, 2, true), 99);
  other.load_state(state);
  CHECK(other.params() == net.params());
  CHECK(other.bn_state()[0].running_mean == net.bn_state()[0].running_mean);
  const Vec probe = Vec::Ones(2);
  CHECK(other.forward(probe) == net.forward(probe));
}

TEST_CASE("adam first step closed form") {
  Vec p(1), g(1);
  p << 0.7;
  g << 0.3;
  ceip::AdamState st(1);
  ceip::adam_step(p, g, st, {});
  const double expect = 0.7 - 0.001 * 0.3 / (0.3 + 1e-8);
  CHECK(p(0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(st.step_count == 1);
}

TEST_CASE("adam zero gradient from fresh state leaves params unchanged") {
  Vec p = Vec::LinSpaced(4, -1.0, 1.0);
  const Vec before = p;
  ceip::AdamState st(4);
  ceip::adam_step(p, Vec::Zero(4), st, {});
  CHECK(p == before);
  CHECK(st.first_moment.isZero(0.0));
}

TEST_CASE("adam moments decay under zero gradient") {
  Vec p = Vec::Zero(2);
  ceip::AdamState st(2);
  st.first_moment << 1.0, -2.0;
  st.second_moment << 0.5, 0.25;
  ceip::adam_step(p, Vec::Zero(2), st, {});
  CHECK(st.first_moment(0) == doctest::Approx(0.9));
  CHECK(st.second_moment(0) == doctest::Approx(0.5 * 0.999));
}

TEST_CASE("adam constant gradient moves monotonically") {
  Vec p(1);
  p << 0.0;
  Vec g(1);
  g << 2.0;
  ceip::AdamState st(1);
  double prev = p(0);
  for (int i = 0; i < 2; ++i) {
    ceip::adam_step(p, g, st, {});
    CHECK(p(0) < prev);
    prev = p(0);
  }
}

TEST_CASE("adam lr=0 is bit identical") {
  Vec p = Vec::Random(6);
  const Vec before = p;
  ceip::AdamState st(6);
  ceip::AdamConfig cfg;
  cfg.lr = 0.0;
  ceip::adam_step(p, Vec::Random(6), st, cfg);
  CHECK(p == before);
}

TEST_CASE("clip_grad_norm examples") {
  Vec g(2);
  g << 3.0, 4.0;
  CHECK(ceip::clip_grad_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g(0) == 3.0);
  CHECK(g(1) == 4.0);
  ceip::clip_grad_norm(g, 1.0);
  CHECK(g(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(g(1) == doctest::Approx(0.8).epsilon(1e-12));
  Vec z = Vec::Zero(3);
  ceip::clip_grad_norm(z, 1.0);
  CHECK(z.isZero(0.0));
}

TEST_CASE("clip_grad_norm is idempotent") {
  ceip::Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Vec g(8);
    for (int i = 0; i < 8; ++i) g(i) = rng.normal() * 10.0;
    Vec once = g;
    ceip::clip_grad_norm(once, 1e-4);
    Vec twice = once;
    ceip::clip_grad_norm(twice, 1e-4);
    CHECK((twice - once).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("split_indices shapes and determinism") {
  std::vector<int> tr, va, tr2, va2;
  ceip::split_indices(10, 0.8, 77, tr, va);
  CHECK(tr.size() == 8);
  CHECK(va.size() == 2);
  std::vector<bool> seen(10, false);
  for (int i : tr) seen[i] = true;
  for (int i : va) {
    CHECK(!seen[i]);
    seen[i] = true;
  }
  for (bool s : seen) CHECK(s);
  ceip::split_indices(10, 0.8, 77, tr2, va2);
  CHECK(tr == tr2);
  CHECK(va == va2);
  ceip::split_indices(4, 0.5, 1, tr, va);
  CHECK(tr.size() == 2);
  CHECK(va.size() == 2);
  CHECK_THROWS_AS(ceip::split_indices(1, 0.8, 0, tr, va), ceip::DataError);
}

namespace {

// least squares on fixed data; the minimal Trainable
struct LinearModel : ceip::Trainable {
  Vec w = Vec::Zero(2);
  std::vector<Vec> xs;
  std::vector<double> ys;
  bool poison = false;  // make loss_grad return NaN
  Vec& params() override { return w; }
  double loss_grad(const std::vector<int>& idx, Vec& grad) override {
    if (poison) return std::nan("");
    grad = Vec::Zero(2);
    double loss = 0.0;
    for (int i : idx) {
      const double err = w.dot(xs[i]) - ys[i];
      loss += 0.5 * err * err;
      grad += err * xs[i];
    }
    grad /= static_cast<double>(idx.size());
    return loss / static_cast<double>(idx.size());
  }
  double eval_loss(const std::vector<int>& idx) override {
    double loss = 0.0;
    for (int i : idx) {
      const double err = w.dot(xs[i]) - ys[i];
      loss += 0.5 * err * err;
    }
    return loss / static_cast<double>(idx.size());
  }
  Vec save_state() override { return w; }
  void load_state(const Vec& s) override { w = s; }
};

LinearModel make_regression(int n, std::uint64_t seed) {
  LinearModel m;
  ceip::Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Vec x(2);
    x << rng.normal(), rng.normal();
    m.xs.push_back(x);
    m.ys.push_back(1.5 * x(0) - 0.5 * x(1) + 0.01 * rng.normal());
  }
  return m;
}

}  // namespace

TEST_CASE("train_minibatch reduces loss and returns the best snapshot") {
  LinearModel m = make_regression(200, 9);
  ceip::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.clip_norm = 1.0;
  cfg.lr = 0.05;
  cfg.seed = 3;
  std::vector<int> tr, va;
  ceip::split_indices(200, 0.8, ceip::derive_seed(3, "split"), tr, va);
  const double init_val = m.eval_loss(va);
  const auto report = ceip::train_minibatch(m, 200, cfg);
  CHECK(report.best_val <= init_val);
  CHECK(report.best_val < 0.01);
  CHECK(m.eval_loss(va) == doctest::Approx(report.best_val));
  CHECK(report.batches_fed > 0);
}

TEST_CASE("train_minibatch early stopping triggers") {
  LinearModel m = make_regression(100, 21);
  ceip::TrainConfig cfg;
  cfg.epochs = 5000;
  cfg.batch_size = 10;
  cfg.clip_norm = 1.0;
  cfg.lr = 0.05;
  cfg.early_stop_min_batches = 50;
  cfg.seed = 4;
  const auto report = ceip::train_minibatch(m, 100, cfg);
  CHECK(report.early_stopped);
  CHECK(static_cast<int>(report.val_history.size()) < cfg.epochs);
}

TEST_CASE("train_minibatch aborts on non-finite loss with last-good state") {
  LinearModel m = make_regression(50, 33);
  m.poison = true;
  const Vec before = m.w;
  ceip::TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.seed = 5;
  const auto report = ceip::train_minibatch(m, 50, cfg);
  CHECK(report.aborted_nonfinite);
  CHECK(m.w == before);
}

TEST_CASE("train determinism: same seed same result") {
  LinearModel a = make_regression(120, 8);
  LinearModel b = make_regression(120, 8);
  ceip::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  cfg.clip_norm = 1.0;
  cfg.seed = 10;
  ceip::train_minibatch(a, 120, cfg);
  ceip::train_minibatch(b, 120, cfg);
  CHECK(a.w == b.w);
}
