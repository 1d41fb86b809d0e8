#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "ceip/errors.hpp"
#include "ceip/rng.hpp"

namespace ceip {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;  // feature dim x batch

enum class Activation { relu };

struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden_widths;
  int output_dim = 0;
  Activation activation = Activation::relu;
  bool batchnorm = false;

  void validate() const;
  int num_linear() const { return static_cast<int>(hidden_widths.size()) + 1; }
  std::vector<std::pair<int, int>> linear_dims() const;  // (in, out) per layer
  Eigen::Index param_count() const;

  bool operator==(const MlpSpec&) const = default;
};

// Slice table mapping (layer, role) into the flat parameter vector.
struct ParamLayout {
  struct Slice {
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
  };
  std::vector<Slice> weight, bias;  // per linear layer
  std::vector<Slice> gamma, beta;   // per hidden layer, batchnorm only
  Eigen::Index total = 0;
};

ParamLayout make_layout(const MlpSpec& spec);

struct BatchNormState {
  Vec running_mean, running_var;
};

// Fully-connected net with relu hidden activations and optional
// pre-activation batchnorm on the hidden layers (not on the output).
class Mlp {
 public:
  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  Mlp() = default;
  Mlp(MlpSpec spec, std::uint64_t init_seed);

  const MlpSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  std::vector<BatchNormState>& bn_state() { return bn_; }
  const std::vector<BatchNormState>& bn_state() const { return bn_; }

  // Inference mode: batchnorm uses running averages. Pure function.
  Mat forward(const Mat& x) const;
  Vec forward(const Vec& x) const;

  struct Cache {
    Mat input;
    std::vector<Mat> post;     // activation output per hidden layer
    std::vector<Mat> xhat;     // normalized pre-activations (batchnorm)
    std::vector<Vec> inv_std;  // 1/sqrt(var + eps) (batchnorm)
  };

  // Training mode: batchnorm uses batch statistics and updates running
  // averages. Batch size must be >= 2 when batchnorm is on.
  Mat forward_train(const Mat& x, Cache& cache);

  // Reverse accumulation from dL/d(output). Adds into param_grad (sized
  // and zeroed by the caller); writes dL/d(input) when grad_in is given.
  void backward(const Cache& cache, const Mat& grad_out, Vec& param_grad,
                Mat* grad_in = nullptr) const;

  // Params followed by batchnorm running stats; snapshot unit.
  Vec save_state() const;
  void load_state(const Vec& state);
  Eigen::Index state_size() const;

 private:
  MlpSpec spec_;
  ParamLayout layout_;
  Vec params_;
  std::vector<BatchNormState> bn_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Vec first_moment, second_moment;
  long step_count = 0;

  AdamState() = default;
  explicit AdamState(Eigen::Index n)
      : first_moment(Vec::Zero(n)), second_moment(Vec::Zero(n)) {}
};

void adam_step(Vec& params, const Vec& grads, AdamState& state,
               const AdamConfig& cfg);

// Scales grads in place when the L2 norm exceeds max_norm; returns the
// pre-clip norm.
double clip_grad_norm(Vec& grads, double max_norm);

// Evaluates a differentiable scalar objective and returns its gradient.
// The callable computes the value and, when grad is non-null, fills it by
// reverse accumulation. Throws NumericError on a non-finite gradient.
using ScalarObjective = std::function<double(const Vec& params, Vec* grad)>;
Vec grad_scalar(const ScalarObjective& objective, const Vec& params);

// ---- shared minibatch trainer ----

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 40;
  double lr = 1e-3;
  double clip_norm = 1e-4;
  double val_ratio = 0.2;
  long early_stop_min_batches = 1000;
  double early_stop_window_frac = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainReport {
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;  // -1 means the initial snapshot was never beaten
  long batches_fed = 0;
  bool early_stopped = false;
  bool aborted_nonfinite = false;
  std::vector<double> train_history;  // epoch-mean training loss
  std::vector<double> val_history;    // loss at each epoch end
};

// Adapter the shared loop trains through. Implementations own their
// parameters and the bound dataset; idx indexes into that dataset.
struct Trainable {
  virtual ~Trainable() = default;
  virtual Vec& params() = 0;
  // Mean loss over idx in training mode; fills grad (resized as needed).
  virtual double loss_grad(const std::vector<int>& idx, Vec& grad) = 0;
  // Mean loss over idx in inference mode.
  virtual double eval_loss(const std::vector<int>& idx) = 0;
  virtual Vec save_state() = 0;
  virtual void load_state(const Vec& state) = 0;
};

// Shuffled disjoint index split; |train| = round(train_ratio * n).
void split_indices(int n, double train_ratio, std::uint64_t seed,
                   std::vector<int>& train, std::vector<int>& val);

// Minibatch Adam with gradient clipping, epoch-end validation, best-
// validation snapshotting and early stopping. Returns the model restored
// to its best snapshot. A non-finite training loss aborts, keeping the
// last good snapshot.
TrainReport train_minibatch(Trainable& model, int n_items,
                            const TrainConfig& cfg);

}  // namespace ceip
