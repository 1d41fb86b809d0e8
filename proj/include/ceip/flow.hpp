#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ceip/dataset.hpp"
#include "ceip/numerics.hpp"
#include "json.hpp"

namespace ceip {

struct AffineMap {
  Vec scale;  // strictly positive
  Vec shift;

  void validate() const;
};

Vec affine_forward(const AffineMap& map, const Vec& z);
Vec affine_inverse(const AffineMap& map, const Vec& a);
// log density of a under scale*z+shift with standard-normal z
double affine_log_likelihood(const AffineMap& map, const Vec& a);

// Mean NLL of action batch A (q x B) under per-column affine maps given by
// scale/shift matrices; optionally fills gradients of the mean NLL w.r.t.
// scale and shift entries. Shared by single-flow and combination training.
double batch_affine_nll(const Mat& scale, const Mat& shift, const Mat& A,
                        Mat* dscale = nullptr, Mat* dshift = nullptr);

// Conditional 1-layer affine flow a = exp{c(u)} (*) z + d(u), with c
// clamped to +-kClampBound before exponentiation.
class ConditionedAffineFlow {
 public:
  static constexpr double kClampBound = 10.0;

  ConditionedAffineFlow() = default;
  ConditionedAffineFlow(MlpSpec c_spec, MlpSpec d_spec, std::uint64_t seed);

  // c == 0 and d == 0 everywhere: scale 1, shift 0 for every condition.
  static ConditionedAffineFlow identity(int condition_dim, int q);

  int condition_dim() const { return c_net_.spec().input_dim; }
  int action_dim() const { return c_net_.spec().output_dim; }

  Mlp& c_net() { return c_net_; }
  const Mlp& c_net() const { return c_net_; }
  Mlp& d_net() { return d_net_; }
  const Mlp& d_net() const { return d_net_; }

  AffineMap effective_affine(const Vec& u) const;
  // inference-mode scale/shift for a condition batch U (cond x B)
  void effective_affine_batch(const Mat& U, Mat& scale, Mat& shift) const;

  // joint parameter/state packing across both nets
  Vec joint_params() const;
  void set_joint_params(const Vec& p);
  Vec joint_state() const;
  void set_joint_state(const Vec& s);

 private:
  Mlp c_net_, d_net_;
};

// Mean NLL of a pair batch and, when grad is non-null, its gradient in
// joint (c_net | d_net) parameter space; batchnorm in training mode. This
// is the exact loss surface train_single_flow descends.
double flow_loss_grad(ConditionedAffineFlow& flow,
                      const std::vector<UaPair>& batch, Vec* grad);

// MLE on (u, a) pairs via the shared minibatch loop; returns the training
// report, leaving the flow at its best-validation snapshot.
TrainReport train_single_flow(ConditionedAffineFlow& flow,
                              const std::vector<UaPair>& pairs,
                              const TrainConfig& cfg);

nlohmann::json spec_to_json(const MlpSpec& spec);
MlpSpec spec_from_json(const nlohmann::json& j);

void save_flow(const std::string& path, const ConditionedAffineFlow& flow,
               const nlohmann::json& extra_meta = nlohmann::json::object());
ConditionedAffineFlow load_flow(const std::string& path,
                                nlohmann::json* meta = nullptr);
// content hash over the full flow state; identity for cache keys
std::string flow_digest(const ConditionedAffineFlow& flow);

}  // namespace ceip
