#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ceip/flow.hpp"

namespace ceip {

// Combination flow: frozen base flows plus a coefficient net emitting
// (mu, lambda); scale = sum_i mu_i(u) * scale_i(u), shift = sum_i
// lambda_i(u) * shift_i(u), itself a valid affine flow.
class CombinedFlow {
 public:
  static constexpr double kMuOffset = 1e-4;

  CombinedFlow() = default;
  CombinedFlow(std::vector<ConditionedAffineFlow> bases, MlpSpec coeff_spec,
               std::uint64_t seed);

  int n_flows() const { return static_cast<int>(bases_.size()); }
  int condition_dim() const { return bases_.at(0).condition_dim(); }
  int action_dim() const { return bases_.at(0).action_dim(); }

  const std::vector<ConditionedAffineFlow>& bases() const { return bases_; }
  Mlp& coeff_net() { return coeff_net_; }
  const Mlp& coeff_net() const { return coeff_net_; }

  // Externally supplied coefficients bypass the net and the softplus head
  // entirely (testing hook and the PARROT special case).
  void inject_coefficients(const Vec& mu, const Vec& lambda);
  void clear_injection();
  bool injected() const { return injected_.has_value(); }

  // mu = softplus(raw_mu) + offset, lambda = raw_lambda (inference mode)
  void coefficients(const Vec& u, Vec& mu, Vec& lambda) const;
  AffineMap effective_affine(const Vec& u) const;

  std::vector<std::string> base_digests() const;

 private:
  std::vector<ConditionedAffineFlow> bases_;
  Mlp coeff_net_;
  std::optional<std::pair<Vec, Vec>> injected_;

  friend double combination_loss_grad(CombinedFlow&,
                                      const std::vector<UaPair>&, Vec*);
};

// Mean NLL of a pair batch under the combined flow and, when grad is
// non-null, its gradient w.r.t. the coefficient-net parameters only (the
// base flows stay frozen, batchnorm of the coeff net in training mode).
double combination_loss_grad(CombinedFlow& cf, const std::vector<UaPair>& batch,
                             Vec* grad);

// Inference-mode mean NLL (validation / reporting).
double combination_eval_nll(const CombinedFlow& cf,
                            const std::vector<UaPair>& batch);

// Trains the coefficient net on task-specific pairs with the shared loop;
// base-flow parameters are bit-identical afterwards.
TrainReport train_combination(CombinedFlow& cf,
                              const std::vector<UaPair>& pairs,
                              const TrainConfig& cfg);

// Combined checkpoint = coefficient-net state + base-flow content hashes;
// loading verifies the supplied bases against the stored hashes.
void save_combined(const std::string& path, const CombinedFlow& cf,
                   const nlohmann::json& extra_meta = nlohmann::json::object());
CombinedFlow load_combined(const std::string& path,
                           std::vector<ConditionedAffineFlow> bases,
                           nlohmann::json* meta = nullptr);

}  // namespace ceip
