#include "ceip/mixture.hpp"

#include <cmath>

#include "ceip/checkpoint.hpp"
#include "ceip/errors.hpp"

namespace ceip {

namespace {

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x > 0.0 ? 1.0 / (1.0 + std::exp(-x))
                 : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

CombinedFlow::CombinedFlow(std::vector<ConditionedAffineFlow> bases,
                           MlpSpec coeff_spec, std::uint64_t seed)
    : bases_(std::move(bases)), coeff_net_(coeff_spec, seed) {
  if (bases_.empty()) throw ConfigError("combined flow needs base flows");
  for (const auto& b : bases_) {
    if (b.condition_dim() != bases_[0].condition_dim() ||
        b.action_dim() != bases_[0].action_dim())
      throw ConfigError("base flows must share condition and action dims");
  }
  if (coeff_spec.input_dim != bases_[0].condition_dim())
    throw ConfigError("coeff net input must equal the condition dim");
  if (coeff_spec.output_dim != 2 * n_flows())
    throw ConfigError("coeff net must emit 2*(n+1) outputs");
}

void CombinedFlow::inject_coefficients(const Vec& mu, const Vec& lambda) {
  if (mu.size() != n_flows() || lambda.size() != n_flows())
    throw ShapeError("injected coefficient length mismatch");
  injected_ = std::make_pair(mu, lambda);
}

void CombinedFlow::clear_injection() { injected_.reset(); }

void CombinedFlow::coefficients(const Vec& u, Vec& mu, Vec& lambda) const {
  if (injected_) {
    mu = injected_->first;
    lambda = injected_->second;
    return;
  }
  if (u.size() != condition_dim()) throw ShapeError("condition dim mismatch");
  const Vec raw = coeff_net_.forward(u);
  const int n = n_flows();
  mu.resize(n);
  lambda = raw.tail(n);
  for (int i = 0; i < n; ++i) mu[i] = softplus(raw[i]) + kMuOffset;
}

AffineMap CombinedFlow::effective_affine(const Vec& u) const {
  Vec mu, lambda;
  coefficients(u, mu, lambda);
  AffineMap out;
  out.scale = Vec::Zero(action_dim());
  out.shift = Vec::Zero(action_dim());
  for (int i = 0; i < n_flows(); ++i) {
    const AffineMap base = bases_[i].effective_affine(u);
    out.scale += mu[i] * base.scale;
    out.shift += lambda[i] * base.shift;
  }
  return out;
}

std::vector<std::string> CombinedFlow::base_digests() const {
  std::vector<std::string> out;
  out.reserve(bases_.size());
  for (const auto& b : bases_) out.push_back(flow_digest(b));
  return out;
}

double combination_loss_grad(CombinedFlow& cf, const std::vector<UaPair>& batch,
                             Vec* grad) {
  if (cf.injected())
    throw ConfigError("cannot train with injected coefficients");
  const int n = cf.n_flows();
  const int q = cf.action_dim();
  const auto b = static_cast<Eigen::Index>(batch.size());
  Mat U(cf.condition_dim(), b), A(q, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    U.col(i) = batch[i].u;
    A.col(i) = batch[i].a;
  }

  // frozen bases evaluated in inference mode
  std::vector<Mat> base_scale(n), base_shift(n);
  for (int i = 0; i < n; ++i)
    cf.bases_[i].effective_affine_batch(U, base_scale[i], base_shift[i]);

  Mlp::Cache cache;
  const Mat raw = cf.coeff_net_.forward_train(U, cache);
  Mat mu(n, b), lambda = raw.bottomRows(n);
  for (int i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < b; ++c)
      mu(i, c) = softplus(raw(i, c)) + CombinedFlow::kMuOffset;

  Mat scale = Mat::Zero(q, b), shift = Mat::Zero(q, b);
  for (int i = 0; i < n; ++i) {
    scale.array() += base_scale[i].array().rowwise() * mu.row(i).array();
    shift.array() += base_shift[i].array().rowwise() * lambda.row(i).array();
  }

  if (!grad) return batch_affine_nll(scale, shift, A);

  Mat dscale, dshift;
  const double nll = batch_affine_nll(scale, shift, A, &dscale, &dshift);
  Mat grad_raw(2 * n, b);
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < b; ++c) {
      const double dmu = dscale.col(c).dot(base_scale[i].col(c));
      grad_raw(i, c) = dmu * sigmoid(raw(i, c));
      grad_raw(n + i, c) = dshift.col(c).dot(base_shift[i].col(c));
    }
  }
  grad->resize(cf.coeff_net_.params().size());
  grad->setZero();
  cf.coeff_net_.backward(cache, grad_raw, *grad);
  return nll;
}

double combination_eval_nll(const CombinedFlow& cf,
                            const std::vector<UaPair>& batch) {
  const int n = cf.n_flows();
  const int q = cf.action_dim();
  const auto b = static_cast<Eigen::Index>(batch.size());
  Mat U(cf.condition_dim(), b), A(q, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    U.col(i) = batch[i].u;
    A.col(i) = batch[i].a;
  }

  Mat mu(n, b), lambda(n, b);
  if (cf.injected()) {
    Vec mu1, lam1;
    cf.coefficients(U.col(0), mu1, lam1);
    mu = mu1.replicate(1, b);
    lambda = lam1.replicate(1, b);
  } else {
    const Mat raw = cf.coeff_net().forward(U);
    lambda = raw.bottomRows(n);
    for (int i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < b; ++c)
        mu(i, c) = softplus(raw(i, c)) + CombinedFlow::kMuOffset;
  }

  Mat scale = Mat::Zero(q, b), shift = Mat::Zero(q, b);
  for (int i = 0; i < n; ++i) {
    Mat bscale, bshift;
    cf.bases()[i].effective_affine_batch(U, bscale, bshift);
    scale.array() += bscale.array().rowwise() * mu.row(i).array();
    shift.array() += bshift.array().rowwise() * lambda.row(i).array();
  }
  return batch_affine_nll(scale, shift, A);
}

namespace {

struct CombinationTrainable final : Trainable {
  CombinedFlow& cf;
  const std::vector<UaPair>& pairs;

  CombinationTrainable(CombinedFlow& c, const std::vector<UaPair>& p)
      : cf(c), pairs(p) {}

  Vec& params() override { return cf.coeff_net().params(); }

  double loss_grad(const std::vector<int>& idx, Vec& grad) override {
    std::vector<UaPair> batch;
    batch.reserve(idx.size());
    for (const int i : idx) batch.push_back(pairs[i]);
    return combination_loss_grad(cf, batch, &grad);
  }

  double eval_loss(const std::vector<int>& idx) override {
    std::vector<UaPair> batch;
    batch.reserve(idx.size());
    for (const int i : idx) batch.push_back(pairs[i]);
    return combination_eval_nll(cf, batch);
  }

  Vec save_state() override { return cf.coeff_net().save_state(); }
  void load_state(const Vec& s) override { cf.coeff_net().load_state(s); }
};

}  // namespace

TrainReport train_combination(CombinedFlow& cf,
                              const std::vector<UaPair>& pairs,
                              const TrainConfig& cfg) {
  if (pairs.size() < 2) throw DataError("combination needs >= 2 pairs");
  for (const auto& p : pairs)
    if (p.u.size() != cf.condition_dim() || p.a.size() != cf.action_dim())
      throw ShapeError("pair dims do not match combined flow");
  CombinationTrainable model(cf, pairs);
  return train_minibatch(model, static_cast<int>(pairs.size()), cfg);
}

void save_combined(const std::string& path, const CombinedFlow& cf,
                   const nlohmann::json& extra_meta) {
  Checkpoint ck;
  ck.kind = "combined";
  ck.values = cf.coeff_net().save_state();
  ck.sections = {{"coeff_state", 0, ck.values.size()}};
  ck.meta["coeff_spec"] = spec_to_json(cf.coeff_net().spec());
  ck.meta["n_flows"] = cf.n_flows();
  ck.meta["condition_dim"] = cf.condition_dim();
  ck.meta["q"] = cf.action_dim();
  ck.meta["mu_offset"] = CombinedFlow::kMuOffset;
  ck.meta["base_digests"] = cf.base_digests();
  for (const auto& [key, value] : extra_meta.items()) ck.meta[key] = value;
  save_checkpoint(path, ck);
}

CombinedFlow load_combined(const std::string& path,
                           std::vector<ConditionedAffineFlow> bases,
                           nlohmann::json* meta) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "combined") throw IoError("not a combined checkpoint: " + path);
  CombinedFlow cf(std::move(bases), spec_from_json(ck.meta.at("coeff_spec")),
                  0);
  const auto stored = ck.meta.at("base_digests").get<std::vector<std::string>>();
  const auto actual = cf.base_digests();
  if (stored != actual)
    throw IoError("base flow digests do not match combined checkpoint: " +
                  path);
  cf.coeff_net().load_state(ck.section("coeff_state"));
  if (meta) *meta = ck.meta;
  return cf;
}

}  // namespace ceip
