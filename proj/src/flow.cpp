#include "ceip/flow.hpp"

#include <cmath>
#include <numbers>

#include "ceip/checkpoint.hpp"
#include "ceip/errors.hpp"

namespace ceip {

void AffineMap::validate() const {
  if (scale.size() != shift.size()) throw ShapeError("affine map dim mismatch");
  if (!scale.allFinite() || !shift.allFinite())
    throw NumericError("non-finite affine map");
  if ((scale.array() <= 0.0).any())
    throw NumericError("affine scale must be positive");
}

Vec affine_forward(const AffineMap& map, const Vec& z) {
  if (z.size() != map.scale.size()) throw ShapeError("latent dim mismatch");
  return map.scale.cwiseProduct(z) + map.shift;
}

Vec affine_inverse(const AffineMap& map, const Vec& a) {
  if (a.size() != map.scale.size()) throw ShapeError("action dim mismatch");
  return (a - map.shift).cwiseQuotient(map.scale);
}

double affine_log_likelihood(const AffineMap& map, const Vec& a) {
  const Vec z = affine_inverse(map, a);
  const double q = static_cast<double>(a.size());
  return -0.5 * q * std::log(2.0 * std::numbers::pi) - 0.5 * z.squaredNorm() -
         map.scale.array().log().sum();
}

double batch_affine_nll(const Mat& scale, const Mat& shift, const Mat& A,
                        Mat* dscale, Mat* dshift) {
  if (scale.rows() != A.rows() || scale.cols() != A.cols() ||
      shift.rows() != A.rows() || shift.cols() != A.cols())
    throw ShapeError("batch nll shape mismatch");
  const double b = static_cast<double>(A.cols());
  const double q = static_cast<double>(A.rows());
  const Mat z = (A - shift).cwiseQuotient(scale);
  const double nll = 0.5 * q * std::log(2.0 * std::numbers::pi) +
                     (0.5 * z.array().square() + scale.array().log()).sum() / b;
  if (dscale) *dscale = (1.0 - z.array().square()) / scale.array() / b;
  if (dshift) *dshift = -z.array() / scale.array() / b;
  return nll;
}

ConditionedAffineFlow::ConditionedAffineFlow(MlpSpec c_spec, MlpSpec d_spec,
                                             std::uint64_t seed)
    : c_net_(c_spec, derive_seed(seed, "c")),
      d_net_(d_spec, derive_seed(seed, "d")) {
  if (c_spec.input_dim != d_spec.input_dim)
    throw ShapeError("c and d nets must share the condition dim");
  if (c_spec.output_dim != d_spec.output_dim)
    throw ShapeError("c and d nets must share the action dim");
}

ConditionedAffineFlow ConditionedAffineFlow::identity(int condition_dim,
                                                      int q) {
  MlpSpec s;
  s.input_dim = condition_dim;
  s.hidden_widths = {1};
  s.output_dim = q;
  ConditionedAffineFlow f(s, s, 0);
  f.set_joint_params(Vec::Zero(f.joint_params().size()));
  return f;
}

AffineMap ConditionedAffineFlow::effective_affine(const Vec& u) const {
  if (u.size() != condition_dim()) throw ShapeError("condition dim mismatch");
  AffineMap map;
  map.scale = c_net_.forward(u)
                  .cwiseMin(kClampBound)
                  .cwiseMax(-kClampBound)
                  .array()
                  .exp();
  map.shift = d_net_.forward(u);
  return map;
}

void ConditionedAffineFlow::effective_affine_batch(const Mat& U, Mat& scale,
                                                   Mat& shift) const {
  scale = c_net_.forward(U)
              .cwiseMin(kClampBound)
              .cwiseMax(-kClampBound)
              .array()
              .exp();
  shift = d_net_.forward(U);
}

Vec ConditionedAffineFlow::joint_params() const {
  Vec p(c_net_.params().size() + d_net_.params().size());
  p << c_net_.params(), d_net_.params();
  return p;
}

void ConditionedAffineFlow::set_joint_params(const Vec& p) {
  const auto nc = c_net_.params().size();
  if (p.size() != nc + d_net_.params().size())
    throw ShapeError("joint param size mismatch");
  c_net_.params() = p.head(nc);
  d_net_.params() = p.tail(d_net_.params().size());
}

Vec ConditionedAffineFlow::joint_state() const {
  const Vec cs = c_net_.save_state();
  const Vec ds = d_net_.save_state();
  Vec s(cs.size() + ds.size());
  s << cs, ds;
  return s;
}

void ConditionedAffineFlow::set_joint_state(const Vec& s) {
  const auto nc = c_net_.state_size();
  if (s.size() != nc + d_net_.state_size())
    throw ShapeError("joint state size mismatch");
  c_net_.load_state(s.head(nc));
  d_net_.load_state(s.tail(d_net_.state_size()));
}

double flow_loss_grad(ConditionedAffineFlow& flow,
                      const std::vector<UaPair>& batch, Vec* grad) {
  Mat U(flow.condition_dim(), batch.size());
  Mat A(flow.action_dim(), batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    U.col(i) = batch[i].u;
    A.col(i) = batch[i].a;
  }
  Mlp::Cache c_cache, d_cache;
  const Mat c_raw = flow.c_net().forward_train(U, c_cache);
  const Mat shift = flow.d_net().forward_train(U, d_cache);
  const double bound = ConditionedAffineFlow::kClampBound;
  const Mat scale = c_raw.cwiseMin(bound).cwiseMax(-bound).array().exp();

  if (!grad) return batch_affine_nll(scale, shift, A);
  Mat dscale, dshift;
  const double nll = batch_affine_nll(scale, shift, A, &dscale, &dshift);
  // through exp then clamp: d nll / d c_raw = dscale * scale inside bounds
  const Mat inside =
      ((c_raw.array() > -bound) && (c_raw.array() < bound)).cast<double>();
  const Mat dc = dscale.array() * scale.array() * inside.array();

  const auto nc = flow.c_net().params().size();
  Vec gc = Vec::Zero(nc);
  Vec gd = Vec::Zero(flow.d_net().params().size());
  flow.c_net().backward(c_cache, dc, gc);
  flow.d_net().backward(d_cache, dshift, gd);
  grad->resize(nc + gd.size());
  *grad << gc, gd;
  return nll;
}

namespace {

// joint MLE over (c_net, d_net) through the shared minibatch loop
struct FlowTrainable final : Trainable {
  ConditionedAffineFlow& flow;
  const std::vector<UaPair>& pairs;
  Vec joint;

  FlowTrainable(ConditionedAffineFlow& f, const std::vector<UaPair>& p)
      : flow(f), pairs(p), joint(f.joint_params()) {}

  Vec& params() override { return joint; }

  void gather(const std::vector<int>& idx, std::vector<UaPair>& batch) const {
    batch.clear();
    for (const int i : idx) batch.push_back(pairs[i]);
  }

  double loss_grad(const std::vector<int>& idx, Vec& grad) override {
    flow.set_joint_params(joint);
    std::vector<UaPair> batch;
    gather(idx, batch);
    return flow_loss_grad(flow, batch, &grad);
  }

  double eval_loss(const std::vector<int>& idx) override {
    flow.set_joint_params(joint);
    Mat U(flow.condition_dim(), idx.size());
    Mat A(flow.action_dim(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      U.col(i) = pairs[idx[i]].u;
      A.col(i) = pairs[idx[i]].a;
    }
    Mat scale, shift;
    flow.effective_affine_batch(U, scale, shift);
    return batch_affine_nll(scale, shift, A);
  }

  Vec save_state() override {
    flow.set_joint_params(joint);
    return flow.joint_state();
  }

  void load_state(const Vec& s) override {
    flow.set_joint_state(s);
    joint = flow.joint_params();
  }
};

}  // namespace

TrainReport train_single_flow(ConditionedAffineFlow& flow,
                              const std::vector<UaPair>& pairs,
                              const TrainConfig& cfg) {
  if (pairs.size() < 2) throw DataError("flow training needs >= 2 pairs");
  for (const auto& p : pairs) {
    if (p.u.size() != flow.condition_dim() || p.a.size() != flow.action_dim())
      throw ShapeError("pair dims do not match flow");
  }
  FlowTrainable model(flow, pairs);
  const TrainReport report =
      train_minibatch(model, static_cast<int>(pairs.size()), cfg);
  return report;
}

nlohmann::json spec_to_json(const MlpSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"hidden_widths", spec.hidden_widths},
          {"output_dim", spec.output_dim},
          {"batchnorm", spec.batchnorm}};
}

MlpSpec spec_from_json(const nlohmann::json& j) {
  MlpSpec spec;
  spec.input_dim = j.at("input_dim").get<int>();
  spec.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
  spec.output_dim = j.at("output_dim").get<int>();
  spec.batchnorm = j.at("batchnorm").get<bool>();
  return spec;
}

void save_flow(const std::string& path, const ConditionedAffineFlow& flow,
               const nlohmann::json& extra_meta) {
  Checkpoint ck;
  ck.kind = "flow";
  const Vec cs = flow.c_net().save_state();
  const Vec ds = flow.d_net().save_state();
  ck.values.resize(cs.size() + ds.size());
  ck.values << cs, ds;
  ck.sections = {{"c_state", 0, cs.size()}, {"d_state", cs.size(), ds.size()}};
  ck.meta["c_spec"] = spec_to_json(flow.c_net().spec());
  ck.meta["d_spec"] = spec_to_json(flow.d_net().spec());
  ck.meta["condition_dim"] = flow.condition_dim();
  ck.meta["q"] = flow.action_dim();
  ck.meta["clamp_bound"] = ConditionedAffineFlow::kClampBound;
  for (const auto& [key, value] : extra_meta.items()) ck.meta[key] = value;
  save_checkpoint(path, ck);
}

ConditionedAffineFlow load_flow(const std::string& path,
                                nlohmann::json* meta) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "flow") throw IoError("not a flow checkpoint: " + path);
  ConditionedAffineFlow flow(spec_from_json(ck.meta.at("c_spec")),
                             spec_from_json(ck.meta.at("d_spec")), 0);
  flow.c_net().load_state(ck.section("c_state"));
  flow.d_net().load_state(ck.section("d_state"));
  if (meta) *meta = ck.meta;
  return flow;
}

std::string flow_digest(const ConditionedAffineFlow& flow) {
  const Vec s = flow.joint_state();
  return to_hex(fnv1a64(s.data(), s.size() * sizeof(double)));
}

}  // namespace ceip
