#pragma once

// Small builders shared across test files.

#include "ceip/flow.hpp"
#include "ceip/numerics.hpp"

namespace helpers {

inline ceip::MlpSpec net_spec(int in, int width, int out, bool bn = false) {
  ceip::MlpSpec s;
  s.input_dim = in;
  s.hidden_widths = {width};
  s.output_dim = out;
  s.batchnorm = bn;
  return s;
}

// zero weights, output bias = value: net computes a constant
inline void make_constant_net(ceip::Mlp& net, const ceip::Vec& value) {
  net.params().setZero();
  const auto& lay = net.layout();
  for (Eigen::Index i = 0; i < value.size(); ++i)
    net.params()[lay.bias.back().offset + i] = value[i];
}

// flow with constant effective map (scale, shift) regardless of u
inline ceip::ConditionedAffineFlow constant_flow(int cond_dim,
                                                 const ceip::Vec& scale,
                                                 const ceip::Vec& shift) {
  ceip::ConditionedAffineFlow flow(
      net_spec(cond_dim, 4, static_cast<int>(scale.size())),
      net_spec(cond_dim, 4, static_cast<int>(scale.size())), 1);
  make_constant_net(flow.c_net(), scale.array().log().matrix());
  make_constant_net(flow.d_net(), shift);
  return flow;
}

}  // namespace helpers
