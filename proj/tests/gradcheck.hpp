#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "songgen/nn.hpp"

namespace gradcheck {

struct Result {
  double worst_relative = 0.0;
  std::string worst_param;
};

/// Compares analytic gradients of `loss(graph)` with central differences, parameter by
/// parameter. The error of a parameter is ||analytic - numeric|| / max(||analytic||, ||numeric||).
/// At most `max_entries` entries per parameter are probed (evenly strided).
inline Result check(songgen::nn::ParameterStore& store,
                    const std::function<songgen::nn::Var(songgen::nn::Graph&)>& loss, double h = 1e-6,
                    int max_entries = 40) {
  using songgen::nn::Graph;
  using songgen::nn::Mat;
  store.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  auto eval = [&] {
    Graph g(false);
    return loss(g).scalar();
  };
  Result res;
  for (const auto& p : store.all()) {
    const Eigen::Index n = p->value.size();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / max_entries);
    double diff2 = 0.0, an2 = 0.0, nu2 = 0.0;
    for (Eigen::Index i = 0; i < n; i += stride) {
      double& w = p->value.data()[i];
      const double w0 = w;
      w = w0 + h;
      const double up = eval();
      w = w0 - h;
      const double down = eval();
      w = w0;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[i];
      diff2 += (numeric - analytic) * (numeric - analytic);
      an2 += analytic * analytic;
      nu2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-12});
    const double rel = (an2 == 0.0 && nu2 == 0.0) ? 0.0 : std::sqrt(diff2) / denom;
    if (rel > res.worst_relative) {
      res.worst_relative = rel;
      res.worst_param = p->name;
    }
  }
  store.zero_grad();
  return res;
}

}  // namespace gradcheck
