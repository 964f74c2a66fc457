#pragma once

// Central-difference gradient check shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "idguard/autograd.hpp"
#include "idguard/rng.hpp"

namespace idguard::testing {

struct GradCheck {
  double max_error = 0;  // |analytic - numeric| / max(floor, |analytic|, |numeric|)
  int checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({floor, std::abs(analytic), std::abs(numeric)});
}

/// Backpropagates `analytic` once and compares against central differences of
/// `numeric`. The two differ only when a branch must be held constant for the
/// difference quotient (a stop-gradient target). Both closures must rebuild
/// the graph from the current leaf values on every call.
inline GradCheck gradcheck_split(const std::vector<ag::Var<double>*>& leaves,
                                 const std::function<ag::Var<double>()>& analytic,
                                 const std::function<ag::Var<double>()>& numeric, double h = 1e-6,
                                 double floor = 1.0) {
  for (auto* v : leaves) v->zero_grad();
  ag::backward(analytic());
  std::vector<Tensor<double>> grads;
  for (auto* v : leaves) grads.push_back(v->grad().empty() ? Tensor<double>(v->shape()) : v->grad());
  GradCheck out;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& x = leaves[l]->mutable_value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      double up, down;
      {
        ag::NoGradGuard ng;
        x[i] = keep + h;
        up = numeric().item();
        x[i] = keep - h;
        down = numeric().item();
      }
      x[i] = keep;
      out.max_error = std::max(out.max_error, relative_error(grads[l][i], (up - down) / (2 * h), floor));
      ++out.checked;
    }
  }
  for (auto* v : leaves) v->zero_grad();
  return out;
}

inline GradCheck gradcheck(const std::vector<ag::Var<double>*>& leaves, const std::function<ag::Var<double>()>& loss,
                           double h = 1e-6, double floor = 1.0) {
  return gradcheck_split(leaves, loss, loss, h, floor);
}

inline Tensor<double> randn(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

}  // namespace idguard::testing
