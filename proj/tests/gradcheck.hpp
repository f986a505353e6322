#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bpq/autograd.hpp"
#include "bpq/random.hpp"

namespace gradcheck {

using bpq::Tape;
using bpq::Tensor64;
using bpq::Var;

using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct Result {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
};

// |a - n| / max(|n|, 1e-8), denominator from the finite difference alone.
inline double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max(std::fabs(numeric), 1e-8);
}

inline double evaluate(std::vector<Tensor64*>& params, const Builder& build) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (auto* p : params) vars.push_back(tape.parameter(*p, false));
  return build(tape, vars).value()[0];
}

// Compares tape gradients with central differences on up to `samples`
// coordinates per tensor (all coordinates when the tensor is smaller).
inline std::vector<Result> check(std::vector<Tensor64*> params, const Builder& build, std::size_t samples,
                                 std::uint64_t seed, double step = 1e-5, double tol = 1e-4) {
  std::vector<Tensor64> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto* p : params) vars.push_back(tape.parameter(*p, true));
    const auto loss = build(tape, vars);
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor64* g = tape.grad(vars[i]);
      analytic.push_back(g != nullptr ? *g : Tensor64(params[i]->shape()));
    }
  }
  bpq::Rng rng(seed);
  std::vector<Result> out(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor64& p = *params[t];
    std::vector<std::size_t> coords;
    if (p.size() <= samples) {
      for (std::size_t i = 0; i < p.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < samples; ++i) coords.push_back(rng.index(p.size()));
    }
    for (std::size_t i : coords) {
      const double saved = p[i];
      p[i] = saved + step;
      const double up = evaluate(params, build);
      p[i] = saved - step;
      const double down = evaluate(params, build);
      p[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double err = relative_error(analytic[t][i], numeric);
      out[t].checked++;
      out[t].passed += err < tol;
      out[t].worst = std::max(out[t].worst, err);
    }
  }
  return out;
}

}  // namespace gradcheck
