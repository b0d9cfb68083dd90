#pragma once

// Central finite-difference gradient checking.
//
// The builder is a generic callable (Graph<T>&, std::vector<Var<T>>&) -> Var<T>
// returning a scalar. Analytic gradients come from the float32 graph; finite
// differences are evaluated on the same expression in double precision, so
// the reference is limited only by truncation error. Coordinates whose
// +/- eps evaluations take a different branch through a piecewise op (relu,
// max pooling, min/max, clamp) are skipped: a finite difference across a kink
// does not estimate the derivative.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "patchforge/autodiff.hpp"
#include "patchforge/rng.hpp"

namespace patchforge::support {

struct GradCheckOptions {
  double eps = 1e-3;
  double rel_tol = 1e-3;
  double abs_tol = 1e-5;
  /// Maximum coordinates checked per input (0 = all). Sampled uniformly.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t failures = 0;
  double worst_excess = 0.0;  ///< max of |a - fd| / tolerance
  std::string first_failure;

  bool ok() const { return failures == 0 && checked > 0; }
};

template <class Builder>
double evaluate_double(Builder& build, const std::vector<Tensor<double>>& inputs, ad::BranchTrace* trace) {
  ad::Graph<double> g;
  std::vector<ad::Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t, false));
  if (trace) {
    ad::ScopedTrace scope(*trace);
    return build(g, vars).value().item();
  }
  return build(g, vars).value().item();
}

template <class Builder>
std::vector<Tensor<float>> analytic_gradients(Builder& build, const std::vector<Tensor<double>>& inputs,
                                              const std::vector<std::size_t>& wrt) {
  ad::Graph<float> g;
  std::vector<ad::Var<float>> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    bool rg = false;
    for (auto w : wrt) rg = rg || w == i;
    vars.push_back(g.leaf(inputs[i].cast<float>(), rg));
  }
  auto loss = build(g, vars);
  g.backward(loss);
  std::vector<Tensor<float>> out;
  for (auto w : wrt) out.push_back(g.grad(vars[w]));
  return out;
}

template <class Builder>
GradCheckReport gradcheck(Builder&& build, std::vector<Tensor<double>> inputs, const std::vector<std::size_t>& wrt,
                          const GradCheckOptions& opt = {}) {
  // Analytic and reference evaluations must see the same point; round the
  // inputs to float first.
  for (auto& t : inputs) t = t.cast<float>().template cast<double>();
  const auto grads = analytic_gradients(build, inputs, wrt);
  GradCheckReport rep;
  Rng rng(opt.seed);
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const std::size_t which = wrt[k];
    const std::size_t n = inputs[which].numel();
    std::vector<std::size_t> coords;
    if (opt.max_coords == 0 || opt.max_coords >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_coords; ++i)
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
    }
    ad::BranchTrace base;
    evaluate_double(build, inputs, &base);
    for (std::size_t idx : coords) {
      const double orig = inputs[which][idx];
      ad::BranchTrace tp, tm;
      inputs[which][idx] = orig + opt.eps;
      const double fp = evaluate_double(build, inputs, &tp);
      inputs[which][idx] = orig - opt.eps;
      const double fm = evaluate_double(build, inputs, &tm);
      inputs[which][idx] = orig;
      if (tp.hash != base.hash || tm.hash != base.hash) {
        ++rep.skipped;
        continue;
      }
      const double fd = (fp - fm) / (2 * opt.eps);
      const double a = grads[k][idx];
      const double tol = std::max(opt.rel_tol * std::abs(fd), opt.abs_tol);
      const double excess = std::abs(a - fd) / tol;
      rep.worst_excess = std::max(rep.worst_excess, excess);
      ++rep.checked;
      if (excess > 1.0) {
        if (rep.failures == 0) {
          std::ostringstream os;
          os << "input " << which << " coord " << idx << ": analytic " << a << " vs fd " << fd;
          rep.first_failure = os.str();
        }
        ++rep.failures;
      }
    }
  }
  return rep;
}

/// Random tensor with entries uniform in [lo, hi).
inline Tensor<double> random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Weighted sum of all elements of x with fixed weights; turns any tensor
/// output into a scalar with a non-trivial upstream gradient.
template <class T>
ad::Var<T> weighted_sum(const ad::Var<T>& x, const Tensor<double>& weights) {
  auto w = x.graph().constant(weights.template cast<T>().reshaped(x.shape()));
  return ad::sum(ad::mul(x, w));
}

}  // namespace patchforge::support
