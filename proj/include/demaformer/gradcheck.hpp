#pragma once

#include <functional>
#include <string>
#include <vector>

#include "demaformer/tensor.hpp"

namespace demaformer {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;  // "param#/index" of the worst entry
    bool finite = true;
};

// Central-difference gradient verification. f builds a scalar loss from the
// current values of params; it must be deterministic and free of RNG. The
// analytic gradient comes from one taped backward pass, the reference from
// (f(p+h) - f(p-h)) / 2h per parameter entry. Reported error is
//   max over entries of |analytic - central| / max(1, |central|).
// Any non-finite evaluation makes the result +infinity.
GradCheckReport finite_diff_check_report(const std::function<Tensor()>& f,
                                         const std::vector<Tensor>& params, double h = 1e-5);

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h = 1e-5);

}  // namespace demaformer
