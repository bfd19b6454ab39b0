#pragma once

#include <functional>
#include <string>

#include "cmkd/tape.hpp"

namespace cmkd {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  long long worst_coord = -1;
  long long coords_checked = 0;
};

// Central-difference check of analytic gradients against numeric ones for
// every coordinate of every parameter in the store. `f` must be a
// deterministic scalar function of the parameters; when `table` is non-null
// it must also backward the loss into it.
//
// Relative error per coordinate: |ga - gn| / max(1, |ga|, |gn|).
template <typename T>
GradCheckResult grad_check(const std::function<T(ParamStoreT<T>&, GradTableT<T>*)>& f,
                           ParamStoreT<T>& params, T eps);

extern template GradCheckResult grad_check<float>(
    const std::function<float(ParamStoreT<float>&, GradTableT<float>*)>&, ParamStoreT<float>&, float);
extern template GradCheckResult grad_check<double>(
    const std::function<double(ParamStoreT<double>&, GradTableT<double>*)>&, ParamStoreT<double>&,
    double);

} // namespace cmkd
