#include "cmkd/grad_check.hpp"

#include <cmath>

namespace cmkd {

template <typename T>
GradCheckResult grad_check(const std::function<T(ParamStoreT<T>&, GradTableT<T>*)>& f,
                           ParamStoreT<T>& params, T eps) {
  GradTableT<T> table(params);
  const T base = f(params, &table);
  require(std::isfinite(static_cast<double>(base)), Err::NonFinite, "loss is not finite");

  GradCheckResult res;
  for (int pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].value.data;
    const TensorT<T>* analytic =
        table.grads[static_cast<std::size_t>(pi)].data.empty() ? nullptr : &table.grads[static_cast<std::size_t>(pi)];
    for (std::size_t k = 0; k < value.size(); ++k) {
      const T saved = value[k];
      value[k] = saved + eps;
      const T up = f(params, nullptr);
      value[k] = saved - eps;
      const T down = f(params, nullptr);
      value[k] = saved;
      require(std::isfinite(static_cast<double>(up)) && std::isfinite(static_cast<double>(down)),
              Err::NonFinite, "finite-difference probe produced a non-finite loss");
      const double gn = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * static_cast<double>(eps));
      const double ga = analytic ? static_cast<double>(analytic->data[k]) : 0.0;
      const double rel = std::abs(ga - gn) / std::max({1.0, std::abs(ga), std::abs(gn)});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[pi].name;
        res.worst_coord = static_cast<long long>(k);
      }
    }
  }
  return res;
}

template GradCheckResult grad_check<float>(
    const std::function<float(ParamStoreT<float>&, GradTableT<float>*)>&, ParamStoreT<float>&, float);
template GradCheckResult grad_check<double>(
    const std::function<double(ParamStoreT<double>&, GradTableT<double>*)>&, ParamStoreT<double>&,
    double);

} // namespace cmkd
