#include "murag/optim.hpp"

#include <cmath>

namespace murag {

LearningRateSchedule constant_schedule(double lr) {
  return [lr](std::uint64_t) { return lr; };
}

template <typename T>
Adam<T>::Adam(ParameterList<T> params, LearningRateSchedule schedule, AdamOptions options)
    : params_(std::move(params)), schedule_(std::move(schedule)), options_(options) {
  first_.reserve(params_.size());
  second_.reserve(params_.size());
  for (const auto& p : params_) {
    first_.emplace_back(p.tensor.size(), T{0});
    second_.emplace_back(p.tensor.size(), T{0});
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& p : params_) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  const double lr = schedule_(step_);
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto grad = params_[i].tensor.grad();
    if (grad.empty()) continue;
    auto value = params_[i].tensor.mutable_data();
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + options_.eps);
      value[j] = static_cast<T>(value[j] - update);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace murag
