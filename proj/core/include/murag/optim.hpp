#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "murag/tensor.hpp"

namespace murag {

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

// Maps the 1-based step number to a learning rate.
using LearningRateSchedule = std::function<double(std::uint64_t)>;

LearningRateSchedule constant_schedule(double lr);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments live alongside the parameter handles,
// so the optimizer must be rebuilt if the parameter set changes.
template <typename T>
class Adam {
 public:
  Adam(ParameterList<T> params, LearningRateSchedule schedule, AdamOptions options = {});

  // Applies one update from the accumulated gradients. Throws NumericError
  // naming the parameter if any gradient coordinate is not finite; in that
  // case no parameter is modified.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return step_; }
  const ParameterList<T>& parameters() const { return params_; }
  std::span<const T> first_moment(std::size_t i) const { return first_[i]; }
  std::span<const T> second_moment(std::size_t i) const { return second_[i]; }

 private:
  ParameterList<T> params_;
  LearningRateSchedule schedule_;
  AdamOptions options_;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
  std::uint64_t step_ = 0;
};

}  // namespace murag
