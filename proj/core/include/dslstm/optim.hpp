#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dslstm/tensor.hpp"

namespace dslstm::train {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Holds pointers; the parameters must outlive it.
template <typename T>
class Adam {
 public:
  Adam(std::vector<ad::Parameter<T>*> params, AdamOptions opts = {});

  /// Throws NumericError naming the first parameter with a non-finite
  /// gradient; nothing is updated in that case.
  void step();

  std::size_t steps() const { return step_; }
  const AdamOptions& options() const { return opts_; }
  const ad::Tensor<T>& first_moment(std::size_t i) const { return m_[i]; }
  const ad::Tensor<T>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<ad::Parameter<T>*> params_;
  AdamOptions opts_;
  std::vector<ad::Tensor<T>> m_;
  std::vector<ad::Tensor<T>> v_;
  std::size_t step_ = 0;
};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<ad::Parameter<T>* const> params, double max_norm);

}  // namespace dslstm::train
