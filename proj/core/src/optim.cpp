#include "dslstm/optim.hpp"

#include <cmath>

namespace dslstm::train {

template <typename T>
Adam<T>::Adam(std::vector<ad::Parameter<T>*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto* p : params_) {
    if (p->grad.shape() != p->value.shape()) {
      throw ShapeError("gradient of " + p->name + " has shape " + ad::shape_str(p->grad.shape()));
    }
    for (const T g : p->grad.values()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p->name);
    }
  }
  ++step_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    T* w = params_[k]->value.data();
    const T* g = params_[k]->grad.data();
    T* m = m_[k].data();
    T* v = v_[k].data();
    for (std::size_t i = 0, n = params_[k]->value.size(); i < n; ++i) {
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g[i]);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
    }
  }
}

template <typename T>
double clip_grad_norm(std::span<ad::Parameter<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (const T g : p->grad.values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto* p : params) {
      for (T& g : p->grad.values()) g *= factor;
    }
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm(std::span<ad::Parameter<float>* const>, double);
template double clip_grad_norm(std::span<ad::Parameter<double>* const>, double);

}  // namespace dslstm::train
