#include "ganshare/diffmath/optim.hpp"

#include <cmath>

namespace ganshare::diffmath {

template <class S>
Optimizer<S>::Optimizer(OptimizerConfig cfg, std::vector<Var<S>> params)
    : cfg_(cfg), params_(std::move(params)) {
  for (const auto& p : params_) {
    buf1_.push_back(Tensor<S>::zeros(p->shape()));
    if (cfg_.kind == OptKind::adam) buf2_.push_back(Tensor<S>::zeros(p->shape()));
  }
}

template <class S>
void Optimizer<S>::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p->has_grad)
      throw NumericError("optimizer step with missing gradient for parameter " +
                         (p->name.empty() ? std::to_string(i) : p->name));
    const auto& g = p->grad.data;
    auto& w = p->value.data;
    const S lr = static_cast<S>(cfg_.learning_rate);
    if (cfg_.kind == OptKind::sgd_momentum) {
      const S m = static_cast<S>(cfg_.momentum);
      auto& v = buf1_[i].data;
      for (size_t j = 0; j < w.size(); ++j) {
        v[j] = m * v[j] + g[j];
        w[j] -= lr * v[j];
      }
    } else {
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      const S eps = static_cast<S>(cfg_.epsilon);
      auto& m1 = buf1_[i].data;
      auto& m2 = buf2_[i].data;
      for (size_t j = 0; j < w.size(); ++j) {
        m1[j] = b1 * m1[j] + (S(1) - b1) * g[j];
        m2[j] = b2 * m2[j] + (S(1) - b2) * g[j] * g[j];
        w[j] -= lr * m1[j] / (std::sqrt(m2[j]) + eps);
      }
    }
  }
  steps_++;
}

template <class S>
void Optimizer<S>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace ganshare::diffmath
