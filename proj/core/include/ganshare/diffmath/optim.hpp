#pragma once

#include <vector>

#include "ganshare/diffmath/autodiff.hpp"

namespace ganshare::diffmath {

enum class OptKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptKind kind = OptKind::sgd_momentum;
  double learning_rate = 0.001;
  double momentum = 0.9;          // sgd_momentum
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;  // adam

  static OptimizerConfig sgd(double lr, double momentum) {
    return {OptKind::sgd_momentum, lr, momentum, 0, 0, 0};
  }
  static OptimizerConfig adam(double lr, double beta1, double beta2, double eps = 1e-8) {
    return {OptKind::adam, lr, 0, beta1, beta2, eps};
  }
};

// Holds per-parameter auxiliary buffers; step() consumes accumulated grads and
// leaves them in place (zeroing is a separate explicit call).
//
// sgd_momentum: v <- m*v + g;            p <- p - lr*v
// adam:         m1 <- b1*m1 + (1-b1)*g;  m2 <- b2*m2 + (1-b2)*g^2
//               p <- p - lr * m1 / (sqrt(m2) + eps)     (no bias correction)
template <class S>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Var<S>> params);

  void step();
  void zero_grad();
  int64_t steps_taken() const { return steps_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Var<S>> params_;
  std::vector<Tensor<S>> buf1_;  // momentum / first moment
  std::vector<Tensor<S>> buf2_;  // second moment (adam)
  int64_t steps_ = 0;
};

}  // namespace ganshare::diffmath
