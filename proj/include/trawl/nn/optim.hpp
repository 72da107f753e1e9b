#pragma once

#include <cmath>

#include "trawl/nn/tape.hpp"

namespace trawl::nn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive moment estimation over a ParamStore. Iterates parameters in
// registration order so updates are reproducible.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(ParamStore& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& tp : params.items()) {
      Tensor& p = *tp;
      if (p.grad.empty()) p.grad = Mat(p.value.rows, p.value.cols);
      if (p.adam_m.empty()) {
        p.adam_m = Mat(p.value.rows, p.value.cols);
        p.adam_v = Mat(p.value.rows, p.value.cols);
      }
      for (std::size_t k = 0; k < p.value.a.size(); ++k) {
        double g = p.grad.a[k];
        p.adam_m.a[k] = cfg_.beta1 * p.adam_m.a[k] + (1.0 - cfg_.beta1) * g;
        p.adam_v.a[k] = cfg_.beta2 * p.adam_v.a[k] + (1.0 - cfg_.beta2) * g * g;
        double mhat = p.adam_m.a[k] / bc1;
        double vhat = p.adam_v.a[k] / bc2;
        p.value.a[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  long step_count() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace trawl::nn
