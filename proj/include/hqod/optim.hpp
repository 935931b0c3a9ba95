/* Copyright 2026 The HQOD Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <cmath>
#include <vector>

#include "hqod/tensor.hpp"

namespace hqod {

// Adam over groups of leaf tensors, each group with its own learning rate.
class Adam {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
  };

  explicit Adam(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& g : groups_)
      for (auto& p : g.params) state_.push_back({std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0)});
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        auto& st = state_[k++];
        if (!p.has_grad()) continue;
        const auto& grad = p.grad();
        auto& v = p.mutable_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
          st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * grad[i];
          st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * grad[i] * grad[i];
          v[i] -= g.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
        }
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  std::vector<Group> groups_;
  std::vector<State> state_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

}  // namespace hqod
