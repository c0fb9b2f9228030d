// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "fedmoe/tensor.hpp"

namespace fedmoe {

// Bias-corrected Adam over a fixed parameter list. Moment buffers shape-match
// their parameters; the step counter only moves forward.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    // Applies one update in place from each parameter's current grad
    // (missing grads count as zero), then increments the step counter.
    void step();

    // Drops all grad buffers on the tracked parameters.
    void zero_grad();

    const AdamState& state() const { return state_; }

private:
    std::vector<Tensor> params_;
    AdamState state_;
};

}  // namespace fedmoe
