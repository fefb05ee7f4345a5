#pragma once

// Central finite-difference gradient checker. The analytic side is the float
// autodiff graph; the reference side is a caller-supplied 64-bit loss over
// the same input values. Kept framework-free so both the Catch2 suite and the
// acceptance binary can use it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "emotalk/tensor.hpp"

namespace fdcheck {

struct Result {
    double worst_rel = 0.0;
    std::size_t checked = 0;

    bool ok(double tol = 1e-3) const { return checked > 0 && worst_rel < tol; }
    void fold(const Result& other) {
        worst_rel = std::max(worst_rel, other.worst_rel);
        checked += other.checked;
    }
};

// inputs: the leaf tensors (requires_grad) whose analytic grads to verify.
// loss: scalar output of the recorded graph over those inputs.
// ref_loss: 64-bit loss over perturbable copies of the same input values.
inline Result run(const std::vector<emotalk::GradTensor>& inputs, const emotalk::GradTensor& loss,
                  const std::function<double(const std::vector<std::vector<double>>&)>& ref_loss,
                  double eps = 1e-4) {
    loss.backward();
    std::vector<std::vector<double>> slots;
    slots.reserve(inputs.size());
    for (const auto& t : inputs) slots.emplace_back(t.values().begin(), t.values().end());

    Result res;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& grad = inputs[i].grad();
        for (std::size_t e = 0; e < slots[i].size(); ++e) {
            const double orig = slots[i][e];
            slots[i][e] = orig + eps;
            const double fp = ref_loss(slots);
            slots[i][e] = orig - eps;
            const double fm = ref_loss(slots);
            slots[i][e] = orig;
            const double fd = (fp - fm) / (2.0 * eps);
            const double ad = static_cast<double>(grad[e]);
            const double rel = std::abs(ad - fd) / std::max(std::abs(fd), 1e-3);
            res.worst_rel = std::max(res.worst_rel, rel);
            ++res.checked;
        }
    }
    return res;
}

// Fixed random coefficients turning a tensor-valued op into a scalar loss.
inline std::vector<float> coefs_for(std::size_t n, emotalk::Rng& rng) {
    std::vector<float> c(n);
    for (auto& v : c) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return c;
}

inline std::vector<double> to_double(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

} // namespace fdcheck
