#ifndef SEPAL_TESTS_GRADCHECK_HPP
#define SEPAL_TESTS_GRADCHECK_HPP

#include "sepal/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testing_support {

using sepal::Matrix;
using sepal::nn::Tape;
using sepal::nn::Var;

// Builds a scalar loss from leaves holding the given inputs.
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
    double max_rel = 0;
    std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps round-off on vanishing gradients from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double loss_value(const std::vector<Matrix>& inputs, const LossFn& f) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& m : inputs) {
        vars.push_back(t.leaf(m));
    }
    return t.value(f(t, vars))(0, 0);
}

// Central differences against the tape gradient for every input element.
inline GradCheck grad_check(std::vector<Matrix> inputs, const LossFn& f, double eps = 1e-5) {
    std::vector<Matrix> analytic;
    {
        Tape t;
        std::vector<Var> vars;
        for (const auto& m : inputs) {
            vars.push_back(t.leaf(m));
        }
        auto loss = f(t, vars);
        t.backward(loss);
        for (auto v : vars) {
            analytic.push_back(t.grad(v));
        }
    }
    GradCheck out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t e = 0; e < inputs[k].size(); ++e) {
            const double keep = inputs[k].data()[e];
            inputs[k].data()[e] = keep + eps;
            const double up = loss_value(inputs, f);
            inputs[k].data()[e] = keep - eps;
            const double down = loss_value(inputs, f);
            inputs[k].data()[e] = keep;
            const double numeric = (up - down) / (2 * eps);
            out.max_rel = std::max(out.max_rel, relative_error(analytic[k].data()[e], numeric));
            ++out.checked;
        }
    }
    return out;
}

}

#endif
