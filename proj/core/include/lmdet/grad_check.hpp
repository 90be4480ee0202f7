#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lmdet/tensor.hpp"

namespace lmdet {

struct GradCheckReport {
    double max_err = 0.0;   // worst relative error over all checked coordinates
    std::size_t coords = 0; // coordinates checked
    std::string worst;      // "<leaf index>[<coord>]" of the worst coordinate
};

/// Compare analytic gradients against central finite differences.
///
/// `make_loss` must rebuild the graph from the current leaf values and return
/// a scalar loss; it is re-evaluated with each leaf coordinate nudged by
/// +/- eps. Every leaf must already require grad (requires_grad is per
/// tensor object, so flipping it on the copies held here would not reach the
/// tensors make_loss closes over). Error per coordinate:
/// |analytic - fd| / max(1e-8, |fd|). Checks should evaluate at points away
/// from activation kinks with losses of O(1), otherwise fd round-off noise
/// dominates the quotient.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& make_loss,
                           std::vector<Tensor<T>> leaves, T eps) {
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        if (!leaves[li].requires_grad())
            throw ContractError("grad_check: leaf " + std::to_string(li) +
                                " does not require grad");
        leaves[li].zero_grad();
    }
    Tensor<T> loss = make_loss();
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError("grad_check: non-finite loss");
    backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) analytic.push_back(leaf.grad());
    release_graph(loss);

    GradCheckReport report;
    NoGradGuard guard;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        std::vector<T>& x = leaves[li].values();
        for (std::size_t j = 0; j < x.size(); ++j) {
            const T saved = x[j];
            x[j] = saved + eps;
            const double lp = static_cast<double>(make_loss().item());
            x[j] = saved - eps;
            const double lm = static_cast<double>(make_loss().item());
            x[j] = saved;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw NumericError("grad_check: non-finite loss during differencing");

            const double fd = (lp - lm) / (2.0 * static_cast<double>(eps));
            const double an = static_cast<double>(analytic[li][j]);
            const double err = std::abs(an - fd) / std::max(1e-8, std::abs(fd));
            ++report.coords;
            if (err > report.max_err) {
                report.max_err = err;
                report.worst = std::to_string(li) + "[" + std::to_string(j) + "]";
            }
        }
    }
    return report;
}

}  // namespace lmdet
