#include "fsdet/gradcheck.hpp"

#include <cmath>

namespace fsdet::nn {

GradCheckResult gradcheck(const std::function<ad::Var()>& fn, std::vector<ad::Var> leaves,
                          double epsilon, const std::vector<std::string>& leaf_names) {
    for (auto& l : leaves) l.node()->zero_grad();
    ad::Var root = fn();
    ad::backward(root);

    // Snapshot analytic gradients before the perturbation loop.
    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) {
        analytic.push_back(l.has_grad() ? l.grad() : Tensor::zeros(l.val().shape()));
    }

    auto coord_name = [&](std::size_t li, std::int64_t i) {
        const std::string base =
            li < leaf_names.size() ? leaf_names[li] : ("input" + std::to_string(li));
        return base + "[" + std::to_string(i) + "]";
    };

    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& value = leaves[li].mutable_val();
        for (std::int64_t i = 0; i < value.numel(); ++i) {
            const double a = analytic[li][i];
            if (!std::isfinite(a)) {
                throw Error("gradcheck: non-finite analytic gradient at " + coord_name(li, i));
            }
            const double saved = value[i];
            value[i] = saved + epsilon;
            const double fp = fn().scalar();
            value[i] = saved - epsilon;
            const double fm = fn().scalar();
            value[i] = saved;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double err = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_coordinate = coord_name(li, i);
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace fsdet::nn
