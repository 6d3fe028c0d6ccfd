#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gat/tensor.hpp"

namespace gat {

// relative error with the usual guarded denominator
inline double fd_rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 1e-4;
    std::string worst;
    bool pass = true;
};

// builds a scalar loss from tape-bound copies of the leaves
using LossBuilder = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

namespace detail {

inline double eval_perturbed(const LossBuilder& f, const std::vector<Tensor>& leaves,
                             std::size_t leaf, std::size_t index, double delta) {
    std::vector<Tensor> local = leaves;
    std::vector<double> d(local[leaf].vec());
    d[index] += delta;
    local[leaf] = Tensor::of(local[leaf].shape(), std::move(d));
    Tape tape;
    std::vector<Tensor> bound;
    bound.reserve(local.size());
    for (const Tensor& l : local) bound.push_back(tape.watch(l));
    return f(tape, bound).item();
}

}  // namespace detail

// Central finite differences against the tape gradient, elementwise over
// every leaf. `corrupt` shifts the analytic gradient and exists only so
// the checker itself can be tested (a broken backward must be caught).
// `abs_floor` is the denominator guard; deep composites pass a larger
// floor because central differences on a loss of magnitude L measure
// nothing below ~L*eps/h, so tinier gradients are pure noise.
inline GradCheckResult check_gradients(const std::string& name, const LossBuilder& f,
                                       const std::vector<Tensor>& leaves, double h = 1e-5,
                                       double tol = 1e-4, double corrupt = 0.0,
                                       double abs_floor = 1e-8) {
    Tape tape;
    std::vector<Tensor> bound;
    bound.reserve(leaves.size());
    for (const Tensor& l : leaves) bound.push_back(tape.watch(l));
    const Tensor loss = f(tape, bound);
    const GradMap grads = tape.backward(loss);

    GradCheckResult res;
    res.name = name;
    res.tol = tol;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const std::vector<double>* ga = grads.of(bound[li]);
        for (std::size_t i = 0; i < leaves[li].size(); ++i) {
            const double analytic = (ga ? (*ga)[i] : 0.0) + corrupt;
            const double fp = detail::eval_perturbed(f, leaves, li, i, +h);
            const double fm = detail::eval_perturbed(f, leaves, li, i, -h);
            const double numeric = (fp - fm) / (2.0 * h);
            const double re =
                std::abs(analytic - numeric) / std::max({std::abs(analytic),
                                                         std::abs(numeric), abs_floor});
            if (re > res.max_rel_err) {
                res.max_rel_err = re;
                std::ostringstream os;
                os << "leaf " << li << " elem " << i << ": tape " << analytic << " vs fd "
                   << numeric;
                res.worst = os.str();
            }
        }
    }
    res.pass = res.max_rel_err <= tol;
    return res;
}

}  // namespace gat
