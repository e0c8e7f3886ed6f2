#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cstn/tensor.hpp"

namespace cstn {

/// A differentiable scalar function of the given inputs. Implementations
/// must recompute from the tensors' current values on every call (the
/// checker perturbs them in place).
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
    int worst_input = -1;
    std::int64_t worst_element = -1;
    std::int64_t checked = 0;
};

/// Compares analytic gradients against central finite differences.
/// Relative error per element: |a - n| / max(1, |a| + |n|). With
/// sample_elems > 0 only that many randomly chosen elements (across all
/// requires-grad inputs) are probed, for expensive composite cases.
GradCheckReport gradcheck(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                          double epsilon, double tolerance,
                          int sample_elems = -1, std::uint64_t sample_seed = 0);

struct GradCase {
    ScalarFn fn;
    std::vector<Tensor> inputs;
    int sample_elems = -1;
};

struct GradCheckEntry {
    std::string name;
    double tolerance;
    std::function<GradCase(Rng&)> make_case;
};

/// All registered differentiable operations, each with a randomized case
/// generator and its tolerance class (1e-6 linear, 1e-4 composite/model).
const std::vector<GradCheckEntry>& gradcheck_registry();

/// Runs one entry at the given seed (epsilon 1e-5 by default).
GradCheckReport run_gradcheck_entry(const GradCheckEntry& entry, std::uint64_t seed,
                                    double epsilon = 1e-5);

/// Negative control: a case whose recorded backward rule is wrong, which a
/// working checker must fail.
GradCase corrupted_backward_case(Rng& rng);

} // namespace cstn
