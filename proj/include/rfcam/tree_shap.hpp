#pragma once

// Exact path-dependent Shapley values of a tree ensemble's raw margin.

#include <span>
#include <string>
#include <vector>

#include "rfcam/gbdt.hpp"

namespace rfcam {

struct ShapAttribution {
    std::vector<double> alpha;  // per-feature contribution
    double alpha0 = 0.0;        // expected margin (base value)
    int class_index = 0;
    std::string instance_id;

    // alpha0 + sum(alpha); equals the model margin up to rounding.
    double total() const;

    bool operator==(const ShapAttribution&) const = default;
};

// Cover-weighted mean leaf value of one tree.
double expected_tree_value(const Tree& tree);

// base_score plus each tree's cover-weighted mean leaf value.
double expected_margin(const TreeEnsemble& model);

// Throws NumericalError if a traversed node has non-positive cover.
ShapAttribution shap_for_instance(const TreeEnsemble& model, std::span<const double> phi,
                                  std::string instance_id = {});
inline ShapAttribution shap_for_instance(const TreeEnsemble& model,
                                         const SurrogateFeatureVector& phi,
                                         std::string instance_id = {}) {
    return shap_for_instance(model, phi.values, std::move(instance_id));
}

}  // namespace rfcam
