#pragma once

// Gradient-boosted decision trees with logistic loss, used as per-class local
// surrogate models (LSMs) that predict whether the classifier was correct.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rfcam/saliency.hpp"
#include "rfcam/tensor_store.hpp"

namespace rfcam {

struct BoostConfig {
    int num_rounds = 50;
    int max_depth = 4;
    double learning_rate = 0.1;
    double min_child_cover = 1.0;
    double l2_regularization = 1.0;
    double positive_weight = 1.0;  // sample weight of label-1 examples
    std::uint64_t seed = 42;

    void validate() const;
    bool operator==(const BoostConfig&) const = default;
};

struct TreeNode {
    int feature_index = -1;  // -1 marks a leaf
    double threshold = 0.0;  // x < threshold goes left
    int left = -1;
    int right = -1;
    double leaf_value = 0.0;
    double cover = 0.0;  // hessian mass routed through the node

    bool is_leaf() const { return feature_index < 0; }
    bool operator==(const TreeNode&) const = default;
};

// Flat node array; node 0 is the root.
struct Tree {
    std::vector<TreeNode> nodes;

    double predict(std::span<const double> x) const;
    bool operator==(const Tree&) const = default;
};

struct LsmMetrics {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    int train_count = 0;
    int test_count = 0;

    bool operator==(const LsmMetrics&) const = default;
};

struct TreeEnsemble {
    std::vector<Tree> trees;
    double base_score = 0.0;  // initial log-odds
    int class_index = 0;
    int feature_count = 0;
    BoostConfig training_config;
    LsmMetrics metrics;

    bool operator==(const TreeEnsemble&) const = default;
};

// label 1 = the classifier got this instance right.
struct LabeledExample {
    std::string id;
    SurrogateFeatureVector phi;
    int label = 0;
};

double logistic(double margin);

TreeEnsemble train_lsm(int class_index, std::span<const LabeledExample> examples,
                       const BoostConfig& config);

// Raw log-odds: base_score plus the sum of leaf values reached.
double predict_margin(const TreeEnsemble& model, std::span<const double> phi);
inline double predict_margin(const TreeEnsemble& model, const SurrogateFeatureVector& phi) {
    return predict_margin(model, phi.values);
}

// Fraction of examples whose thresholded probability (>= 0.5) matches the label.
double accuracy(const TreeEnsemble& model, std::span<const LabeledExample> examples);

// Mean logistic loss over the examples, evaluated with the first `tree_count` trees.
double logistic_loss(const TreeEnsemble& model, std::span<const LabeledExample> examples,
                     std::size_t tree_count);

std::string ensemble_to_json(const TreeEnsemble& model);
TreeEnsemble ensemble_from_json(const std::string& text);
void save_ensemble(const std::filesystem::path& path, const TreeEnsemble& model);
TreeEnsemble load_ensemble(const std::filesystem::path& path);

struct ClassExamples {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> test;
    bool available() const { return !train.empty(); }
};

// Groups entries by true label and labels each one by classifier correctness.
// Surrogate inputs use the gradients of the predicted class.
std::map<int, ClassExamples> build_misclassification_labels(const TensorBundle& bundle);

}  // namespace rfcam
