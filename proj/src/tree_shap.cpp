#include "rfcam/tree_shap.hpp"

#include <numeric>

#include "rfcam/errors.hpp"

namespace rfcam {

namespace {

// One element of the unique-feature path from the root to the current node.
struct PathElement {
    int feature = -1;
    double zero_fraction = 0.0;  // share of cover flowing here when the feature is absent
    double one_fraction = 0.0;   // 1 if x follows this branch when the feature is present
    double weight = 0.0;         // permutation weight of subsets of this size
};

using Path = std::vector<PathElement>;

void extend_path(Path& path, int depth, double zero_fraction, double one_fraction, int feature) {
    path[depth] = {feature, zero_fraction, one_fraction, depth == 0 ? 1.0 : 0.0};
    for (int i = depth - 1; i >= 0; --i) {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) / (depth + 1);
        path[i].weight = zero_fraction * path[i].weight * (depth - i) / (depth + 1);
    }
}

void unwind_path(Path& path, int depth, int index) {
    const double one = path[index].one_fraction;
    const double zero = path[index].zero_fraction;
    double next = path[depth].weight;
    for (int i = depth - 1; i >= 0; --i) {
        if (one != 0.0) {
            const double tmp = path[i].weight;
            path[i].weight = next * (depth + 1) / ((i + 1) * one);
            next = tmp - path[i].weight * zero * (depth - i) / (depth + 1);
        } else {
            path[i].weight = path[i].weight * (depth + 1) / (zero * (depth - i));
        }
    }
    for (int i = index; i < depth; ++i) {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

// Total permutation weight of the path with element `index` removed.
double unwound_sum(const Path& path, int depth, int index) {
    const double one = path[index].one_fraction;
    const double zero = path[index].zero_fraction;
    double next = path[depth].weight;
    double total = 0.0;
    for (int i = depth - 1; i >= 0; --i) {
        if (one != 0.0) {
            const double tmp = next * (depth + 1) / ((i + 1) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) / (depth + 1);
        } else {
            total += path[i].weight * (depth + 1) / (zero * (depth - i));
        }
    }
    return total;
}

class TreeExplainer {
public:
    TreeExplainer(const Tree& tree, std::size_t tree_index, std::span<const double> x,
                  std::vector<double>& alpha)
        : tree_(tree), tree_index_(tree_index), x_(x), alpha_(alpha) {}

    void run() {
        Path path(max_depth(0, 0) + 2);
        recurse(0, path, 0, 1.0, 1.0, -1);
    }

private:
    int max_depth(int node, int depth) const {
        const TreeNode& n = tree_.nodes[node];
        if (n.is_leaf()) return depth;
        return std::max(max_depth(n.left, depth + 1), max_depth(n.right, depth + 1));
    }

    double child_share(int parent, int child) const {
        const double cover = tree_.nodes[parent].cover;
        if (!(cover > 0.0)) {
            throw NumericalError("tree " + std::to_string(tree_index_) + " node " +
                                 std::to_string(parent) + " has non-positive cover");
        }
        return tree_.nodes[child].cover / cover;
    }

    void recurse(int node, Path path, int depth, double zero_fraction, double one_fraction,
                 int feature) {
        extend_path(path, depth, zero_fraction, one_fraction, feature);
        const TreeNode& n = tree_.nodes[node];

        if (n.is_leaf()) {
            for (int i = 1; i <= depth; ++i) {
                const double w = unwound_sum(path, depth, i);
                alpha_[path[i].feature] +=
                    w * (path[i].one_fraction - path[i].zero_fraction) * n.leaf_value;
            }
            return;
        }

        const bool goes_left = x_[n.feature_index] < n.threshold;
        const int hot = goes_left ? n.left : n.right;
        const int cold = goes_left ? n.right : n.left;

        // A feature repeated along the path is folded into a single element.
        double incoming_zero = 1.0, incoming_one = 1.0;
        for (int i = 1; i <= depth; ++i) {
            if (path[i].feature == n.feature_index) {
                incoming_zero = path[i].zero_fraction;
                incoming_one = path[i].one_fraction;
                unwind_path(path, depth, i);
                --depth;
                break;
            }
        }

        const double hot_share = child_share(node, hot);
        const double cold_share = child_share(node, cold);
        recurse(hot, path, depth + 1, hot_share * incoming_zero, incoming_one, n.feature_index);
        recurse(cold, path, depth + 1, cold_share * incoming_zero, 0.0, n.feature_index);
    }

    const Tree& tree_;
    std::size_t tree_index_;
    std::span<const double> x_;
    std::vector<double>& alpha_;
};

double subtree_expectation(const Tree& tree, int node) {
    const TreeNode& n = tree.nodes[node];
    if (n.is_leaf()) return n.leaf_value;
    const double l = tree.nodes[n.left].cover;
    const double r = tree.nodes[n.right].cover;
    return (l * subtree_expectation(tree, n.left) + r * subtree_expectation(tree, n.right)) / (l + r);
}

}  // namespace

double ShapAttribution::total() const {
    return alpha0 + std::accumulate(alpha.begin(), alpha.end(), 0.0);
}

double expected_tree_value(const Tree& tree) { return subtree_expectation(tree, 0); }

double expected_margin(const TreeEnsemble& model) {
    double e = model.base_score;
    for (const auto& tree : model.trees) e += expected_tree_value(tree);
    return e;
}

ShapAttribution shap_for_instance(const TreeEnsemble& model, std::span<const double> phi,
                                  std::string instance_id) {
    if (static_cast<int>(phi.size()) != model.feature_count) {
        throw ValidationError("shap_for_instance: expected " + std::to_string(model.feature_count) +
                              " features, got " + std::to_string(phi.size()));
    }
    ShapAttribution out;
    out.alpha.assign(phi.size(), 0.0);
    out.alpha0 = model.base_score;
    out.class_index = model.class_index;
    out.instance_id = std::move(instance_id);
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
        const Tree& tree = model.trees[t];
        out.alpha0 += expected_tree_value(tree);
        TreeExplainer(tree, t, phi, out.alpha).run();
    }
    return out;
}

}  // namespace rfcam
