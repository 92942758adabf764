#include "rfcam/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include <json.hpp>

#include "rfcam/errors.hpp"

namespace rfcam {
namespace fs = std::filesystem;

namespace {

constexpr double kBaseScoreClamp = 10.0;
// Splits must improve the regularized objective by more than this.
constexpr double kMinSplitGain = 1e-10;
// Gains within this relative distance are ties (resolved by feature, then threshold).
constexpr double kGainTieTolerance = 1e-9;

struct SplitCandidate {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

class TreeBuilder {
public:
    TreeBuilder(std::span<const LabeledExample> examples, const std::vector<double>& grad,
                const std::vector<double>& hess, const BoostConfig& config)
        : examples_(examples), grad_(grad), hess_(hess), config_(config) {}

    Tree build() {
        std::vector<std::size_t> all(examples_.size());
        std::iota(all.begin(), all.end(), 0);
        grow(all, 0);
        return std::move(tree_);
    }

private:
    double score(double g, double h) const { return g * g / (h + config_.l2_regularization); }

    int grow(const std::vector<std::size_t>& rows, int depth) {
        double g_sum = 0.0, h_sum = 0.0;
        for (auto r : rows) {
            g_sum += grad_[r];
            h_sum += hess_[r];
        }
        const int index = static_cast<int>(tree_.nodes.size());
        TreeNode node;
        node.cover = h_sum;
        node.leaf_value = -config_.learning_rate * g_sum / (h_sum + config_.l2_regularization);
        tree_.nodes.push_back(node);

        if (depth >= config_.max_depth) return index;
        const SplitCandidate best = find_split(rows, g_sum, h_sum);
        if (best.feature < 0) return index;

        std::vector<std::size_t> left_rows, right_rows;
        for (auto r : rows) {
            (examples_[r].phi.values[best.feature] < best.threshold ? left_rows : right_rows)
                .push_back(r);
        }
        const int left = grow(left_rows, depth + 1);
        const int right = grow(right_rows, depth + 1);
        TreeNode& parent = tree_.nodes[index];
        parent.feature_index = best.feature;
        parent.threshold = best.threshold;
        parent.left = left;
        parent.right = right;
        parent.leaf_value = 0.0;
        return index;
    }

    SplitCandidate find_split(const std::vector<std::size_t>& rows, double g_sum,
                              double h_sum) const {
        SplitCandidate best;
        const double parent_score = score(g_sum, h_sum);
        const int feature_count = static_cast<int>(examples_.front().phi.values.size());
        std::vector<std::size_t> order(rows);

        for (int f = 0; f < feature_count; ++f) {
            auto value = [&](std::size_t r) { return examples_[r].phi.values[f]; };
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return value(a) < value(b); });
            double g_left = 0.0, h_left = 0.0;
            for (std::size_t i = 0; i + 1 < order.size(); ++i) {
                g_left += grad_[order[i]];
                h_left += hess_[order[i]];
                const double lo = value(order[i]);
                const double hi = value(order[i + 1]);
                if (!(lo < hi)) continue;
                const double h_right = h_sum - h_left;
                if (h_left < config_.min_child_cover || h_right < config_.min_child_cover) continue;

                const double gain =
                    0.5 * (score(g_left, h_left) + score(g_sum - g_left, h_right) - parent_score);
                if (gain <= kMinSplitGain) continue;
                const double tie_band = kGainTieTolerance * std::max(1.0, std::abs(best.gain));
                if (best.feature >= 0 && gain <= best.gain + tie_band) continue;

                double threshold = 0.5 * (lo + hi);
                if (!(lo < threshold)) threshold = hi;
                best = {f, threshold, gain};
            }
        }
        return best;
    }

    std::span<const LabeledExample> examples_;
    const std::vector<double>& grad_;
    const std::vector<double>& hess_;
    const BoostConfig& config_;
    Tree tree_;
};

nlohmann::ordered_json config_to_json(const BoostConfig& c) {
    nlohmann::ordered_json j;
    j["num_rounds"] = c.num_rounds;
    j["max_depth"] = c.max_depth;
    j["learning_rate"] = c.learning_rate;
    j["min_child_cover"] = c.min_child_cover;
    j["l2_regularization"] = c.l2_regularization;
    j["positive_weight"] = c.positive_weight;
    j["seed"] = c.seed;
    return j;
}

BoostConfig config_from_json(const nlohmann::json& j) {
    BoostConfig c;
    c.num_rounds = j.at("num_rounds").get<int>();
    c.max_depth = j.at("max_depth").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.min_child_cover = j.at("min_child_cover").get<double>();
    c.l2_regularization = j.at("l2_regularization").get<double>();
    c.positive_weight = j.value("positive_weight", 1.0);
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
}

}  // namespace

void BoostConfig::validate() const {
    if (num_rounds < 1) throw ValidationError("boost config: num_rounds must be >= 1");
    if (max_depth < 1) throw ValidationError("boost config: max_depth must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
        throw ValidationError("boost config: learning_rate must be in (0, 1]");
    }
    if (min_child_cover < 0.0) throw ValidationError("boost config: min_child_cover must be >= 0");
    if (l2_regularization < 0.0) {
        throw ValidationError("boost config: l2_regularization must be >= 0");
    }
    if (!(positive_weight > 0.0)) throw ValidationError("boost config: positive_weight must be > 0");
}

double Tree::predict(std::span<const double> x) const {
    int n = 0;
    while (!nodes[n].is_leaf()) {
        const TreeNode& node = nodes[n];
        n = x[node.feature_index] < node.threshold ? node.left : node.right;
    }
    return nodes[n].leaf_value;
}

double logistic(double margin) { return 1.0 / (1.0 + std::exp(-margin)); }

TreeEnsemble train_lsm(int class_index, std::span<const LabeledExample> examples,
                       const BoostConfig& config) {
    config.validate();
    if (examples.empty()) {
        throw ValidationError("train_lsm: class " + std::to_string(class_index) + " has no examples");
    }
    const std::size_t feature_count = examples.front().phi.values.size();
    for (const auto& ex : examples) {
        if (ex.phi.values.size() != feature_count) {
            throw ValidationError("train_lsm: example " + ex.id + " has inconsistent length");
        }
        if (ex.label != 0 && ex.label != 1) {
            throw ValidationError("train_lsm: example " + ex.id + " label must be 0 or 1");
        }
    }

    TreeEnsemble model;
    model.class_index = class_index;
    model.feature_count = static_cast<int>(feature_count);
    model.training_config = config;

    const std::size_t n = examples.size();
    std::vector<double> weight(n);
    double positive_mass = 0.0, total_mass = 0.0;
    bool has_positive = false, has_negative = false;
    for (std::size_t i = 0; i < n; ++i) {
        weight[i] = examples[i].label == 1 ? config.positive_weight : 1.0;
        positive_mass += weight[i] * examples[i].label;
        total_mass += weight[i];
        (examples[i].label == 1 ? has_positive : has_negative) = true;
    }
    if (!has_negative) {
        model.base_score = kBaseScoreClamp;
    } else if (!has_positive) {
        model.base_score = -kBaseScoreClamp;
    } else {
        const double rate = positive_mass / total_mass;
        model.base_score =
            std::clamp(std::log(rate / (1.0 - rate)), -kBaseScoreClamp, kBaseScoreClamp);
    }
    // A single-label set has nothing to learn beyond the base rate.
    if (!has_positive || !has_negative) return model;

    std::vector<double> margin(n, model.base_score), grad(n), hess(n);
    for (int round = 0; round < config.num_rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = logistic(margin[i]);
            grad[i] = weight[i] * (p - examples[i].label);
            hess[i] = weight[i] * p * (1.0 - p);
        }
        Tree tree = TreeBuilder(examples, grad, hess, config).build();
        for (std::size_t i = 0; i < n; ++i) margin[i] += tree.predict(examples[i].phi.values);
        model.trees.push_back(std::move(tree));
    }
    return model;
}

double predict_margin(const TreeEnsemble& model, std::span<const double> phi) {
    if (static_cast<int>(phi.size()) != model.feature_count) {
        throw ValidationError("predict_margin: expected " + std::to_string(model.feature_count) +
                              " features, got " + std::to_string(phi.size()));
    }
    double margin = model.base_score;
    for (const auto& tree : model.trees) margin += tree.predict(phi);
    return margin;
}

double accuracy(const TreeEnsemble& model, std::span<const LabeledExample> examples) {
    if (examples.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& ex : examples) {
        const int predicted = predict_margin(model, ex.phi) >= 0.0 ? 1 : 0;
        hits += predicted == ex.label ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

double logistic_loss(const TreeEnsemble& model, std::span<const LabeledExample> examples,
                     std::size_t tree_count) {
    tree_count = std::min(tree_count, model.trees.size());
    double total = 0.0;
    for (const auto& ex : examples) {
        double m = model.base_score;
        for (std::size_t t = 0; t < tree_count; ++t) m += model.trees[t].predict(ex.phi.values);
        // log(1 + e^-m) for label 1, log(1 + e^m) for label 0, computed stably
        const double z = ex.label == 1 ? -m : m;
        total += z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    }
    return examples.empty() ? 0.0 : total / static_cast<double>(examples.size());
}

std::string ensemble_to_json(const TreeEnsemble& model) {
    nlohmann::ordered_json j;
    j["class_index"] = model.class_index;
    j["feature_count"] = model.feature_count;
    j["base_score"] = model.base_score;
    j["config"] = config_to_json(model.training_config);
    j["metrics"] = {{"train_accuracy", model.metrics.train_accuracy},
                    {"test_accuracy", model.metrics.test_accuracy},
                    {"train_count", model.metrics.train_count},
                    {"test_count", model.metrics.test_count}};
    auto trees = nlohmann::ordered_json::array();
    for (const auto& tree : model.trees) {
        auto nodes = nlohmann::ordered_json::array();
        for (const auto& n : tree.nodes) {
            nlohmann::ordered_json jn;
            jn["feature_index"] = n.is_leaf() ? nlohmann::ordered_json(nullptr)
                                              : nlohmann::ordered_json(n.feature_index);
            jn["threshold"] = n.threshold;
            jn["left"] = n.left;
            jn["right"] = n.right;
            jn["leaf_value"] = n.leaf_value;
            jn["cover"] = n.cover;
            nodes.push_back(std::move(jn));
        }
        trees.push_back({{"nodes", std::move(nodes)}});
    }
    j["trees"] = std::move(trees);
    return j.dump(1);
}

TreeEnsemble ensemble_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        TreeEnsemble model;
        model.class_index = j.at("class_index").get<int>();
        model.feature_count = j.at("feature_count").get<int>();
        model.base_score = j.at("base_score").get<double>();
        model.training_config = config_from_json(j.at("config"));
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            model.metrics.train_accuracy = m.value("train_accuracy", 0.0);
            model.metrics.test_accuracy = m.value("test_accuracy", 0.0);
            model.metrics.train_count = m.value("train_count", 0);
            model.metrics.test_count = m.value("test_count", 0);
        }
        for (const auto& jt : j.at("trees")) {
            Tree tree;
            for (const auto& jn : jt.at("nodes")) {
                TreeNode n;
                n.feature_index = jn.at("feature_index").is_null() ? -1 : jn.at("feature_index").get<int>();
                n.threshold = jn.at("threshold").get<double>();
                n.left = jn.at("left").get<int>();
                n.right = jn.at("right").get<int>();
                n.leaf_value = jn.at("leaf_value").get<double>();
                n.cover = jn.at("cover").get<double>();
                if (!n.is_leaf() && n.feature_index >= model.feature_count) {
                    throw FormatError("tree node references feature " +
                                      std::to_string(n.feature_index));
                }
                tree.nodes.push_back(n);
            }
            if (tree.nodes.empty()) throw FormatError("tree with no nodes");
            const int count = static_cast<int>(tree.nodes.size());
            for (const auto& n : tree.nodes) {
                if (!n.is_leaf() && (n.left <= 0 || n.left >= count || n.right <= 0 || n.right >= count)) {
                    throw FormatError("tree node has out-of-range children");
                }
            }
            model.trees.push_back(std::move(tree));
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("surrogate json: ") + e.what());
    }
}

void save_ensemble(const fs::path& path, const TreeEnsemble& model) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << ensemble_to_json(model) << '\n';
}

TreeEnsemble load_ensemble(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open " + path.string());
    return ensemble_from_json(
        std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
}

std::map<int, ClassExamples> build_misclassification_labels(const TensorBundle& bundle) {
    std::map<int, ClassExamples> sets;
    for (int c = 0; c < bundle.manifest().num_classes; ++c) sets[c];
    for (const auto& entry : bundle.images()) {
        LabeledExample ex;
        ex.id = entry.id;
        ex.phi = compute_instance_features(bundle, entry).phi;
        ex.label = entry.correct() ? 1 : 0;
        auto& group = sets[entry.true_label];
        (entry.split == Split::Train ? group.train : group.test).push_back(std::move(ex));
    }
    return sets;
}

}  // namespace rfcam
