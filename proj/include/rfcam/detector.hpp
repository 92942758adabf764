#pragma once

// Flags correctly classified instances whose RF-CAM and Grad-CAM disagree.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfcam/gbdt.hpp"
#include "rfcam/saliency.hpp"
#include "rfcam/tensor_store.hpp"
#include "rfcam/tree_shap.hpp"

namespace rfcam {

struct DetectionConfig {
    double mask_threshold = 0.78;  // pixels above this are compared and rounded to 1
    double mse_threshold = 15.0;   // theta, in score units
    double score_scale = 100.0;    // MSE of [0,1] maps expressed as a percentage

    void validate() const;
    bool operator==(const DetectionConfig&) const = default;
};

enum class ReviewStatus { Pending, Confirmed, Rejected, Diagnostic, AutoFlagged };

std::string to_string(ReviewStatus status);
ReviewStatus parse_review_status(const std::string& text);

struct DetectionRecord {
    std::string instance_id;
    int predicted_class = 0;
    int true_class = 0;
    double dissimilarity = 0.0;
    bool flagged = false;
    ReviewStatus status = ReviewStatus::Pending;
    int top_feature = 0;
    ShapAttribution shap;
    std::string rf_map_path;  // relative to the run directory
    std::string gc_map_path;
    std::optional<std::string> warning;

    bool operator==(const DetectionRecord&) const = default;
};

using SurrogateSet = std::map<int, TreeEnsemble>;

// Masked, rounded mean squared difference of two normalized maps, scaled by
// config.score_scale. Pixels where neither map exceeds the mask threshold are
// ignored; an empty mask scores 0.
double dissimilarity(const SaliencyMap& rf, const SaliencyMap& gc, const DetectionConfig& config);

// argmax_k w_k * mean(A^k), lowest k on ties.
int top_feature(const ChannelWeights& weights, const ChannelMeans& means);

// Full per-instance computation, before any rendering.
struct InstanceAnalysis {
    DetectionRecord record;
    InstanceFeatures features;
    std::optional<SaliencyMap> rf_cam;  // normalized; absent without a surrogate
    SaliencyMap grad_cam;               // normalized
};

InstanceAnalysis analyze_instance(const TensorBundle& bundle, const ImageEntry& entry,
                                  const TreeEnsemble* model, const DetectionConfig& config);

struct RenderOptions {
    std::filesystem::path run_dir;  // PNGs go to run_dir/heatmaps
    std::optional<std::pair<int, int>> target_size;  // default: manifest input size or 32x map
};

// analyze_instance plus heatmap rendering when `render` is set.
DetectionRecord detect_instance(const TensorBundle& bundle, const ImageEntry& entry,
                                const TreeEnsemble* model, const DetectionConfig& config,
                                const RenderOptions* render = nullptr);

struct ClassReport {
    int class_index = 0;
    std::string class_name;
    int records = 0;
    int correct = 0;
    int flagged = 0;
    double flag_rate = 0.0;  // flagged / correct
    bool surrogate_available = false;
    double lsm_train_accuracy = 0.0;
    double lsm_test_accuracy = 0.0;
    int lsm_test_count = 0;
};

struct RunReport {
    int records = 0;
    int correct = 0;
    int misclassified = 0;
    int flagged = 0;
    double flag_rate = 0.0;  // flagged / correct
    std::vector<ClassReport> classes;
    double lsm_macro_test_accuracy = 0.0;
    double lsm_weighted_test_accuracy = 0.0;
    std::vector<std::pair<std::string, std::string>> failures;  // (instance id, error)
    nlohmann::ordered_json config_echo;
};

struct DetectOptions {
    std::optional<RenderOptions> render;
    int parallelism = 1;
};

struct DetectionRun {
    std::vector<DetectionRecord> records;  // sorted by instance_id
    RunReport report;
};

// One record per test-split entry; per-instance failures are reported, never thrown.
DetectionRun detect_bundle(const TensorBundle& bundle, const SurrogateSet& models,
                           const DetectionConfig& config, const DetectOptions& options = {});

nlohmann::ordered_json record_to_json(const DetectionRecord& record);
DetectionRecord record_from_json(const nlohmann::json& j);
nlohmann::ordered_json report_to_json(const RunReport& report);

void write_records(const std::filesystem::path& path, const std::vector<DetectionRecord>& records);
std::vector<DetectionRecord> read_records(const std::filesystem::path& path);

}  // namespace rfcam
