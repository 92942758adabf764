#pragma once

// Synthetic tensor bundles with planted core and spurious channels, a
// GAP + linear head, and per-instance ground truth.
//
// Every class owns three core channels and two spurious channels. Each
// instance is one of:
//   clean            core blobs at full strength
//   spurious-reliant core attenuated to 0.3, own spurious blobs at full strength
//   hard             core heavily attenuated, a competing class's spurious
//                    blobs fire instead (the usual source of misclassification)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rfcam/detector.hpp"
#include "rfcam/tensor_store.hpp"

namespace rfcam {

struct FixtureSpec {
    int num_classes = 4;
    int channels = 64;
    int map_size = 7;  // H = W
    int train_per_class = 200;
    int test_per_class = 60;
    double spurious_fraction = 0.3;
    double hard_fraction = 0.15;
    double noise_sigma = 0.05;
    double hard_core_peak = 0.15;
    double distractor_peak = 0.6;
    std::uint64_t seed = 42;

    static constexpr int kCorePerClass = 3;
    static constexpr int kSpuriousPerClass = 2;
    static constexpr double kBlobWidth = 1.5;
    static constexpr double kSpuriousCorePeak = 0.3;
    static constexpr double kCoreWeight = 1.0;
    static constexpr double kSpuriousWeight = 0.8;

    void validate() const;
    std::vector<int> core_channels(int cls) const;
    std::vector<int> spurious_channels(int cls) const;
};

enum class InstanceKind { Clean, SpuriousReliant, Hard };

std::string to_string(InstanceKind kind);

struct InstanceTruth {
    std::string id;
    int true_label = 0;
    InstanceKind kind = InstanceKind::Clean;
    std::pair<double, double> core_center;
    std::optional<std::pair<double, double>> spurious_center;  // spurious or distractor blob
    std::optional<int> distractor_class;

    bool is_spurious_reliant() const { return kind == InstanceKind::SpuriousReliant; }
};

struct ClassChannels {
    std::vector<int> core;
    std::vector<int> spurious;
};

struct FixtureGroundTruth {
    std::vector<InstanceTruth> instances;
    std::vector<ClassChannels> classes;

    const InstanceTruth* find(const std::string& id) const;
};

struct FixtureOutput {
    TensorBundle bundle;
    FixtureGroundTruth truth;
};

// Writes manifest.json, tensors/, head_weights.scdt and ground_truth.json under `out`.
FixtureOutput fixture_gen(const FixtureSpec& spec, const std::filesystem::path& out);

void write_ground_truth(const std::filesystem::path& path, const FixtureSpec& spec,
                        const FixtureGroundTruth& truth);
FixtureGroundTruth read_ground_truth(const std::filesystem::path& path);

struct DetectionScore {
    double recall = 1.0;
    double precision = 1.0;
    double flag_rate = 0.0;
    bool recall_defined = true;     // false when there were no positives to find
    bool precision_defined = true;  // false when nothing was flagged
    int true_positives = 0;
    int flagged = 0;
    int positives = 0;
    int correct = 0;
};

DetectionScore score_detection(const std::vector<DetectionRecord>& records,
                               const FixtureGroundTruth& truth);

// Counter-based generator: output i of stream s is a pure function of (seed, s, i).
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    std::uint64_t next();
    double uniform();  // [0, 1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    std::uint64_t below(std::uint64_t bound);

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

}  // namespace rfcam
