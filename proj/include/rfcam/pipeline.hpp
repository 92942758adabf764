#pragma once

// Command-line orchestration: fixture-gen, train, detect, retrieve, report, serve.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rfcam/detector.hpp"
#include "rfcam/gbdt.hpp"

namespace rfcam {

struct RunConfig {
    std::filesystem::path bundle;
    std::filesystem::path out;
    BoostConfig boost;
    DetectionConfig detection;
    int parallelism = 1;
    std::uint64_t seed = 42;

    void validate() const;
};

struct TrainSummary {
    SurrogateSet models;
    std::vector<int> unavailable_classes;
    double macro_test_accuracy = 0.0;
    double weighted_test_accuracy = 0.0;
    double macro_train_accuracy = 0.0;
};

// Trains one surrogate per class with training data; classes run in parallel.
TrainSummary train_surrogates(const TensorBundle& bundle, const BoostConfig& config, int parallelism);

void save_surrogates(const std::filesystem::path& dir, const TrainSummary& summary);

// Throws ValidationError("surrogates not found ...") when the directory holds none.
SurrogateSet load_surrogates(const std::filesystem::path& dir, int num_classes);

// Reads RFCAM_LOG (trace|debug|info|warn|error|off) and configures the default logger.
void init_logging();

// Process entry point. Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
int cli_main(int argc, const char* const* argv);

}  // namespace rfcam
