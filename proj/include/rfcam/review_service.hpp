#pragma once

// Human review backend: an append-only event log folded over the detection
// records, exposed as a JSON API.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfcam/detector.hpp"
#include "rfcam/retrieval.hpp"
#include "rfcam/tensor_store.hpp"

namespace httplib {
class Server;
}

namespace rfcam {

enum class ReviewAction { Confirm, Reject, AutoFlag };

std::string to_string(ReviewAction action);

struct ReviewEvent {
    std::string timestamp;  // UTC ISO-8601
    std::string instance_id;
    ReviewAction action = ReviewAction::Confirm;
    std::string actor;
    std::optional<std::string> note;
    std::optional<int> feature;
    std::optional<std::string> source_instance;  // confirmed instance behind an auto_flag

    bool operator==(const ReviewEvent&) const = default;
};

nlohmann::ordered_json event_to_json(const ReviewEvent& event);
ReviewEvent event_from_json(const nlohmann::json& j);

struct ReviewState {
    RecordStore records;
    std::map<std::string, std::vector<std::string>> groups;  // confirmed id -> auto-flagged ids
};

// Pure fold of the event log over the initial detection records.
ReviewState fold_events(const std::vector<DetectionRecord>& records,
                        const std::vector<ReviewEvent>& events);

std::vector<ReviewEvent> read_event_log(const std::filesystem::path& path);

struct ApiResponse {
    int status = 200;
    nlohmann::ordered_json body;
};

struct ServiceOptions {
    std::filesystem::path run_dir;      // holds records.jsonl and heatmaps/
    std::filesystem::path events_path;  // default run_dir/review_events.jsonl
    std::optional<std::filesystem::path> static_dir;
    int auto_flag_top_n = 10;
    double theta = 15.0;
};

class ReviewService {
public:
    // Throws IoError when records.jsonl is missing.
    ReviewService(std::shared_ptr<const TensorBundle> bundle, ServiceOptions options);

    using Query = std::map<std::string, std::string>;

    ApiResponse health() const;
    ApiResponse list_instances(const Query& query) const;
    ApiResponse get_instance(const std::string& id) const;
    ApiResponse review(const std::string& id, const nlohmann::json& body);
    ApiResponse similar(const std::string& id, const Query& query) const;
    ApiResponse summary() const;

    std::optional<std::filesystem::path> media_path(const std::string& id, const std::string& kind) const;

    void bind(httplib::Server& server);

    std::shared_ptr<const ReviewState> snapshot() const;

private:
    nlohmann::ordered_json summary_item(const DetectionRecord& r) const;
    void append_events(const std::vector<ReviewEvent>& events);

    std::shared_ptr<const TensorBundle> bundle_;
    ServiceOptions options_;
    std::vector<DetectionRecord> initial_;

    std::mutex write_mutex_;               // serializes log appends and state folds
    mutable std::mutex snapshot_mutex_;    // guards the pointer swap only
    std::shared_ptr<const ReviewState> state_;
};

// JSON schemas of every API response body, keyed by endpoint name.
const nlohmann::json& api_schemas();

// Runs the HTTP service until interrupted. Returns a process exit code.
int serve(std::shared_ptr<const TensorBundle> bundle, ServiceOptions options,
          const std::string& listen_address);

}  // namespace rfcam
