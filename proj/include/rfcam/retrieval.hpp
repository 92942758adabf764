#pragma once

// Neural-feature retrieval: rank same-class instances by the mean activation of
// one channel, and propagate a confirmed finding to the top hits.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rfcam/detector.hpp"
#include "rfcam/tensor_store.hpp"

namespace rfcam {

struct FeatureIndex {
    int k = 0;
    bool operator==(const FeatureIndex&) const = default;
};

struct RetrievalHit {
    std::string instance_id;
    double score = 0.0;  // mean activation of the queried channel
    bool operator==(const RetrievalHit&) const = default;
};

struct RetrievalResult {
    std::vector<RetrievalHit> ranked;  // non-increasing score, ties by id
    std::string query_instance;
    FeatureIndex feature;
    int class_index = 0;
};

using CandidateFilter = std::function<bool(const ImageEntry&)>;

// Candidates are entries predicted as `class_index`, minus the query, optionally
// narrowed by `filter`.
RetrievalResult similar_instances(const TensorBundle& bundle, int class_index, FeatureIndex feature,
                                  const std::string& query_id, int n,
                                  const CandidateFilter& filter = {});

using RecordStore = std::map<std::string, DetectionRecord>;

RecordStore make_record_store(const std::vector<DetectionRecord>& records);

// Moves the first top_n hits that are pending to auto_flagged and returns their
// ids. Other statuses are left alone, so repeated calls are no-ops.
std::vector<std::string> auto_flag(RecordStore& store, const RetrievalResult& result, int top_n);

}  // namespace rfcam
