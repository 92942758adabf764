#include "rfcam/retrieval.hpp"

#include <algorithm>

#include "rfcam/errors.hpp"
#include "rfcam/saliency.hpp"

namespace rfcam {

RetrievalResult similar_instances(const TensorBundle& bundle, int class_index, FeatureIndex feature,
                                  const std::string& query_id, int n, const CandidateFilter& filter) {
    const Manifest& m = bundle.manifest();
    if (class_index < 0 || class_index >= m.num_classes) {
        throw ValidationError("similar_instances: unknown class " + std::to_string(class_index));
    }
    if (feature.k < 0 || feature.k >= m.channels) {
        throw ValidationError("similar_instances: feature " + std::to_string(feature.k) +
                              " out of range");
    }
    if (n < 1) throw ValidationError("similar_instances: n must be >= 1");

    RetrievalResult result;
    result.query_instance = query_id;
    result.feature = feature;
    result.class_index = class_index;
    for (const auto& entry : bundle.images()) {
        if (entry.predicted_label != class_index || entry.id == query_id) continue;
        if (filter && !filter(entry)) continue;
        const ChannelMeans means = channel_means(bundle.activations(entry));
        result.ranked.push_back({entry.id, means.values[feature.k]});
    }
    std::sort(result.ranked.begin(), result.ranked.end(),
              [](const RetrievalHit& a, const RetrievalHit& b) {
                  if (a.score != b.score) return a.score > b.score;
                  return a.instance_id < b.instance_id;
              });
    if (static_cast<int>(result.ranked.size()) > n) result.ranked.resize(n);
    return result;
}

RecordStore make_record_store(const std::vector<DetectionRecord>& records) {
    RecordStore store;
    for (const auto& r : records) store.emplace(r.instance_id, r);
    return store;
}

std::vector<std::string> auto_flag(RecordStore& store, const RetrievalResult& result, int top_n) {
    std::vector<std::string> updated;
    const int limit = std::min<int>(top_n, static_cast<int>(result.ranked.size()));
    for (int i = 0; i < limit; ++i) {
        auto it = store.find(result.ranked[i].instance_id);
        if (it == store.end() || it->second.status != ReviewStatus::Pending) continue;
        it->second.status = ReviewStatus::AutoFlagged;
        updated.push_back(it->first);
    }
    return updated;
}

}  // namespace rfcam
