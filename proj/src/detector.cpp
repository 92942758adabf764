#include "rfcam/detector.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "rfcam/errors.hpp"

namespace rfcam {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::pair<int, int> render_size(const TensorBundle& bundle, const RenderOptions& options) {
    if (options.target_size) return *options.target_size;
    const Manifest& m = bundle.manifest();
    if (m.input_image_size) {
        return {std::max(m.input_image_size->first, m.map_height),
                std::max(m.input_image_size->second, m.map_width)};
    }
    return {32 * m.map_height, 32 * m.map_width};
}

void render_maps(const TensorBundle& bundle, const ImageEntry& entry, const InstanceAnalysis& a,
                 const RenderOptions& options, DetectionRecord& record) {
    const auto [h, w] = render_size(bundle, options);
    std::optional<RgbImage> image;
    if (entry.image_path) image = read_png(bundle.resolve(*entry.image_path));

    const fs::path dir = options.run_dir / "heatmaps";
    fs::create_directories(dir);
    auto emit = [&](const SaliencyMap& map, const std::string& suffix) {
        const std::string rel = "heatmaps/" + entry.id + "_" + suffix + ".png";
        write_bytes(options.run_dir / rel, render_overlay(upscale_map(map, h, w), image));
        return rel;
    };
    record.gc_map_path = emit(a.grad_cam, "gc");
    if (a.rf_cam) record.rf_map_path = emit(*a.rf_cam, "rf");
}

ojson config_json(const DetectionConfig& c) {
    ojson j;
    j["mask_threshold"] = c.mask_threshold;
    j["mse_threshold"] = c.mse_threshold;
    j["score_scale"] = c.score_scale;
    return j;
}

}  // namespace

void DetectionConfig::validate() const {
    if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) {
        throw ValidationError("detection config: mask_threshold must be in (0, 1)");
    }
    if (!(mse_threshold >= 0.0)) throw ValidationError("detection config: theta must be >= 0");
    if (!(score_scale > 0.0)) throw ValidationError("detection config: score_scale must be > 0");
}

std::string to_string(ReviewStatus status) {
    switch (status) {
        case ReviewStatus::Pending: return "pending";
        case ReviewStatus::Confirmed: return "confirmed";
        case ReviewStatus::Rejected: return "rejected";
        case ReviewStatus::Diagnostic: return "diagnostic";
        case ReviewStatus::AutoFlagged: return "auto_flagged";
    }
    return "pending";
}

ReviewStatus parse_review_status(const std::string& text) {
    for (auto s : {ReviewStatus::Pending, ReviewStatus::Confirmed, ReviewStatus::Rejected,
                   ReviewStatus::Diagnostic, ReviewStatus::AutoFlagged}) {
        if (to_string(s) == text) return s;
    }
    throw ValidationError("unknown review status '" + text + "'");
}

double dissimilarity(const SaliencyMap& rf, const SaliencyMap& gc, const DetectionConfig& config) {
    if (rf.height != gc.height || rf.width != gc.width) {
        throw ValidationError("dissimilarity: map resolutions differ");
    }
    const double t = config.mask_threshold;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < rf.data.size(); ++p) {
        const bool rf_hot = rf.data[p] > t;
        const bool gc_hot = gc.data[p] > t;
        if (!rf_hot && !gc_hot) continue;
        const double d = (rf_hot ? 1.0 : rf.data[p]) - (gc_hot ? 1.0 : gc.data[p]);
        sum += d * d;
        ++count;
    }
    return count == 0 ? 0.0 : config.score_scale * sum / static_cast<double>(count);
}

int top_feature(const ChannelWeights& weights, const ChannelMeans& means) {
    if (weights.values.size() != means.values.size() || weights.values.empty()) {
        throw ValidationError("top_feature: weight and mean vectors differ in length");
    }
    int best = 0;
    double best_value = weights.values[0] * means.values[0];
    for (std::size_t k = 1; k < weights.values.size(); ++k) {
        const double v = weights.values[k] * means.values[k];
        if (v > best_value) {
            best_value = v;
            best = static_cast<int>(k);
        }
    }
    return best;
}

InstanceAnalysis analyze_instance(const TensorBundle& bundle, const ImageEntry& entry,
                                  const TreeEnsemble* model, const DetectionConfig& config) {
    InstanceAnalysis a;
    a.features = compute_instance_features(bundle, entry);
    const int cls = entry.predicted_label;

    DetectionRecord& r = a.record;
    r.instance_id = entry.id;
    r.predicted_class = cls;
    r.true_class = entry.true_label;
    r.top_feature = top_feature(a.features.weights, a.features.means);

    a.grad_cam = normalize_map(
        weighted_activation_map(a.features.weights.values, a.features.activations, MapKind::GradCam, cls));

    if (model == nullptr) {
        r.status = ReviewStatus::Diagnostic;
        r.warning = "no surrogate for predicted class " + std::to_string(cls);
        r.shap.class_index = cls;
        r.shap.instance_id = entry.id;
        return a;
    }

    r.shap = shap_for_instance(*model, a.features.phi, entry.id);
    a.rf_cam = normalize_map(
        weighted_activation_map(r.shap.alpha, a.features.activations, MapKind::RfCam, cls));
    r.dissimilarity = dissimilarity(*a.rf_cam, a.grad_cam, config);
    r.flagged = entry.correct() && r.dissimilarity > config.mse_threshold;
    r.status = entry.correct() ? ReviewStatus::Pending : ReviewStatus::Diagnostic;
    return a;
}

DetectionRecord detect_instance(const TensorBundle& bundle, const ImageEntry& entry,
                                const TreeEnsemble* model, const DetectionConfig& config,
                                const RenderOptions* render) {
    InstanceAnalysis a = analyze_instance(bundle, entry, model, config);
    if (render) render_maps(bundle, entry, a, *render, a.record);
    return std::move(a.record);
}

DetectionRun detect_bundle(const TensorBundle& bundle, const SurrogateSet& models,
                           const DetectionConfig& config, const DetectOptions& options) {
    config.validate();
    std::vector<const ImageEntry*> entries;
    for (const auto& e : bundle.images()) {
        if (e.split == Split::Test) entries.push_back(&e);
    }
    std::sort(entries.begin(), entries.end(),
              [](const ImageEntry* a, const ImageEntry* b) { return a->id < b->id; });

    std::vector<DetectionRecord> records(entries.size());
    std::vector<std::optional<std::string>> errors(entries.size());
    const RenderOptions* render = options.render ? &*options.render : nullptr;

    auto work = [&](std::size_t i) {
        const ImageEntry& e = *entries[i];
        auto it = models.find(e.predicted_label);
        const TreeEnsemble* model = it == models.end() ? nullptr : &it->second;
        try {
            records[i] = detect_instance(bundle, e, model, config, render);
            if (records[i].warning) spdlog::warn("{}: {}", e.id, *records[i].warning);
        } catch (const std::exception& ex) {
            errors[i] = ex.what();
            DetectionRecord& r = records[i];
            r.instance_id = e.id;
            r.predicted_class = e.predicted_label;
            r.true_class = e.true_label;
            r.status = ReviewStatus::Diagnostic;
            r.warning = std::string("detection failed: ") + ex.what();
            spdlog::error("{}: {}", e.id, ex.what());
        }
    };

    const int workers = std::clamp(options.parallelism, 1, static_cast<int>(std::max<std::size_t>(1, entries.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < entries.size(); ++i) work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (int t = 0; t < workers; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < entries.size(); i = next++) work(i);
            });
        }
    }

    DetectionRun run;
    RunReport& rep = run.report;
    const Manifest& m = bundle.manifest();
    rep.classes.resize(m.num_classes);
    for (int c = 0; c < m.num_classes; ++c) {
        ClassReport& cr = rep.classes[c];
        cr.class_index = c;
        cr.class_name = c < static_cast<int>(m.class_names.size()) ? m.class_names[c] : std::to_string(c);
        auto it = models.find(c);
        if (it != models.end()) {
            cr.surrogate_available = true;
            cr.lsm_train_accuracy = it->second.metrics.train_accuracy;
            cr.lsm_test_accuracy = it->second.metrics.test_accuracy;
            cr.lsm_test_count = it->second.metrics.test_count;
        }
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        const DetectionRecord& r = records[i];
        if (errors[i]) rep.failures.emplace_back(r.instance_id, *errors[i]);
        ClassReport& cr = rep.classes[r.predicted_class];
        ++rep.records;
        ++cr.records;
        if (r.predicted_class == r.true_class) {
            ++rep.correct;
            ++cr.correct;
        } else {
            ++rep.misclassified;
        }
        if (r.flagged) {
            ++rep.flagged;
            ++cr.flagged;
        }
    }
    rep.flag_rate = rep.correct ? static_cast<double>(rep.flagged) / rep.correct : 0.0;

    double macro = 0.0, weighted = 0.0;
    int available = 0, weight = 0;
    for (ClassReport& cr : rep.classes) {
        cr.flag_rate = cr.correct ? static_cast<double>(cr.flagged) / cr.correct : 0.0;
        if (!cr.surrogate_available) continue;
        ++available;
        macro += cr.lsm_test_accuracy;
        weighted += cr.lsm_test_accuracy * cr.lsm_test_count;
        weight += cr.lsm_test_count;
    }
    rep.lsm_macro_test_accuracy = available ? macro / available : 0.0;
    rep.lsm_weighted_test_accuracy = weight ? weighted / weight : 0.0;

    rep.config_echo["detection"] = config_json(config);
    if (!models.empty()) {
        const BoostConfig& b = models.begin()->second.training_config;
        rep.config_echo["boost"] = {{"num_rounds", b.num_rounds},
                                    {"max_depth", b.max_depth},
                                    {"learning_rate", b.learning_rate},
                                    {"min_child_cover", b.min_child_cover},
                                    {"l2_regularization", b.l2_regularization},
                                    {"positive_weight", b.positive_weight},
                                    {"seed", b.seed}};
    }
    run.records = std::move(records);
    return run;
}

ojson record_to_json(const DetectionRecord& r) {
    ojson j;
    j["instance_id"] = r.instance_id;
    j["predicted_class"] = r.predicted_class;
    j["true_class"] = r.true_class;
    j["dissimilarity"] = r.dissimilarity;
    j["flagged"] = r.flagged;
    j["status"] = to_string(r.status);
    j["top_feature"] = r.top_feature;
    j["shap"] = {{"alpha0", r.shap.alpha0}, {"alpha", r.shap.alpha}, {"class_index", r.shap.class_index}};
    j["map_paths"] = {{"rf", r.rf_map_path}, {"gc", r.gc_map_path}};
    j["warning"] = r.warning ? ojson(*r.warning) : ojson(nullptr);
    return j;
}

DetectionRecord record_from_json(const nlohmann::json& j) {
    try {
        DetectionRecord r;
        r.instance_id = j.at("instance_id").get<std::string>();
        r.predicted_class = j.at("predicted_class").get<int>();
        r.true_class = j.at("true_class").get<int>();
        r.dissimilarity = j.at("dissimilarity").get<double>();
        r.flagged = j.at("flagged").get<bool>();
        r.status = parse_review_status(j.at("status").get<std::string>());
        r.top_feature = j.at("top_feature").get<int>();
        const auto& s = j.at("shap");
        r.shap.alpha0 = s.at("alpha0").get<double>();
        r.shap.alpha = s.at("alpha").get<std::vector<double>>();
        r.shap.class_index = s.at("class_index").get<int>();
        r.shap.instance_id = r.instance_id;
        r.rf_map_path = j.at("map_paths").at("rf").get<std::string>();
        r.gc_map_path = j.at("map_paths").at("gc").get<std::string>();
        if (j.contains("warning") && !j.at("warning").is_null()) r.warning = j.at("warning").get<std::string>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("detection record: ") + e.what());
    }
}

ojson report_to_json(const RunReport& rep) {
    ojson j;
    j["records"] = rep.records;
    j["correct"] = rep.correct;
    j["misclassified"] = rep.misclassified;
    j["flagged"] = rep.flagged;
    j["flag_rate"] = rep.flag_rate;
    j["lsm_accuracy"] = {{"macro_test", rep.lsm_macro_test_accuracy},
                         {"weighted_test", rep.lsm_weighted_test_accuracy}};
    auto classes = ojson::array();
    for (const auto& c : rep.classes) {
        ojson jc;
        jc["class_index"] = c.class_index;
        jc["class_name"] = c.class_name;
        jc["records"] = c.records;
        jc["correct"] = c.correct;
        jc["flagged"] = c.flagged;
        jc["flag_rate"] = c.flag_rate;
        jc["surrogate_available"] = c.surrogate_available;
        jc["lsm_train_accuracy"] = c.lsm_train_accuracy;
        jc["lsm_test_accuracy"] = c.lsm_test_accuracy;
        classes.push_back(std::move(jc));
    }
    j["classes"] = std::move(classes);
    auto failures = ojson::array();
    for (const auto& [id, err] : rep.failures) failures.push_back({{"instance_id", id}, {"error", err}});
    j["failures"] = std::move(failures);
    j["config"] = rep.config_echo;
    return j;
}

void write_records(const fs::path& path, const std::vector<DetectionRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

std::vector<DetectionRecord> read_records(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("records not found: " + path.string());
    std::vector<DetectionRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace rfcam
