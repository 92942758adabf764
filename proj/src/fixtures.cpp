#include "rfcam/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <unordered_map>

#include <fmt/format.h>
#include <json.hpp>

#include "rfcam/errors.hpp"

namespace rfcam {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr double kCenterMargin = 1.0;
constexpr double kMinBlobSeparation = 3.0;
constexpr int kMaxPlacementTries = 64;
constexpr std::uint64_t kShuffleStreamBase = 1ull << 40;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

using Point = std::pair<double, double>;

Point random_center(CounterRng& rng, int size) {
    const double hi = size - 1 - kCenterMargin;
    return {rng.uniform(kCenterMargin, hi), rng.uniform(kCenterMargin, hi)};
}

Point separated_center(CounterRng& rng, int size, const Point& other) {
    Point p = random_center(rng, size);
    for (int i = 1; i < kMaxPlacementTries; ++i) {
        if (std::hypot(p.first - other.first, p.second - other.second) >= kMinBlobSeparation) break;
        p = random_center(rng, size);
    }
    return p;
}

void add_blob(std::vector<double>& volume, int size, int channel, const Point& center, double peak) {
    const double two_var = 2.0 * FixtureSpec::kBlobWidth * FixtureSpec::kBlobWidth;
    const std::size_t base = static_cast<std::size_t>(channel) * size * size;
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            const double dy = i - center.first;
            const double dx = j - center.second;
            volume[base + static_cast<std::size_t>(i) * size + j] +=
                peak * std::exp(-(dy * dy + dx * dx) / two_var);
        }
    }
}

HeadWeights make_head(const FixtureSpec& spec) {
    HeadWeights head;
    head.num_classes = spec.num_classes;
    head.channels = spec.channels;
    head.weights.assign(static_cast<std::size_t>(spec.num_classes) * spec.channels, 0.0);
    head.bias.assign(spec.num_classes, 0.0);
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int k : spec.core_channels(c)) head.weights[c * spec.channels + k] = FixtureSpec::kCoreWeight;
        for (int k : spec.spurious_channels(c)) head.weights[c * spec.channels + k] = FixtureSpec::kSpuriousWeight;
    }
    return head;
}

int head_argmax(const HeadWeights& head, const std::vector<float>& data, int pixels) {
    std::vector<double> means(head.channels, 0.0);
    for (int k = 0; k < head.channels; ++k) {
        double s = 0.0;
        for (int p = 0; p < pixels; ++p) s += data[static_cast<std::size_t>(k) * pixels + p];
        means[k] = s / pixels;
    }
    int best = 0;
    double best_score = -INFINITY;
    for (int c = 0; c < head.num_classes; ++c) {
        double score = head.bias[c];
        for (int k = 0; k < head.channels; ++k) score += head.weight(c, k) * means[k];
        if (score > best_score) {
            best_score = score;
            best = c;
        }
    }
    return best;
}

std::vector<InstanceKind> assign_kinds(const FixtureSpec& spec, int count, std::uint64_t stream) {
    const int spurious = static_cast<int>(std::lround(spec.spurious_fraction * count));
    const int hard = std::min(count - spurious, static_cast<int>(std::lround(spec.hard_fraction * count)));
    std::vector<InstanceKind> kinds(count, InstanceKind::Clean);
    std::fill_n(kinds.begin(), spurious, InstanceKind::SpuriousReliant);
    std::fill_n(kinds.begin() + spurious, hard, InstanceKind::Hard);
    CounterRng rng(spec.seed, stream);
    for (int i = count - 1; i > 0; --i) {
        std::swap(kinds[i], kinds[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    }
    return kinds;
}

ojson point_json(const Point& p) { return ojson::array({p.first, p.second}); }

}  // namespace

std::uint64_t CounterRng::next() {
    const std::uint64_t key = mix64(seed_ ^ mix64(stream_ + 0x9E3779B97F4A7C15ull));
    return mix64(key + 0xD1B54A32D192ED03ull * ++counter_);
}

double CounterRng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double CounterRng::normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t CounterRng::below(std::uint64_t bound) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * bound) >> 64);
}

void FixtureSpec::validate() const {
    if (num_classes < 2) throw ValidationError("fixture: num_classes must be >= 2");
    if (map_size < 3) throw ValidationError("fixture: map_size must be >= 3");
    if ((kCorePerClass + kSpuriousPerClass) * num_classes > channels) {
        throw ValidationError(fmt::format("fixture: {} classes need {} channels, only {} available",
                                          num_classes, (kCorePerClass + kSpuriousPerClass) * num_classes,
                                          channels));
    }
    if (train_per_class < 0 || test_per_class < 0) throw ValidationError("fixture: negative counts");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(spurious_fraction) || !unit(hard_fraction) || spurious_fraction + hard_fraction > 1.0) {
        throw ValidationError("fixture: spurious_fraction and hard_fraction must be in [0,1] and sum to <= 1");
    }
    if (noise_sigma < 0.0) throw ValidationError("fixture: noise_sigma must be >= 0");
}

std::vector<int> FixtureSpec::core_channels(int cls) const {
    const int base = cls * (kCorePerClass + kSpuriousPerClass);
    return {base, base + 1, base + 2};
}

std::vector<int> FixtureSpec::spurious_channels(int cls) const {
    const int base = cls * (kCorePerClass + kSpuriousPerClass) + kCorePerClass;
    return {base, base + 1};
}

std::string to_string(InstanceKind kind) {
    switch (kind) {
        case InstanceKind::Clean: return "clean";
        case InstanceKind::SpuriousReliant: return "spurious";
        case InstanceKind::Hard: return "hard";
    }
    return "clean";
}

const InstanceTruth* FixtureGroundTruth::find(const std::string& id) const {
    auto it = std::find_if(instances.begin(), instances.end(),
                           [&](const InstanceTruth& t) { return t.id == id; });
    return it == instances.end() ? nullptr : &*it;
}

FixtureOutput fixture_gen(const FixtureSpec& spec, const fs::path& out) {
    spec.validate();
    fs::create_directories(out / "tensors");

    const int size = spec.map_size;
    const int pixels = size * size;
    const HeadWeights head = make_head(spec);

    Manifest manifest;
    manifest.num_classes = spec.num_classes;
    manifest.channels = spec.channels;
    manifest.map_height = size;
    manifest.map_width = size;
    manifest.gradient_mode = GradientMode::AnalyticHead;
    manifest.head_weights_path = "head_weights.scdt";
    manifest.input_image_size = std::make_pair(32 * size, 32 * size);
    for (int c = 0; c < spec.num_classes; ++c) manifest.class_names.push_back(fmt::format("class_{}", c));

    FixtureGroundTruth truth;
    for (int c = 0; c < spec.num_classes; ++c) {
        truth.classes.push_back({spec.core_channels(c), spec.spurious_channels(c)});
    }

    std::vector<ImageEntry> images;
    std::uint64_t stream = 0;
    const std::vector<std::uint32_t> dims = {static_cast<std::uint32_t>(spec.channels),
                                             static_cast<std::uint32_t>(size),
                                             static_cast<std::uint32_t>(size)};

    for (int c = 0; c < spec.num_classes; ++c) {
        for (Split split : {Split::Train, Split::Test}) {
            const int count = split == Split::Train ? spec.train_per_class : spec.test_per_class;
            const auto kinds = assign_kinds(spec, count, kShuffleStreamBase + 2 * c + (split == Split::Test));
            for (int i = 0; i < count; ++i) {
                CounterRng rng(spec.seed, ++stream);
                InstanceTruth t;
                t.id = fmt::format("c{}-{}-{:03}", c, to_string(split), i);
                t.true_label = c;
                t.kind = kinds[i];
                t.core_center = random_center(rng, size);

                std::vector<double> volume(static_cast<std::size_t>(spec.channels) * pixels, 0.0);
                for (double& v : volume) v = spec.noise_sigma * rng.normal();

                double core_peak = 1.0;
                if (t.kind == InstanceKind::SpuriousReliant) {
                    core_peak = FixtureSpec::kSpuriousCorePeak;
                    t.spurious_center = separated_center(rng, size, t.core_center);
                    for (int k : spec.spurious_channels(c)) add_blob(volume, size, k, *t.spurious_center, 1.0);
                } else if (t.kind == InstanceKind::Hard) {
                    core_peak = spec.hard_core_peak;
                    const int offset = 1 + static_cast<int>(rng.below(spec.num_classes - 1));
                    t.distractor_class = (c + offset) % spec.num_classes;
                    t.spurious_center = separated_center(rng, size, t.core_center);
                    for (int k : spec.spurious_channels(*t.distractor_class)) {
                        add_blob(volume, size, k, *t.spurious_center, spec.distractor_peak);
                    }
                }
                for (int k : spec.core_channels(c)) add_blob(volume, size, k, t.core_center, core_peak);

                std::vector<float> data(volume.size());
                std::transform(volume.begin(), volume.end(), data.begin(),
                               [](double v) { return static_cast<float>(std::max(0.0, v)); });

                ImageEntry entry;
                entry.id = t.id;
                entry.true_label = c;
                entry.predicted_label = head_argmax(head, data, pixels);
                entry.activation_path = "tensors/" + t.id + ".scdt";
                entry.split = split;
                write_tensor(out / entry.activation_path, dims, data);
                images.push_back(std::move(entry));
                truth.instances.push_back(std::move(t));
            }
        }
    }

    write_head_weights(out / *manifest.head_weights_path, head);
    write_manifest(out, manifest, images);
    write_ground_truth(out / "ground_truth.json", spec, truth);
    return {load_bundle(out), std::move(truth)};
}

void write_ground_truth(const fs::path& path, const FixtureSpec& spec, const FixtureGroundTruth& truth) {
    ojson j;
    j["spec"] = {{"num_classes", spec.num_classes},
                 {"channels", spec.channels},
                 {"map_size", spec.map_size},
                 {"train_per_class", spec.train_per_class},
                 {"test_per_class", spec.test_per_class},
                 {"spurious_fraction", spec.spurious_fraction},
                 {"hard_fraction", spec.hard_fraction},
                 {"noise_sigma", spec.noise_sigma},
                 {"hard_core_peak", spec.hard_core_peak},
                 {"distractor_peak", spec.distractor_peak},
                 {"seed", spec.seed}};
    auto classes = ojson::array();
    for (const auto& c : truth.classes) classes.push_back({{"core", c.core}, {"spurious", c.spurious}});
    j["classes"] = std::move(classes);
    auto instances = ojson::array();
    for (const auto& t : truth.instances) {
        ojson ji;
        ji["id"] = t.id;
        ji["true_label"] = t.true_label;
        ji["kind"] = to_string(t.kind);
        ji["is_spurious_reliant"] = t.is_spurious_reliant();
        ji["core_center"] = point_json(t.core_center);
        ji["spurious_center"] = t.spurious_center ? point_json(*t.spurious_center) : ojson(nullptr);
        ji["distractor_class"] = t.distractor_class ? ojson(*t.distractor_class) : ojson(nullptr);
        instances.push_back(std::move(ji));
    }
    j["instances"] = std::move(instances);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

FixtureGroundTruth read_ground_truth(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("ground truth not found: " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        FixtureGroundTruth truth;
        for (const auto& jc : j.at("classes")) {
            truth.classes.push_back({jc.at("core").get<std::vector<int>>(), jc.at("spurious").get<std::vector<int>>()});
        }
        for (const auto& ji : j.at("instances")) {
            InstanceTruth t;
            t.id = ji.at("id").get<std::string>();
            t.true_label = ji.at("true_label").get<int>();
            const auto kind = ji.at("kind").get<std::string>();
            t.kind = kind == "spurious" ? InstanceKind::SpuriousReliant
                     : kind == "hard"   ? InstanceKind::Hard
                                        : InstanceKind::Clean;
            const auto cc = ji.at("core_center").get<std::vector<double>>();
            t.core_center = {cc.at(0), cc.at(1)};
            if (!ji.at("spurious_center").is_null()) {
                const auto sc = ji.at("spurious_center").get<std::vector<double>>();
                t.spurious_center = Point{sc.at(0), sc.at(1)};
            }
            if (!ji.at("distractor_class").is_null()) t.distractor_class = ji.at("distractor_class").get<int>();
            truth.instances.push_back(std::move(t));
        }
        return truth;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

DetectionScore score_detection(const std::vector<DetectionRecord>& records, const FixtureGroundTruth& truth) {
    std::unordered_map<std::string, const InstanceTruth*> index;
    for (const auto& t : truth.instances) index.emplace(t.id, &t);

    DetectionScore s;
    for (const auto& r : records) {
        auto it = index.find(r.instance_id);
        if (it == index.end()) {
            throw ValidationError("score_detection: record " + r.instance_id + " has no ground truth");
        }
        if (r.predicted_class != r.true_class) continue;
        ++s.correct;
        const bool positive = it->second->is_spurious_reliant();
        if (positive) ++s.positives;
        if (r.flagged) {
            ++s.flagged;
            if (positive) ++s.true_positives;
        }
    }
    s.recall_defined = s.positives > 0;
    s.precision_defined = s.flagged > 0;
    s.recall = s.recall_defined ? static_cast<double>(s.true_positives) / s.positives : 1.0;
    s.precision = s.precision_defined ? static_cast<double>(s.true_positives) / s.flagged : 1.0;
    s.flag_rate = s.correct ? static_cast<double>(s.flagged) / s.correct : 0.0;
    return s;
}

}  // namespace rfcam
