#include "rfcam/tensor_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rfcam/errors.hpp"

namespace rfcam {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'C', 'D', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

GradientMode parse_gradient_mode(const std::string& s) {
    if (s == "precomputed") return GradientMode::Precomputed;
    if (s == "analytic_head") return GradientMode::AnalyticHead;
    throw ValidationError("manifest: unknown gradient_mode '" + s + "'");
}

Split parse_split(const std::string& s, const std::string& id) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    throw ValidationError("entry " + id + ": unknown split '" + s + "'");
}

template <typename T>
T required(const json& j, const char* key, const std::string& context) {
    if (!j.contains(key)) throw ValidationError(context + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(context + ": field '" + key + "' has the wrong type");
    }
}

std::optional<std::string> optional_string(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
}

void check_tensor_shape(const Tensor& t, const Manifest& m, const std::string& id,
                        const char* what) {
    const std::vector<std::uint32_t> expected = {static_cast<std::uint32_t>(m.channels),
                                                 static_cast<std::uint32_t>(m.map_height),
                                                 static_cast<std::uint32_t>(m.map_width)};
    if (t.shape != expected) {
        std::ostringstream os;
        os << "entry " << id << ": " << what << " tensor shape (";
        for (std::size_t i = 0; i < t.shape.size(); ++i) os << (i ? "," : "") << t.shape[i];
        os << ") does not match manifest (" << m.channels << "," << m.map_height << ","
           << m.map_width << ")";
        throw ValidationError(os.str());
    }
}

}  // namespace

std::string to_string(GradientMode mode) {
    return mode == GradientMode::Precomputed ? "precomputed" : "analytic_head";
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

void write_tensor(const fs::path& path, std::span<const std::uint32_t> dims,
                  std::span<const float> data) {
    if (dims.empty()) throw ValidationError("write_tensor: tensor needs at least one dim");
    std::size_t count = 1;
    for (auto d : dims) {
        if (d < 1) throw ValidationError("write_tensor: every dim must be >= 1");
        count *= d;
    }
    if (count != data.size()) {
        throw ValidationError("write_tensor: dims product " + std::to_string(count) +
                              " != data length " + std::to_string(data.size()));
    }

    std::string bytes;
    bytes.reserve(12 + 4 * dims.size() + 4 * data.size());
    bytes.append(kMagic.data(), kMagic.size());
    put_u32(bytes, kTensorFormatVersion);
    put_u32(bytes, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put_u32(bytes, d);
    for (float v : data) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
    write_file(path, bytes);
}

Tensor read_tensor(const fs::path& path) {
    const std::string bytes = read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::string ctx = path.string();

    if (bytes.size() < 12) throw FormatError(ctx + ": truncated header");
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw FormatError(ctx + ": bad magic");
    }
    const std::uint32_t version = get_u32(p + 4);
    if (version != kTensorFormatVersion) {
        throw FormatError(ctx + ": unsupported version " + std::to_string(version));
    }
    const std::uint32_t ndim = get_u32(p + 8);
    if (ndim == 0) throw FormatError(ctx + ": zero-dimensional tensor");
    const std::size_t header = 12 + 4 * static_cast<std::size_t>(ndim);
    if (bytes.size() < header) throw FormatError(ctx + ": truncated dims");

    Tensor t;
    t.shape.resize(ndim);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        t.shape[i] = get_u32(p + 12 + 4 * i);
        if (t.shape[i] == 0) throw FormatError(ctx + ": zero-length dim");
        count *= t.shape[i];
    }
    if (bytes.size() != header + 4 * count) {
        throw FormatError(ctx + ": payload is " + std::to_string(bytes.size() - header) +
                          " bytes, expected " + std::to_string(4 * count));
    }
    t.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const float v = std::bit_cast<float>(get_u32(p + header + 4 * i));
        if (!std::isfinite(v)) {
            throw ValidationError(ctx + ": non-finite value at index " + std::to_string(i));
        }
        t.data[i] = v;
    }
    return t;
}

HeadWeights read_head_weights(const fs::path& path) {
    const Tensor t = read_tensor(path);
    if (t.shape.size() != 2 || t.shape[1] < 2) {
        throw ValidationError(path.string() + ": head weights must have shape (C, K+1)");
    }
    HeadWeights head;
    head.num_classes = static_cast<int>(t.shape[0]);
    head.channels = static_cast<int>(t.shape[1]) - 1;
    const std::size_t cols = t.shape[1];
    for (int c = 0; c < head.num_classes; ++c) {
        for (int k = 0; k < head.channels; ++k) head.weights.push_back(t.data[c * cols + k]);
        head.bias.push_back(t.data[c * cols + head.channels]);
    }
    return head;
}

void write_head_weights(const fs::path& path, const HeadWeights& head) {
    const std::uint32_t cols = static_cast<std::uint32_t>(head.channels) + 1;
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(head.num_classes) * cols);
    for (int c = 0; c < head.num_classes; ++c) {
        for (int k = 0; k < head.channels; ++k) data.push_back(static_cast<float>(head.weight(c, k)));
        data.push_back(static_cast<float>(head.bias[c]));
    }
    const std::array<std::uint32_t, 2> dims = {static_cast<std::uint32_t>(head.num_classes), cols};
    write_tensor(path, dims, data);
}

TensorBundle::TensorBundle(fs::path root, Manifest manifest, std::vector<ImageEntry> images,
                           std::optional<HeadWeights> head)
    : root_(std::move(root)),
      manifest_(std::move(manifest)),
      images_(std::move(images)),
      head_(std::move(head)) {}

const ImageEntry* TensorBundle::find(const std::string& id) const {
    auto it = std::find_if(images_.begin(), images_.end(),
                           [&](const ImageEntry& e) { return e.id == id; });
    return it == images_.end() ? nullptr : &*it;
}

Tensor TensorBundle::activations(const ImageEntry& entry) const {
    Tensor t = read_tensor(resolve(entry.activation_path));
    check_tensor_shape(t, manifest_, entry.id, "activation");
    return t;
}

std::optional<Tensor> TensorBundle::gradients(const ImageEntry& entry) const {
    if (!entry.gradient_path) return std::nullopt;
    Tensor t = read_tensor(resolve(*entry.gradient_path));
    check_tensor_shape(t, manifest_, entry.id, "gradient");
    return t;
}

TensorBundle load_bundle(const fs::path& root) {
    const fs::path manifest_path = root / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw NotFoundError("manifest not found: " + manifest_path.string());
    }
    json j;
    try {
        j = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }

    const std::string ctx = "manifest";
    Manifest m;
    m.format_version = required<int>(j, "format_version", ctx);
    m.num_classes = required<int>(j, "num_classes", ctx);
    m.channels = required<int>(j, "channels", ctx);
    m.map_height = required<int>(j, "map_height", ctx);
    m.map_width = required<int>(j, "map_width", ctx);
    m.gradient_mode = parse_gradient_mode(required<std::string>(j, "gradient_mode", ctx));
    if (j.contains("class_names")) m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.head_weights_path = optional_string(j, "head_weights_path");
    if (j.contains("input_image_size") && !j.at("input_image_size").is_null()) {
        const auto size = j.at("input_image_size").get<std::vector<int>>();
        if (size.size() != 2 || size[0] < 1 || size[1] < 1) {
            throw ValidationError("manifest: input_image_size must be [height, width] >= 1");
        }
        m.input_image_size = std::make_pair(size[0], size[1]);
    }

    if (m.format_version != kManifestFormatVersion) {
        throw ValidationError("manifest: unsupported format_version " +
                              std::to_string(m.format_version));
    }
    if (m.num_classes < 2) throw ValidationError("manifest: num_classes must be >= 2");
    if (m.channels < 1 || m.map_height < 1 || m.map_width < 1) {
        throw ValidationError("manifest: channels, map_height and map_width must be >= 1");
    }
    if (!m.class_names.empty() && static_cast<int>(m.class_names.size()) != m.num_classes) {
        throw ValidationError("manifest: class_names length differs from num_classes");
    }
    if (m.gradient_mode == GradientMode::AnalyticHead && !m.head_weights_path) {
        throw ValidationError("manifest: analytic_head mode requires head_weights_path");
    }

    std::vector<ImageEntry> images;
    std::set<std::string> seen;
    for (const json& e : j.value("images", json::array())) {
        ImageEntry entry;
        entry.id = required<std::string>(e, "id", "manifest entry");
        const std::string ectx = "entry " + entry.id;
        if (!seen.insert(entry.id).second) throw ValidationError(ectx + ": duplicate id");
        entry.true_label = required<int>(e, "true_label", ectx);
        entry.predicted_label = required<int>(e, "predicted_label", ectx);
        entry.activation_path = required<std::string>(e, "activation_path", ectx);
        entry.gradient_path = optional_string(e, "gradient_path");
        entry.image_path = optional_string(e, "image_path");
        entry.split = parse_split(required<std::string>(e, "split", ectx), entry.id);

        auto in_range = [&](int label) { return label >= 0 && label < m.num_classes; };
        if (!in_range(entry.true_label)) throw ValidationError(ectx + ": true_label out of range");
        if (!in_range(entry.predicted_label)) {
            throw ValidationError(ectx + ": predicted_label out of range");
        }
        if (m.gradient_mode == GradientMode::Precomputed && !entry.gradient_path) {
            throw ValidationError(ectx + ": precomputed mode requires gradient_path");
        }
        images.push_back(std::move(entry));
    }

    std::optional<HeadWeights> head;
    if (m.head_weights_path) {
        head = read_head_weights(root / *m.head_weights_path);
        if (head->num_classes != m.num_classes || head->channels != m.channels) {
            throw ValidationError("head weights shape does not match (num_classes, channels)");
        }
    }
    return TensorBundle(root, std::move(m), std::move(images), std::move(head));
}

void write_manifest(const fs::path& root, const Manifest& m, const std::vector<ImageEntry>& images) {
    nlohmann::ordered_json j;
    j["format_version"] = m.format_version;
    j["num_classes"] = m.num_classes;
    j["channels"] = m.channels;
    j["map_height"] = m.map_height;
    j["map_width"] = m.map_width;
    j["gradient_mode"] = to_string(m.gradient_mode);
    j["class_names"] = m.class_names;
    j["head_weights_path"] = m.head_weights_path ? json(*m.head_weights_path) : json(nullptr);
    j["input_image_size"] = m.input_image_size
                                ? json::array({m.input_image_size->first, m.input_image_size->second})
                                : json(nullptr);
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : images) {
        nlohmann::ordered_json je;
        je["id"] = e.id;
        je["true_label"] = e.true_label;
        je["predicted_label"] = e.predicted_label;
        je["activation_path"] = e.activation_path;
        je["gradient_path"] = e.gradient_path ? json(*e.gradient_path) : json(nullptr);
        je["image_path"] = e.image_path ? json(*e.image_path) : json(nullptr);
        je["split"] = to_string(e.split);
        arr.push_back(std::move(je));
    }
    j["images"] = std::move(arr);
    write_file(root / "manifest.json", j.dump(2) + "\n");
}

}  // namespace rfcam
