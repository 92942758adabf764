#pragma once

// On-disk tensor bundle: binary tensor files plus a JSON manifest.
//
// Tensor file layout (all integers little-endian u32):
//   "SCDT" | version | ndim | dim[0] .. dim[ndim-1] | f32 LE payload, row-major

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rfcam {

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;

struct Tensor {
    std::vector<std::uint32_t> shape;
    std::vector<float> data;

    std::size_t dim(std::size_t i) const { return shape.at(i); }
};

void write_tensor(const std::filesystem::path& path, std::span<const std::uint32_t> dims,
                  std::span<const float> data);
inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    write_tensor(path, t.shape, t.data);
}

// Throws FormatError for bad magic/version/truncation and ValidationError for
// non-finite payload values.
Tensor read_tensor(const std::filesystem::path& path);

enum class GradientMode { Precomputed, AnalyticHead };
enum class Split { Train, Test };

std::string to_string(GradientMode mode);
std::string to_string(Split split);

struct Manifest {
    int format_version = kManifestFormatVersion;
    int num_classes = 0;
    int channels = 0;
    int map_height = 0;
    int map_width = 0;
    GradientMode gradient_mode = GradientMode::Precomputed;
    std::vector<std::string> class_names;
    std::optional<std::string> head_weights_path;
    std::optional<std::pair<int, int>> input_image_size;  // (height, width)

    // Number of spatial positions per activation map.
    int pixel_count() const { return map_height * map_width; }

    bool operator==(const Manifest&) const = default;
};

struct ImageEntry {
    std::string id;
    int true_label = 0;
    int predicted_label = 0;
    std::string activation_path;
    std::optional<std::string> gradient_path;
    std::optional<std::string> image_path;
    Split split = Split::Train;

    bool correct() const { return true_label == predicted_label; }
    bool operator==(const ImageEntry&) const = default;
};

// Final linear layer after global average pooling: Y = W * mean(A) + b.
struct HeadWeights {
    int num_classes = 0;
    int channels = 0;
    std::vector<double> weights;  // row-major num_classes x channels
    std::vector<double> bias;

    double weight(int cls, int k) const {
        return weights[static_cast<std::size_t>(cls) * channels + k];
    }
    bool operator==(const HeadWeights&) const = default;
};

// Head weights are stored as a single tensor of shape (num_classes, K + 1);
// the last column is the bias.
HeadWeights read_head_weights(const std::filesystem::path& path);
void write_head_weights(const std::filesystem::path& path, const HeadWeights& head);

class TensorBundle {
public:
    TensorBundle(std::filesystem::path root, Manifest manifest, std::vector<ImageEntry> images,
                 std::optional<HeadWeights> head);

    const std::filesystem::path& root() const { return root_; }
    const Manifest& manifest() const { return manifest_; }
    const std::vector<ImageEntry>& images() const { return images_; }
    const std::optional<HeadWeights>& head() const { return head_; }

    const ImageEntry* find(const std::string& id) const;

    std::filesystem::path resolve(const std::string& relative) const { return root_ / relative; }

    // Reads and validates an entry's activation tensor against (K, H, W).
    Tensor activations(const ImageEntry& entry) const;
    // Precomputed gradient tensor, if the entry carries one.
    std::optional<Tensor> gradients(const ImageEntry& entry) const;

    bool operator==(const TensorBundle&) const = default;

private:
    std::filesystem::path root_;
    Manifest manifest_;
    std::vector<ImageEntry> images_;
    std::optional<HeadWeights> head_;
};

// Loads <root>/manifest.json and validates manifest-level invariants eagerly.
// Tensor shapes are validated when a tensor is first read.
TensorBundle load_bundle(const std::filesystem::path& root);

void write_manifest(const std::filesystem::path& root, const Manifest& manifest,
                    const std::vector<ImageEntry>& images);

}  // namespace rfcam
