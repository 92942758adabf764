#pragma once

// Saliency primitives shared by Grad-CAM and RF-CAM.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfcam/tensor_store.hpp"

namespace rfcam {

// Per-channel gradient weights w_k for one class.
struct ChannelWeights {
    std::vector<double> values;
};

// Per-channel spatial mean activation.
struct ChannelMeans {
    std::vector<double> values;
};

// Input vector of a per-class surrogate: unit(w) + unit(mean activation).
struct SurrogateFeatureVector {
    std::vector<double> values;
};

enum class MapKind { GradCam, RfCam };

std::string to_string(MapKind kind);

struct SaliencyMap {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // row-major height x width
    MapKind kind = MapKind::GradCam;
    int class_index = 0;

    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * width + j]; }
    double max_value() const;
};

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB triples

    bool operator==(const RgbImage&) const = default;
};

// Mean over all (i, j) of each gradient channel.
ChannelWeights pool_gradients(const Tensor& gradients);

// Pooled gradients of a GAP + linear head: dY_c/dA_ij^k = W[c,k] / Z for every
// pixel, so the pooled weight is W[c,k] / Z.
ChannelWeights analytic_head_gradients(const HeadWeights& head, int class_index, int pixel_count);

ChannelMeans channel_means(const Tensor& activations);

// Returns v / ||v||_2, or v unchanged when its norm is <= 1e-12.
std::vector<double> unit_normalize(std::span<const double> v);

SurrogateFeatureVector build_phi(const ChannelWeights& weights, const ChannelMeans& means);

// ReLU(sum_k coeffs[k] * A^k), not normalized.
SaliencyMap weighted_activation_map(std::span<const double> coeffs, const Tensor& activations,
                                    MapKind kind = MapKind::GradCam, int class_index = 0);

// Divides by the map maximum; all-zero maps come back unchanged.
SaliencyMap normalize_map(SaliencyMap map);

// Corner-aligned bilinear upscaling.
SaliencyMap upscale_map(const SaliencyMap& map, int target_height, int target_width);

// Blue -> green -> red ramp, linear between the three stops.
std::array<std::uint8_t, 3> ramp_color(double intensity);

// Renders a normalized map through the color ramp. When an image is given it is
// resized to the map size and blended with the heatmap at alpha 0.5.
std::vector<std::uint8_t> render_overlay(const SaliencyMap& map,
                                         const std::optional<RgbImage>& image = std::nullopt);

// Everything the pipeline derives from one bundle entry before surrogate
// evaluation. Gradient weights always refer to the predicted class.
struct InstanceFeatures {
    Tensor activations;
    ChannelWeights weights;
    ChannelMeans means;
    SurrogateFeatureVector phi;
};

ChannelWeights gradient_weights(const TensorBundle& bundle, const ImageEntry& entry);
InstanceFeatures compute_instance_features(const TensorBundle& bundle, const ImageEntry& entry);

std::vector<std::uint8_t> encode_png(const RgbImage& image);
RgbImage decode_png(std::span<const std::uint8_t> bytes);
RgbImage read_png(const std::filesystem::path& path);

}  // namespace rfcam
