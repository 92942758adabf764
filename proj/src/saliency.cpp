#include "rfcam/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include <png.h>

#include "rfcam/errors.hpp"

namespace rfcam {

namespace {

struct Dims3 {
    std::size_t channels, height, width;
};

Dims3 dims3(const Tensor& t, const char* what) {
    if (t.shape.size() != 3) {
        throw ValidationError(std::string(what) + ": expected a K x H x W tensor");
    }
    return {t.shape[0], t.shape[1], t.shape[2]};
}

void require_finite(std::span<const double> v, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw ValidationError(std::string(what) + ": non-finite value at index " +
                                  std::to_string(i));
        }
    }
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Bilinear sample of an H x W field at fractional (y, x).
template <typename Fetch>
double bilinear(Fetch&& fetch, int height, int width, double y, double x) {
    const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, height - 1);
    const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const int x1 = std::min(x0 + 1, width - 1);
    const double fy = y - y0;
    const double fx = x - x0;
    const double top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x1) * fx;
    const double bottom = fetch(y1, x0) * (1.0 - fx) + fetch(y1, x1) * fx;
    return top * (1.0 - fy) + bottom * fy;
}

double source_coord(int dst, int dst_size, int src_size) {
    if (dst_size <= 1) return 0.0;
    return static_cast<double>(dst) * (src_size - 1) / (dst_size - 1);
}

}  // namespace

std::string to_string(MapKind kind) { return kind == MapKind::GradCam ? "grad_cam" : "rf_cam"; }

double SaliencyMap::max_value() const {
    return data.empty() ? 0.0 : *std::max_element(data.begin(), data.end());
}

ChannelWeights pool_gradients(const Tensor& gradients) {
    const auto [k_count, h, w] = dims3(gradients, "pool_gradients");
    const std::size_t z = h * w;
    ChannelWeights out;
    out.values.resize(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
        double sum = 0.0;
        for (std::size_t p = 0; p < z; ++p) {
            const double g = gradients.data[k * z + p];
            if (!std::isfinite(g)) throw ValidationError("pool_gradients: non-finite gradient");
            sum += g;
        }
        out.values[k] = sum / static_cast<double>(z);
    }
    return out;
}

ChannelWeights analytic_head_gradients(const HeadWeights& head, int class_index, int pixel_count) {
    if (class_index < 0 || class_index >= head.num_classes) {
        throw ValidationError("analytic_head_gradients: class index " +
                              std::to_string(class_index) + " out of range");
    }
    if (pixel_count < 1) throw ValidationError("analytic_head_gradients: Z must be >= 1");
    ChannelWeights out;
    out.values.resize(head.channels);
    for (int k = 0; k < head.channels; ++k) {
        // Averaging Z identical per-pixel derivatives W[c,k]/Z gives W[c,k]/Z.
        out.values[k] = head.weight(class_index, k) / pixel_count;
    }
    return out;
}

ChannelMeans channel_means(const Tensor& activations) {
    const auto [k_count, h, w] = dims3(activations, "channel_means");
    const std::size_t z = h * w;
    ChannelMeans out;
    out.values.resize(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
        double sum = 0.0;
        for (std::size_t p = 0; p < z; ++p) sum += activations.data[k * z + p];
        out.values[k] = sum / static_cast<double>(z);
    }
    return out;
}

std::vector<double> unit_normalize(std::span<const double> v) {
    require_finite(v, "unit_normalize");
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::sqrt(sq);
    std::vector<double> out(v.begin(), v.end());
    if (norm > 1e-12) {
        for (double& x : out) x /= norm;
    }
    return out;
}

SurrogateFeatureVector build_phi(const ChannelWeights& weights, const ChannelMeans& means) {
    if (weights.values.size() != means.values.size()) {
        throw ValidationError("build_phi: weight and mean vectors differ in length");
    }
    const auto w_hat = unit_normalize(weights.values);
    const auto a_hat = unit_normalize(means.values);
    SurrogateFeatureVector phi;
    phi.values.resize(w_hat.size());
    for (std::size_t k = 0; k < w_hat.size(); ++k) phi.values[k] = w_hat[k] + a_hat[k];
    return phi;
}

SaliencyMap weighted_activation_map(std::span<const double> coeffs, const Tensor& activations,
                                    MapKind kind, int class_index) {
    const auto [k_count, h, w] = dims3(activations, "weighted_activation_map");
    if (coeffs.size() != k_count) {
        throw ValidationError("weighted_activation_map: " + std::to_string(coeffs.size()) +
                              " coefficients for " + std::to_string(k_count) + " channels");
    }
    const std::size_t z = h * w;
    SaliencyMap map;
    map.height = static_cast<int>(h);
    map.width = static_cast<int>(w);
    map.kind = kind;
    map.class_index = class_index;
    map.data.assign(z, 0.0);
    for (std::size_t p = 0; p < z; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < k_count; ++k) acc += coeffs[k] * activations.data[k * z + p];
        map.data[p] = std::max(0.0, acc);
    }
    return map;
}

SaliencyMap normalize_map(SaliencyMap map) {
    const double peak = map.max_value();
    if (peak > 0.0) {
        for (double& v : map.data) v /= peak;
    }
    return map;
}

SaliencyMap upscale_map(const SaliencyMap& map, int target_height, int target_width) {
    if (target_height < map.height || target_width < map.width) {
        throw ValidationError("upscale_map: target " + std::to_string(target_height) + "x" +
                              std::to_string(target_width) + " is smaller than the source map");
    }
    SaliencyMap out = map;
    out.height = target_height;
    out.width = target_width;
    out.data.assign(static_cast<std::size_t>(target_height) * target_width, 0.0);
    auto fetch = [&](int i, int j) { return map.at(i, j); };
    for (int y = 0; y < target_height; ++y) {
        const double sy = source_coord(y, target_height, map.height);
        for (int x = 0; x < target_width; ++x) {
            const double sx = source_coord(x, target_width, map.width);
            out.data[static_cast<std::size_t>(y) * target_width + x] =
                bilinear(fetch, map.height, map.width, sy, sx);
        }
    }
    return out;
}

std::array<std::uint8_t, 3> ramp_color(double intensity) {
    const double t = std::clamp(intensity, 0.0, 1.0);
    double r = 0.0, g = 0.0, b = 0.0;
    if (t <= 0.5) {
        g = t / 0.5;
        b = 1.0 - g;
    } else {
        r = (t - 0.5) / 0.5;
        g = 1.0 - r;
    }
    return {to_byte(r), to_byte(g), to_byte(b)};
}

std::vector<std::uint8_t> render_overlay(const SaliencyMap& map, const std::optional<RgbImage>& image) {
    RgbImage out;
    out.height = map.height;
    out.width = map.width;
    out.pixels.resize(static_cast<std::size_t>(map.height) * map.width * 3);

    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            const auto heat = ramp_color(map.at(y, x));
            const std::size_t o = (static_cast<std::size_t>(y) * map.width + x) * 3;
            if (!image) {
                std::copy(heat.begin(), heat.end(), out.pixels.begin() + o);
                continue;
            }
            const double sy = source_coord(y, map.height, image->height);
            const double sx = source_coord(x, map.width, image->width);
            for (int ch = 0; ch < 3; ++ch) {
                auto fetch = [&](int i, int j) {
                    return static_cast<double>(
                        image->pixels[(static_cast<std::size_t>(i) * image->width + j) * 3 + ch]);
                };
                const double base = bilinear(fetch, image->height, image->width, sy, sx);
                out.pixels[o + ch] = static_cast<std::uint8_t>(
                    std::lround(std::clamp(0.5 * heat[ch] + 0.5 * base, 0.0, 255.0)));
            }
        }
    }
    return encode_png(out);
}

ChannelWeights gradient_weights(const TensorBundle& bundle, const ImageEntry& entry) {
    if (bundle.manifest().gradient_mode == GradientMode::AnalyticHead) {
        return analytic_head_gradients(*bundle.head(), entry.predicted_label,
                                       bundle.manifest().pixel_count());
    }
    auto grads = bundle.gradients(entry);
    if (!grads) throw ValidationError("entry " + entry.id + ": missing gradient tensor");
    return pool_gradients(*grads);
}

InstanceFeatures compute_instance_features(const TensorBundle& bundle, const ImageEntry& entry) {
    InstanceFeatures f;
    f.activations = bundle.activations(entry);
    f.weights = gradient_weights(bundle, entry);
    f.means = channel_means(f.activations);
    f.phi = build_phi(f.weights, f.means);
    return f;
}

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
        throw IoError(std::string("png encode failed: ") + img.message);
    }
    std::vector<std::uint8_t> bytes(size);
    if (!png_image_write_to_memory(&img, bytes.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
        throw IoError(std::string("png encode failed: ") + img.message);
    }
    bytes.resize(size);
    return bytes;
}

RgbImage decode_png(std::span<const std::uint8_t> bytes) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw FormatError(std::string("png decode failed: ") + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    RgbImage out;
    out.height = static_cast<int>(img.height);
    out.width = static_cast<int>(img.width);
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw FormatError(std::string("png decode failed: ") + img.message);
    }
    return out;
}

RgbImage read_png(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open image " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                          std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

}  // namespace rfcam
