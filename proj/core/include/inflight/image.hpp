#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace inflight {

// Dense H x W x C grid of signed reals, row-major with interleaved channels.
// Used for gradients and additive perturbations; no range constraint.
struct RealGrid {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> values;

    static RealGrid zeros(int h, int w, int c);
    double& at(int i, int j, int ch) { return values[(static_cast<std::size_t>(i) * width + j) * channels + ch]; }
    double at(int i, int j, int ch) const { return values[(static_cast<std::size_t>(i) * width + j) * channels + ch]; }
    std::size_t size() const { return values.size(); }
    bool same_shape(const RealGrid& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// An image: pixel values constrained to [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> pixels;  // row-major, channel-interleaved

    static Image zeros(int h, int w, int c);
    static Image filled(int h, int w, int c, double value);

    double& at(int i, int j, int ch) { return pixels[(static_cast<std::size_t>(i) * width + j) * channels + ch]; }
    double at(int i, int j, int ch) const { return pixels[(static_cast<std::size_t>(i) * width + j) * channels + ch]; }
    std::size_t size() const { return pixels.size(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    // Throws FormatError if a pixel leaves [0,1] or the buffer length is off.
    void validate() const;
};

struct LabeledDataset {
    std::vector<Image> images;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return images.size(); }
    int height() const { return images.empty() ? 0 : images.front().height; }
    int width() const { return images.empty() ? 0 : images.front().width; }
    int channels() const { return images.empty() ? 0 : images.front().channels; }

    // Indices of all samples labeled c, ascending.
    std::vector<std::size_t> class_indices(int c) const;
    LabeledDataset subset(std::span<const std::size_t> indices) const;

    // Checks label range, length agreement and per-image invariants.
    void validate() const;
};

struct SplitSpec {
    int per_class_defense = 100;
    std::uint64_t seed = 0;
};

}  // namespace inflight
