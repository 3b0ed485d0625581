#include "inflight/image.hpp"

#include <algorithm>
#include <string>

#include "inflight/errors.hpp"

namespace inflight {

RealGrid RealGrid::zeros(int h, int w, int c) {
    RealGrid g;
    g.height = h;
    g.width = w;
    g.channels = c;
    g.values.assign(static_cast<std::size_t>(h) * w * c, 0.0);
    return g;
}

Image Image::zeros(int h, int w, int c) { return filled(h, w, c, 0.0); }

Image Image::filled(int h, int w, int c, double value) {
    Image img;
    img.height = h;
    img.width = w;
    img.channels = c;
    img.pixels.assign(static_cast<std::size_t>(h) * w * c, value);
    return img;
}

void Image::validate() const {
    if (height <= 0 || width <= 0 || channels <= 0)
        throw FormatError("image dimensions must be positive");
    if (pixels.size() != static_cast<std::size_t>(height) * width * channels)
        throw FormatError("pixel buffer length " + std::to_string(pixels.size()) + " does not match " +
                          std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels));
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        double v = pixels[i];
        if (!(v >= 0.0 && v <= 1.0))
            throw FormatError("pixel " + std::to_string(i) + " = " + std::to_string(v) + " outside [0,1]");
    }
}

std::vector<std::size_t> LabeledDataset::class_indices(int c) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == c) out.push_back(i);
    return out;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    out.num_classes = num_classes;
    out.images.reserve(indices.size());
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        out.images.push_back(images.at(i));
        out.labels.push_back(labels.at(i));
    }
    return out;
}

void LabeledDataset::validate() const {
    if (images.size() != labels.size())
        throw FormatError("image count " + std::to_string(images.size()) + " != label count " +
                          std::to_string(labels.size()));
    if (num_classes <= 0) throw FormatError("num_classes must be positive");
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw FormatError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                              " outside [0," + std::to_string(num_classes) + ")");
        if (!images[i].same_shape(images.front()))
            throw FormatError("image " + std::to_string(i) + " has mismatched shape");
        images[i].validate();
    }
}

}  // namespace inflight
