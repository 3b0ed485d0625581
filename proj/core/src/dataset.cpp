#include "inflight/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "inflight/errors.hpp"
#include "inflight/rng.hpp"

namespace inflight {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path, const char* what) {
    std::array<unsigned char, 4> b{};
    if (!in.read(reinterpret_cast<char*>(b.data()), 4))
        throw FormatError(path.string() + ": truncated while reading " + what + " at offset " +
                          std::to_string(static_cast<long long>(in.tellg())));
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    std::array<unsigned char, 4> b{static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                   static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b.data()), 4);
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path) {
    std::ifstream img_in(image_path, std::ios::binary);
    if (!img_in) throw IoError("cannot open image file " + image_path.string());
    std::ifstream lbl_in(label_path, std::ios::binary);
    if (!lbl_in) throw IoError("cannot open label file " + label_path.string());

    std::uint32_t img_magic = read_be32(img_in, image_path, "magic");
    if (img_magic != kImageMagic)
        throw FormatError(image_path.string() + ": bad image magic 0x" + std::to_string(img_magic) + " at offset 0");
    std::uint32_t n_images = read_be32(img_in, image_path, "count");
    std::uint32_t rows = read_be32(img_in, image_path, "rows");
    std::uint32_t cols = read_be32(img_in, image_path, "cols");

    std::uint32_t lbl_magic = read_be32(lbl_in, label_path, "magic");
    if (lbl_magic != kLabelMagic)
        throw FormatError(label_path.string() + ": bad label magic 0x" + std::to_string(lbl_magic) + " at offset 0");
    std::uint32_t n_labels = read_be32(lbl_in, label_path, "count");

    if (n_images != n_labels)
        throw FormatError("count mismatch: " + image_path.string() + " has " + std::to_string(n_images) + " images (offset 4) but " +
                          label_path.string() + " has " + std::to_string(n_labels) + " labels (offset 4)");
    if (rows == 0 || cols == 0) throw FormatError(image_path.string() + ": zero image dimensions at offset 8");

    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    LabeledDataset ds;
    ds.images.reserve(n_images);
    ds.labels.reserve(n_images);
    int max_label = 0;
    for (std::uint32_t i = 0; i < n_images; ++i) {
        if (!img_in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw FormatError(image_path.string() + ": truncated pixel payload at image " + std::to_string(i) +
                              " (offset " + std::to_string(16 + static_cast<std::size_t>(i) * buf.size()) + ")");
        Image img;
        img.height = static_cast<int>(rows);
        img.width = static_cast<int>(cols);
        img.channels = 1;
        img.pixels.resize(buf.size());
        for (std::size_t p = 0; p < buf.size(); ++p) img.pixels[p] = buf[p] / 255.0;
        ds.images.push_back(std::move(img));

        char lbl = 0;
        if (!lbl_in.read(&lbl, 1))
            throw FormatError(label_path.string() + ": truncated label payload at index " + std::to_string(i) +
                              " (offset " + std::to_string(8 + i) + ")");
        int label = static_cast<unsigned char>(lbl);
        max_label = std::max(max_label, label);
        ds.labels.push_back(label);
    }
    ds.num_classes = max_label + 1;
    ds.validate();
    return ds;
}

Image synthetic_template(int c, int h, int w, int channels) {
    // Distinct per-class harmonics over the flattened pixel index, kept
    // inside [0.1, 0.9] so the noise rarely clips.
    Image img = Image::zeros(h, w, channels);
    const double total = static_cast<double>(h) * w;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double u = (i * w + j) / total;
            double v = 0.5 + 0.4 * std::cos(2.0 * std::numbers::pi * (c + 1) * u + 0.7 * c);
            for (int ch = 0; ch < channels; ++ch) img.at(i, j, ch) = v;
        }
    return img;
}

LabeledDataset generate_synthetic(int num_classes, int per_class, int h, int w, int channels, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("generate_synthetic: num_classes must be >= 2");
    if (per_class < 1) throw ConfigError("generate_synthetic: per_class must be >= 1");

    constexpr double kNoiseAmplitude = 0.1;
    std::mt19937_64 g(derive_seed(seed, "synthetic"));
    LabeledDataset ds;
    ds.num_classes = num_classes;
    ds.images.reserve(static_cast<std::size_t>(num_classes) * per_class);
    for (int c = 0; c < num_classes; ++c) {
        Image tmpl = synthetic_template(c, h, w, channels);
        for (int k = 0; k < per_class; ++k) {
            Image img = tmpl;
            for (double& px : img.pixels) {
                px += uniform_in(g, -kNoiseAmplitude, kNoiseAmplitude);
                px = std::clamp(px, 0.0, 1.0);
            }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(c);
        }
    }
    ds.validate();
    return ds;
}

SplitResult split_defense_test(const LabeledDataset& dataset, const SplitSpec& spec) {
    if (spec.per_class_defense < 1) throw SplitError("per_class_defense must be >= 1");
    dataset.validate();

    std::mt19937_64 g(derive_seed(spec.seed, "split"));
    std::vector<bool> in_defense(dataset.size(), false);
    for (int c = 0; c < dataset.num_classes; ++c) {
        auto members = dataset.class_indices(c);
        if (members.size() < static_cast<std::size_t>(spec.per_class_defense))
            throw SplitError("class " + std::to_string(c) + " has only " + std::to_string(members.size()) +
                             " samples, need " + std::to_string(spec.per_class_defense));
        auto picks = sample_without_replacement(members.size(), static_cast<std::size_t>(spec.per_class_defense), g);
        for (std::size_t p : picks) in_defense[members[p]] = true;
    }

    SplitResult out;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        (in_defense[i] ? out.defense_indices : out.test_indices).push_back(i);
    out.defense = dataset.subset(out.defense_indices);
    out.test = dataset.subset(out.test_indices);
    return out;
}

namespace {
constexpr std::uint32_t kCacheMagic = 0x49464453;  // "IFDS"
constexpr std::uint32_t kCacheVersion = 1;
}  // namespace

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
    ds.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    write_be32(out, kCacheMagic);
    write_be32(out, kCacheVersion);
    write_be32(out, static_cast<std::uint32_t>(ds.height()));
    write_be32(out, static_cast<std::uint32_t>(ds.width()));
    write_be32(out, static_cast<std::uint32_t>(ds.channels()));
    write_be32(out, static_cast<std::uint32_t>(ds.num_classes));
    write_be32(out, static_cast<std::uint32_t>(ds.size()));

    // uint8 encoding is lossless iff every pixel is k/255; check once.
    bool byte_exact = true;
    for (const Image& img : ds.images) {
        for (double v : img.pixels) {
            double scaled = v * 255.0;
            if (scaled != std::floor(scaled)) {
                byte_exact = false;
                break;
            }
        }
        if (!byte_exact) break;
    }
    out.put(byte_exact ? 1 : 0);

    for (int label : ds.labels) write_be32(out, static_cast<std::uint32_t>(label));
    for (const Image& img : ds.images) {
        if (byte_exact) {
            std::vector<unsigned char> buf(img.pixels.size());
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<unsigned char>(img.pixels[i] * 255.0);
            out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        } else {
            out.write(reinterpret_cast<const char*>(img.pixels.data()),
                      static_cast<std::streamsize>(img.pixels.size() * sizeof(double)));
        }
    }
    if (!out) throw IoError("write failed for " + path.string());
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    if (read_be32(in, path, "magic") != kCacheMagic) throw FormatError(path.string() + ": not a dataset cache file");
    std::uint32_t version = read_be32(in, path, "version");
    if (version != kCacheVersion)
        throw FormatError(path.string() + ": unsupported cache version " + std::to_string(version));
    int h = static_cast<int>(read_be32(in, path, "height"));
    int w = static_cast<int>(read_be32(in, path, "width"));
    int c = static_cast<int>(read_be32(in, path, "channels"));
    int num_classes = static_cast<int>(read_be32(in, path, "num_classes"));
    std::uint32_t n = read_be32(in, path, "count");
    int enc = in.get();
    if (enc != 0 && enc != 1) throw FormatError(path.string() + ": bad encoding byte");

    LabeledDataset ds;
    ds.num_classes = num_classes;
    ds.labels.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(read_be32(in, path, "label")));
    ds.images.reserve(n);
    const std::size_t npix = static_cast<std::size_t>(h) * w * c;
    for (std::uint32_t i = 0; i < n; ++i) {
        Image img;
        img.height = h;
        img.width = w;
        img.channels = c;
        img.pixels.resize(npix);
        if (enc == 1) {
            std::vector<unsigned char> buf(npix);
            if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(npix)))
                throw FormatError(path.string() + ": truncated pixels at image " + std::to_string(i));
            for (std::size_t p = 0; p < npix; ++p) img.pixels[p] = buf[p] / 255.0;
        } else {
            if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(npix * sizeof(double))))
                throw FormatError(path.string() + ": truncated pixels at image " + std::to_string(i));
        }
        ds.images.push_back(std::move(img));
    }
    ds.validate();
    return ds;
}

}  // namespace inflight
