#pragma once

#include <cstdint>
#include <filesystem>

#include "inflight/image.hpp"

namespace inflight {

// Reads an IDX image/label file pair (the MNIST distribution format:
// big-endian headers, magic 0x00000803 / 0x00000801, uint8 payload).
// Bytes are scaled to [0,1] by division by 255; images are single-channel.
LabeledDataset load_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path);

// The fixed generative template for class c (class-mean image before noise).
Image synthetic_template(int c, int h, int w, int channels);

// Class templates plus uniform noise of amplitude 0.1, clipped to [0,1].
// Trivially separable by the nearest-template rule; deterministic given seed.
LabeledDataset generate_synthetic(int num_classes, int per_class, int h, int w, int channels, std::uint64_t seed);

struct SplitResult {
    LabeledDataset defense;
    LabeledDataset test;
    std::vector<std::size_t> defense_indices;  // into the input dataset
    std::vector<std::size_t> test_indices;
};

// Draws spec.per_class_defense samples per class (seeded, without
// replacement); the rest becomes the evaluation partition. The two index
// sets are a disjoint, exhaustive partition of the input.
SplitResult split_defense_test(const LabeledDataset& dataset, const SplitSpec& spec);

// Dataset cache container used by the `ingest` subcommand. Byte-sourced
// datasets are stored losslessly as uint8; others as raw doubles.
void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace inflight
