#pragma once

#include <cstdint>
#include <vector>

#include "inflight/image.hpp"
#include "inflight/pattern.hpp"

namespace inflight {

struct AttackSpec {
    int target_class = 0;
    std::vector<int> source_classes;  // nonempty, excludes target_class
    int per_source_poison_count = 0;
    BackdoorPattern pattern;
    std::uint64_t seed = 0;

    // Throws AttackError if the spec is inconsistent with the training set.
    void validate(const LabeledDataset& train) const;
};

struct PoisonResult {
    LabeledDataset poisoned;
    // Indices of the replaced samples. Evaluation bookkeeping only; the
    // defense path never sees these.
    std::vector<std::size_t> poison_indices;
};

// For each source class, replaces per_source_poison_count randomly chosen
// samples by their embedded version relabeled to the target class. All
// other samples are untouched and the dataset size is unchanged. A count
// of zero is the identity.
PoisonResult poison(const LabeledDataset& train, const AttackSpec& spec);

}  // namespace inflight
