#include "inflight/attack.hpp"

#include <algorithm>
#include <set>
#include <string>

#include "inflight/errors.hpp"
#include "inflight/rng.hpp"

namespace inflight {

void AttackSpec::validate(const LabeledDataset& train) const {
    train.validate();
    if (target_class < 0 || target_class >= train.num_classes)
        throw AttackError("target class " + std::to_string(target_class) + " outside [0," +
                          std::to_string(train.num_classes - 1) + "]");
    if (source_classes.empty()) throw AttackError("attack needs at least one source class");
    std::set<int> seen;
    for (int s : source_classes) {
        if (s < 0 || s >= train.num_classes)
            throw AttackError("source class " + std::to_string(s) + " outside [0," +
                              std::to_string(train.num_classes - 1) + "]");
        if (s == target_class)
            throw AttackError("source class " + std::to_string(s) + " equals the target class");
        if (!seen.insert(s).second) throw AttackError("source class " + std::to_string(s) + " listed twice");
    }
    if (per_source_poison_count < 0) throw AttackError("per_source_poison_count must be >= 0");
    for (int s : source_classes) {
        auto members = train.class_indices(s);
        if (members.size() < static_cast<std::size_t>(per_source_poison_count))
            throw AttackError("source class " + std::to_string(s) + " has only " + std::to_string(members.size()) +
                              " samples, need " + std::to_string(per_source_poison_count));
    }
    validate_pattern(pattern);
    // Shape agreement with the training images.
    const Image& probe = train.images.front();
    embed(probe, pattern);
}

PoisonResult poison(const LabeledDataset& train, const AttackSpec& spec) {
    spec.validate(train);
    std::mt19937_64 g(derive_seed(spec.seed, "poison"));
    PoisonResult out;
    out.poisoned = train;
    for (int s : spec.source_classes) {
        auto members = train.class_indices(s);
        auto picks = sample_without_replacement(members.size(), static_cast<std::size_t>(spec.per_source_poison_count), g);
        for (std::size_t p : picks) {
            std::size_t idx = members[p];
            out.poisoned.images[idx] = embed(train.images[idx], spec.pattern);
            out.poisoned.labels[idx] = spec.target_class;
            out.poison_indices.push_back(idx);
        }
    }
    std::sort(out.poison_indices.begin(), out.poison_indices.end());
    out.poisoned.validate();
    return out;
}

}  // namespace inflight
