#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "inflight/image.hpp"
#include "inflight/net.hpp"
#include "inflight/pattern.hpp"

namespace inflight {

enum class ScoreDirection { trigger_if_below, trigger_if_above };

struct ScoreThreshold {
    ScoreDirection direction = ScoreDirection::trigger_if_below;
    double value = 0.0;
    double target_fpr = 0.05;
    double achieved_fpr = 0.0;
    std::size_t calibration_size = 0;
    bool degenerate = false;  // no threshold attains an FPR in (0, target]

    bool flags(double score) const {
        return direction == ScoreDirection::trigger_if_below ? score < value : score > value;
    }
};

// Mean Shannon entropy (natural log) of the model posteriors over n_blends
// seeded blends alpha*w + (1-alpha)*x_pool, pixel-clipped to [0,1].
// Low entropy indicates a backdoor-trigger input.
double strip_score(const Model& model, const Image& w, std::span<const Image> blend_pool, int n_blends, double alpha,
                   std::uint64_t seed);

// L1 distance between posteriors with and without the estimated pattern
// embedded; small distance indicates a trigger.
double b3d_score(const Model& model, const Image& w, const BackdoorPattern& delta_hat);

// Mean penultimate activation over the given neurons; high indicates a
// trigger.
double nc_activation_score(const Model& model, const Image& w, std::span<const std::size_t> backdoor_neurons);

// Ranks penultimate neurons by mean activation increase between
// delta_hat-embedded and clean non-target defense images; returns the top
// fraction (at least one neuron), deterministic.
std::vector<std::size_t> select_backdoor_neurons(const Model& model, const LabeledDataset& defense,
                                                 const BackdoorPattern& delta_hat, int target_class,
                                                 double top_fraction);

// Threshold = empirical quantile of the clean scores with FPR <= target and
// closest achievable to it. All-identical scores yield the degenerate flag
// (achieved FPR 0).
ScoreThreshold calibrate_threshold(std::span<const double> scores_clean, ScoreDirection direction, double target_fpr);

}  // namespace inflight
