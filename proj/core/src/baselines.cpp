#include "inflight/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "inflight/errors.hpp"
#include "inflight/rng.hpp"

namespace inflight {

namespace {

double entropy_nats(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

}  // namespace

double strip_score(const Model& model, const Image& w, std::span<const Image> blend_pool, int n_blends, double alpha,
                   std::uint64_t seed) {
    if (blend_pool.empty()) throw BaselineError("blend pool is empty");
    if (n_blends < 1) throw BaselineError("n_blends must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw BaselineError("blend weight must lie in (0,1)");

    std::mt19937_64 g(seed);
    std::vector<Image> blends;
    blends.reserve(static_cast<std::size_t>(n_blends));
    for (int b = 0; b < n_blends; ++b) {
        const Image& x = blend_pool[static_cast<std::size_t>(uniform_below(g, blend_pool.size()))];
        if (!x.same_shape(w)) throw BaselineError("blend pool image shape does not match the test image");
        Image blend = w;
        for (std::size_t p = 0; p < blend.pixels.size(); ++p)
            blend.pixels[p] = std::clamp(alpha * w.pixels[p] + (1.0 - alpha) * x.pixels[p], 0.0, 1.0);
        blends.push_back(std::move(blend));
    }

    const auto posteriors = model.posteriors_batch(blends);
    double total = 0.0;
    for (const auto& p : posteriors) total += entropy_nats(p);
    return total / static_cast<double>(n_blends);
}

double b3d_score(const Model& model, const Image& w, const BackdoorPattern& delta_hat) {
    const std::vector<double> p_plain = model.posteriors(w);
    const std::vector<double> p_embedded = model.posteriors(embed(w, delta_hat));
    double d = 0.0;
    for (std::size_t c = 0; c < p_plain.size(); ++c) d += std::abs(p_plain[c] - p_embedded[c]);
    return d;
}

double nc_activation_score(const Model& model, const Image& w, std::span<const std::size_t> backdoor_neurons) {
    if (backdoor_neurons.empty()) throw BaselineError("backdoor neuron set is empty");
    const FeatureVector f = model.features(w, "penultimate");
    double total = 0.0;
    for (std::size_t idx : backdoor_neurons) {
        if (idx >= f.values.size())
            throw BaselineError("backdoor neuron index " + std::to_string(idx) + " outside penultimate width " +
                                std::to_string(f.values.size()));
        total += f.values[idx];
    }
    return total / static_cast<double>(backdoor_neurons.size());
}

std::vector<std::size_t> select_backdoor_neurons(const Model& model, const LabeledDataset& defense,
                                                 const BackdoorPattern& delta_hat, int target_class,
                                                 double top_fraction) {
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw BaselineError("top_fraction must lie in (0,1]");
    defense.validate();
    const std::size_t dim = model.tap_dimension("penultimate");

    std::vector<double> increase(dim, 0.0);
    std::size_t counted = 0;
    for (std::size_t i = 0; i < defense.size(); ++i) {
        if (defense.labels[i] == target_class) continue;
        const Image& x = defense.images[i];
        const FeatureVector clean = model.features(x, "penultimate");
        const FeatureVector embedded = model.features(embed(x, delta_hat), "penultimate");
        for (std::size_t d = 0; d < dim; ++d) increase[d] += embedded.values[d] - clean.values[d];
        ++counted;
    }
    if (counted == 0) throw BaselineError("defense set has no non-target images for neuron selection");

    std::vector<std::size_t> order(dim);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (increase[a] != increase[b]) return increase[a] > increase[b];
        return a < b;
    });
    std::size_t keep = std::max<std::size_t>(1, static_cast<std::size_t>(top_fraction * static_cast<double>(dim)));
    keep = std::min(keep, dim);
    order.resize(keep);
    std::sort(order.begin(), order.end());
    return order;
}

ScoreThreshold calibrate_threshold(std::span<const double> scores_clean, ScoreDirection direction, double target_fpr) {
    if (scores_clean.empty()) throw BaselineError("threshold calibration needs clean scores");
    if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw BaselineError("target FPR must lie in (0,1)");
    for (double s : scores_clean)
        if (!std::isfinite(s)) throw BaselineError("calibration scores must be finite");

    std::vector<double> sorted(scores_clean.begin(), scores_clean.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());

    ScoreThreshold out;
    out.direction = direction;
    out.target_fpr = target_fpr;
    out.calibration_size = sorted.size();

    // Candidate thresholds are the observed scores; between two observed
    // values the empirical FPR is constant, and beyond the extremes it can
    // only be 0 or 1. Pick the candidate whose FPR is the largest value
    // still <= target (that maximizes the flagged region).
    if (direction == ScoreDirection::trigger_if_below) {
        double best_value = sorted.front();
        double best_fpr = 0.0;
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            const double v = sorted[i];
            const auto below = static_cast<double>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
            const double fpr = below / n;
            if (fpr <= target_fpr && fpr >= best_fpr) {
                best_fpr = fpr;
                best_value = v;
            }
        }
        out.value = best_value;
        out.achieved_fpr = best_fpr;
    } else {
        // FPR is non-increasing in the threshold here, so the first (ascending)
        // candidate meeting the target is the most permissive admissible one.
        double best_value = sorted.back();
        double best_fpr = 0.0;
        for (double v : sorted) {
            const auto above = static_cast<double>(sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), v));
            const double fpr = above / n;
            if (fpr <= target_fpr) {
                best_value = v;
                best_fpr = fpr;
                break;
            }
        }
        out.value = best_value;
        out.achieved_fpr = best_fpr;
    }
    out.degenerate = out.achieved_fpr == 0.0;
    return out;
}

}  // namespace inflight
