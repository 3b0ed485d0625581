#pragma once

#include <span>
#include <vector>

#include "inflight/detector.hpp"
#include "inflight/image.hpp"
#include "inflight/net.hpp"
#include "inflight/pattern.hpp"

namespace inflight {

// Fraction of clean test images predicted correctly.
double compute_acc(const Model& model, const LabeledDataset& clean_test);

// Fraction of source-class test images classified to the target class once
// the pattern is embedded. source_test must exclude the target class.
double compute_asr(const Model& model, const BackdoorPattern& pattern, int target_class,
                   const LabeledDataset& source_test);

struct DetectionMetrics {
    double tpr = 0.0;  // reject rate on the triggered pool
    double fpr = 0.0;  // reject rate on the clean pool
    double sia = 0.0;  // rejected AND source-correct, over the triggered pool
    std::size_t triggered_total = 0;
    std::size_t triggered_rejected = 0;
    std::size_t triggered_source_correct = 0;
    std::size_t clean_total = 0;
    std::size_t clean_rejected = 0;
};

// true_sources[i] is the ground-truth class of triggered[i] (from poison
// bookkeeping). Both pools must be nonempty.
DetectionMetrics compute_detection_metrics(std::span<const Verdict> triggered, std::span<const Verdict> clean,
                                           std::span<const int> true_sources);

}  // namespace inflight
