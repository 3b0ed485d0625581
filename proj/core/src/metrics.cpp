#include "inflight/metrics.hpp"

#include <string>

#include "inflight/errors.hpp"
#include "inflight/recovery.hpp"

namespace inflight {

double compute_acc(const Model& model, const LabeledDataset& clean_test) {
    if (clean_test.size() == 0) throw MetricError("accuracy needs a nonempty test set");
    clean_test.validate();
    const std::vector<int> preds = model.predict_batch(clean_test.images);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == clean_test.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double compute_asr(const Model& model, const BackdoorPattern& pattern, int target_class,
                   const LabeledDataset& source_test) {
    return pattern_asr(model, pattern, target_class, source_test);
}

DetectionMetrics compute_detection_metrics(std::span<const Verdict> triggered, std::span<const Verdict> clean,
                                           std::span<const int> true_sources) {
    if (triggered.empty()) throw MetricError("detection metrics need a nonempty triggered pool");
    if (clean.empty()) throw MetricError("detection metrics need a nonempty clean pool");
    if (true_sources.size() != triggered.size())
        throw MetricError("true source list length " + std::to_string(true_sources.size()) +
                          " does not match triggered pool size " + std::to_string(triggered.size()));

    DetectionMetrics m;
    m.triggered_total = triggered.size();
    m.clean_total = clean.size();
    for (std::size_t i = 0; i < triggered.size(); ++i) {
        if (triggered[i].reject) {
            ++m.triggered_rejected;
            if (triggered[i].inferred_source == true_sources[i]) ++m.triggered_source_correct;
        }
    }
    for (const Verdict& v : clean)
        if (v.reject) ++m.clean_rejected;

    m.tpr = static_cast<double>(m.triggered_rejected) / static_cast<double>(m.triggered_total);
    m.fpr = static_cast<double>(m.clean_rejected) / static_cast<double>(m.clean_total);
    m.sia = static_cast<double>(m.triggered_source_correct) / static_cast<double>(m.triggered_total);
    return m;
}

}  // namespace inflight
