#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "inflight/gmm.hpp"
#include "inflight/image.hpp"
#include "inflight/net.hpp"
#include "inflight/pattern.hpp"

namespace inflight {

// Deep-layer feature collections used to fit the class-conditional density
// models: trigger-embedded features for every non-target class, clean
// features for the target class, standardized over the pooled bank.
struct FeatureBank {
    std::string tap;
    int target_class = -1;
    std::vector<std::vector<std::vector<double>>> per_class;  // [class][sample][dim], standardized
    std::vector<double> mean;    // pre-standardization pooled statistics
    std::vector<double> stddev;  // per-dimension; zero-variance dims get the floor divisor
    std::size_t dimension() const { return mean.size(); }
};

struct DetectorConfig {
    std::string tap = "penultimate";
    std::vector<int> k_candidates{1, 2, 3, 4, 5};
    double variance_floor = 1e-4;
    int min_samples = 2;  // per-class lower bound for density fitting
    std::uint64_t seed = 0;
};

// Immutable detector state: standardization statistics plus one fitted
// density model per class. Built offline; infer() is safe for unlimited
// concurrent callers.
struct Detector {
    std::string tap;
    int target_class = -1;
    std::vector<double> feature_mean;
    std::vector<double> feature_stddev;
    std::vector<ClassDensityModel> class_models;  // index = class

    int num_classes() const { return static_cast<int>(class_models.size()); }
};

struct Verdict {
    bool reject = false;
    int inferred_source = -1;  // = argmax class when rejecting, = target when accepting
    int predicted_class = -1;  // always the target class on entry
    std::vector<double> log_likelihoods;  // log L_c for every class
};

FeatureBank build_feature_bank(const Model& model, const LabeledDataset& defense, const BackdoorPattern& delta_hat,
                               int target_class, std::string_view tap, int min_samples = 2);

Detector build_detector(const Model& model, const LabeledDataset& defense, const BackdoorPattern& delta_hat,
                        int target_class, const DetectorConfig& cfg);

Detector fit_detector(const FeatureBank& bank, const DetectorConfig& cfg);

// Caller contract: model.predict(w) == detector.target_class; violations
// throw InterfaceError. Ties in the likelihood argmax break toward the
// target class, then toward the smallest class index.
Verdict infer(const Detector& det, const Model& model, const Image& w);

// One evaluated stream element: verdict for target-predicted images,
// pass-through otherwise.
struct StreamVerdict {
    std::size_t index = 0;
    int prediction = -1;
    std::optional<Verdict> verdict;  // empty = passed through
};

struct DetectorReport {
    std::vector<StreamVerdict> items;
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t passed_through = 0;
};

DetectorReport detector_report(const Detector& det, const Model& model, std::span<const Image> stream);

// Versioned JSON container for the detector state.
std::string detector_to_json(const Detector& det);
Detector detector_from_json(const std::string& text);
void save_detector(const std::filesystem::path& path, const Detector& det);
Detector load_detector(const std::filesystem::path& path);

}  // namespace inflight
