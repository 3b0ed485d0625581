#include "inflight/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "inflight/errors.hpp"
#include "inflight/rng.hpp"

namespace inflight {

namespace {

std::vector<double> standardize(std::span<const double> raw, const std::vector<double>& mean,
                                const std::vector<double>& stddev) {
    std::vector<double> z(raw.size());
    for (std::size_t d = 0; d < raw.size(); ++d) z[d] = (raw[d] - mean[d]) / stddev[d];
    return z;
}

}  // namespace

FeatureBank build_feature_bank(const Model& model, const LabeledDataset& defense, const BackdoorPattern& delta_hat,
                               int target_class, std::string_view tap, int min_samples) {
    defense.validate();
    if (!model.valid()) throw BankError("feature bank needs a valid model");
    if (target_class < 0 || target_class >= defense.num_classes)
        throw BankError("target class " + std::to_string(target_class) + " outside defense set range");
    if (min_samples < 2) throw BankError("min_samples must be >= 2");
    const std::size_t dim = model.tap_dimension(tap);
    validate_pattern(delta_hat);

    FeatureBank bank;
    bank.tap = std::string(tap);
    bank.target_class = target_class;
    bank.per_class.resize(static_cast<std::size_t>(defense.num_classes));

    // Raw features: clean images for the target class, trigger-embedded
    // images for every other class.
    for (std::size_t i = 0; i < defense.size(); ++i) {
        const int c = defense.labels[i];
        const Image& x = defense.images[i];
        FeatureVector f =
            (c == target_class) ? model.features(x, tap) : model.features(embed(x, delta_hat), tap);
        bank.per_class[static_cast<std::size_t>(c)].push_back(std::move(f.values));
    }
    for (int c = 0; c < defense.num_classes; ++c)
        if (bank.per_class[static_cast<std::size_t>(c)].size() < static_cast<std::size_t>(min_samples))
            throw BankError("class " + std::to_string(c) + " has " +
                            std::to_string(bank.per_class[static_cast<std::size_t>(c)].size()) +
                            " defense features, need " + std::to_string(min_samples));

    // Pooled per-dimension standardization, statistics frozen for test time.
    std::size_t total = 0;
    bank.mean.assign(dim, 0.0);
    bank.stddev.assign(dim, 0.0);
    for (const auto& cls : bank.per_class)
        for (const auto& z : cls) {
            for (std::size_t d = 0; d < dim; ++d) bank.mean[d] += z[d];
            ++total;
        }
    for (double& m : bank.mean) m /= static_cast<double>(total);
    for (const auto& cls : bank.per_class)
        for (const auto& z : cls)
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = z[d] - bank.mean[d];
                bank.stddev[d] += diff * diff;
            }
    constexpr double kZeroVarianceDivisor = 1e-4;
    for (double& s : bank.stddev) {
        s = std::sqrt(s / static_cast<double>(total));
        if (s == 0.0) s = kZeroVarianceDivisor;
    }

    for (auto& cls : bank.per_class)
        for (auto& z : cls) z = standardize(z, bank.mean, bank.stddev);
    return bank;
}

Detector fit_detector(const FeatureBank& bank, const DetectorConfig& cfg) {
    if (bank.per_class.empty()) throw BankError("feature bank is empty");
    if (bank.dimension() == 0) throw BankError("feature bank has zero dimension");

    Detector det;
    det.tap = bank.tap;
    det.target_class = bank.target_class;
    det.feature_mean = bank.mean;
    det.feature_stddev = bank.stddev;
    det.class_models.resize(bank.per_class.size());

    GmmFitConfig fit_cfg;
    fit_cfg.k_candidates = cfg.k_candidates;
    fit_cfg.variance_floor = cfg.variance_floor;
    for (std::size_t c = 0; c < bank.per_class.size(); ++c) {
        if (bank.per_class[c].size() < static_cast<std::size_t>(cfg.min_samples))
            throw BankError("class " + std::to_string(c) + " has too few features for density fitting");
        fit_cfg.seed = derive_seed(cfg.seed, "density_class_" + std::to_string(c));
        det.class_models[c] = fit_class_density(bank.per_class[c], fit_cfg);
        det.class_models[c].class_index = static_cast<int>(c);
    }
    return det;
}

Detector build_detector(const Model& model, const LabeledDataset& defense, const BackdoorPattern& delta_hat,
                        int target_class, const DetectorConfig& cfg) {
    FeatureBank bank = build_feature_bank(model, defense, delta_hat, target_class, cfg.tap, cfg.min_samples);
    return fit_detector(bank, cfg);
}

Verdict infer(const Detector& det, const Model& model, const Image& w) {
    if (det.class_models.empty()) throw InterfaceError("detector has no class models");
    const int predicted = model.predict(w);
    if (predicted != det.target_class)
        throw InterfaceError("infer() requires a target-predicted image; prediction was " + std::to_string(predicted) +
                             ", target is " + std::to_string(det.target_class));

    FeatureVector f = model.features(w, det.tap);
    if (f.values.size() != det.feature_mean.size())
        throw InterfaceError("feature dimension does not match detector statistics");
    const std::vector<double> z = standardize(f.values, det.feature_mean, det.feature_stddev);

    Verdict v;
    v.predicted_class = predicted;
    v.log_likelihoods.reserve(det.class_models.size());
    for (const auto& dm : det.class_models) v.log_likelihoods.push_back(log_likelihood(dm, z));

    // argmax with ties toward the target class, then the smallest index.
    int best = det.target_class;
    for (int c = 0; c < det.num_classes(); ++c)
        if (v.log_likelihoods[static_cast<std::size_t>(c)] > v.log_likelihoods[static_cast<std::size_t>(best)] ||
            (v.log_likelihoods[static_cast<std::size_t>(c)] == v.log_likelihoods[static_cast<std::size_t>(best)] &&
             best != det.target_class && c < best))
            best = c;

    v.reject = (best != det.target_class);
    v.inferred_source = best;
    return v;
}

DetectorReport detector_report(const Detector& det, const Model& model, std::span<const Image> stream) {
    DetectorReport report;
    report.items.reserve(stream.size());
    const std::vector<int> predictions = model.predict_batch(stream);
    for (std::size_t i = 0; i < stream.size(); ++i) {
        StreamVerdict sv;
        sv.index = i;
        sv.prediction = predictions[i];
        if (predictions[i] == det.target_class) {
            sv.verdict = infer(det, model, stream[i]);
            if (sv.verdict->reject) {
                if (sv.verdict->inferred_source == det.target_class)
                    throw InterfaceError("verdict invariant violated: reject with target source");
                ++report.rejected;
            } else {
                ++report.accepted;
            }
        } else {
            ++report.passed_through;
        }
        report.items.push_back(std::move(sv));
    }
    return report;
}

std::string detector_to_json(const Detector& det) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["tap"] = det.tap;
    j["target_class"] = det.target_class;
    j["feature_mean"] = det.feature_mean;
    j["feature_stddev"] = det.feature_stddev;
    nlohmann::json models = nlohmann::json::array();
    for (const auto& dm : det.class_models) {
        nlohmann::json jm;
        jm["class_index"] = dm.class_index;
        jm["fitted_log_likelihood"] = dm.fitted_log_likelihood;
        jm["degenerate"] = dm.degenerate;
        nlohmann::json comps = nlohmann::json::array();
        for (const auto& comp : dm.components) {
            nlohmann::json jc;
            jc["weight"] = comp.weight;
            jc["mean"] = comp.mean;
            jc["variance"] = comp.variance;
            comps.push_back(std::move(jc));
        }
        jm["components"] = std::move(comps);
        models.push_back(std::move(jm));
    }
    j["class_models"] = std::move(models);
    return j.dump(2);
}

Detector detector_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("detector JSON parse failed: ") + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != 1) throw FormatError("unsupported detector schema_version");
        Detector det;
        det.tap = j.at("tap").get<std::string>();
        det.target_class = j.at("target_class").get<int>();
        det.feature_mean = j.at("feature_mean").get<std::vector<double>>();
        det.feature_stddev = j.at("feature_stddev").get<std::vector<double>>();
        for (const auto& jm : j.at("class_models")) {
            ClassDensityModel dm;
            dm.class_index = jm.at("class_index").get<int>();
            dm.fitted_log_likelihood = jm.at("fitted_log_likelihood").get<double>();
            dm.degenerate = jm.at("degenerate").get<bool>();
            for (const auto& jc : jm.at("components")) {
                ClassDensityModel::Component comp;
                comp.weight = jc.at("weight").get<double>();
                comp.mean = jc.at("mean").get<std::vector<double>>();
                comp.variance = jc.at("variance").get<std::vector<double>>();
                dm.components.push_back(std::move(comp));
            }
            det.class_models.push_back(std::move(dm));
        }
        return det;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("detector JSON missing or mistyped field: ") + e.what());
    }
}

void save_detector(const std::filesystem::path& path, const Detector& det) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << detector_to_json(det) << "\n";
    if (!out) throw IoError("write failed for " + path.string());
}

Detector load_detector(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return detector_from_json(ss.str());
}

}  // namespace inflight
