#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace inflight {

// Per-class Gaussian mixture with diagonal covariances.
struct ClassDensityModel {
    struct Component {
        double weight = 0.0;
        std::vector<double> mean;
        std::vector<double> variance;  // every entry >= variance floor
    };

    int class_index = -1;
    std::vector<Component> components;
    double fitted_log_likelihood = 0.0;  // total over the training features
    bool degenerate = false;             // all-identical input collapse

    int num_components() const { return static_cast<int>(components.size()); }
    std::size_t dimension() const { return components.empty() ? 0 : components.front().mean.size(); }
};

struct GmmFitConfig {
    std::vector<int> k_candidates{1, 2, 3, 4, 5};
    double variance_floor = 1e-4;
    double tolerance = 1e-6;  // stop when total log-likelihood improves less
    int max_iterations = 500;
    std::uint64_t seed = 0;
};

// Per-candidate-K EM trace: total log-likelihood after every iteration.
struct GmmFitTrace {
    int k = 0;
    double bic = 0.0;
    std::vector<double> log_likelihood;
};

// Fits one mixture per candidate K (EM, k-means++-style seeded init) and
// returns the BIC-selected one. Candidates exceeding the number of distinct
// points are skipped; all-identical input yields a flagged K=1 model with
// floored variance.
ClassDensityModel fit_class_density(const std::vector<std::vector<double>>& features, const GmmFitConfig& cfg,
                                    std::vector<GmmFitTrace>* traces = nullptr);

// log( sum_k w_k N(z; mu_k, diag(var_k)) ) via log-sum-exp.
double log_likelihood(const ClassDensityModel& dm, std::span<const double> z);

}  // namespace inflight
