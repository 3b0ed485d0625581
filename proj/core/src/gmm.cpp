#include "inflight/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "inflight/errors.hpp"
#include "inflight/rng.hpp"

namespace inflight {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

double log_gaussian(std::span<const double> z, const std::vector<double>& mean, const std::vector<double>& variance) {
    double acc = 0.0;
    for (std::size_t d = 0; d < mean.size(); ++d) {
        const double diff = z[d] - mean[d];
        acc += kLog2Pi + std::log(variance[d]) + diff * diff / variance[d];
    }
    return -0.5 * acc;
}

double logsumexp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

double sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double diff = a[d] - b[d];
        s += diff * diff;
    }
    return s;
}

// k-means++-style seeding: first center uniform, the rest weighted by squared
// distance to the nearest center already chosen.
std::vector<std::size_t> seed_centers(const std::vector<std::vector<double>>& zs, int k, std::mt19937_64& g) {
    const std::size_t n = zs.size();
    std::vector<std::size_t> centers;
    centers.reserve(static_cast<std::size_t>(k));
    centers.push_back(static_cast<std::size_t>(uniform_below(g, n)));

    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_distance(zs[i], zs[centers[0]]);

    while (centers.size() < static_cast<std::size_t>(k)) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t pick = n;
        if (total > 0.0) {
            const double r = uniform_real(g) * total;
            double run = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                run += d2[i];
                if (r < run) {
                    pick = i;
                    break;
                }
            }
            if (pick == n) pick = n - 1;  // numeric edge: r == total
        } else {
            // Remaining points coincide with chosen centers; take the first
            // index not used yet so EM still starts with k distinct slots.
            for (std::size_t i = 0; i < n; ++i)
                if (std::find(centers.begin(), centers.end(), i) == centers.end()) {
                    pick = i;
                    break;
                }
            if (pick == n) pick = 0;
        }
        centers.push_back(pick);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_distance(zs[i], zs[pick]));
    }
    return centers;
}

struct EmResult {
    ClassDensityModel model;
    std::vector<double> trace;
    bool ok = false;
};

EmResult run_em(const std::vector<std::vector<double>>& zs, int k, const GmmFitConfig& cfg, std::uint64_t seed) {
    const std::size_t n = zs.size();
    const std::size_t dim = zs.front().size();

    std::mt19937_64 g(seed);
    const auto centers = seed_centers(zs, k, g);

    // Pooled per-dimension variance as the initial spread for every component.
    std::vector<double> pooled_mean(dim, 0.0), pooled_var(dim, 0.0);
    for (const auto& z : zs)
        for (std::size_t d = 0; d < dim; ++d) pooled_mean[d] += z[d];
    for (double& m : pooled_mean) m /= static_cast<double>(n);
    for (const auto& z : zs)
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = z[d] - pooled_mean[d];
            pooled_var[d] += diff * diff;
        }
    for (double& v : pooled_var) v = std::max(v / static_cast<double>(n), cfg.variance_floor);

    EmResult res;
    res.model.components.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        auto& comp = res.model.components[static_cast<std::size_t>(j)];
        comp.weight = 1.0 / k;
        comp.mean = zs[centers[static_cast<std::size_t>(j)]];
        comp.variance = pooled_var;
    }

    std::vector<std::vector<double>> resp(n, std::vector<double>(static_cast<std::size_t>(k)));
    std::vector<double> logp(static_cast<std::size_t>(k));
    double prev_ll = -std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        // E step (log domain) and total log-likelihood of current parameters.
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) {
                const auto& comp = res.model.components[static_cast<std::size_t>(j)];
                logp[static_cast<std::size_t>(j)] = std::log(comp.weight) + log_gaussian(zs[i], comp.mean, comp.variance);
            }
            const double lse = logsumexp(logp);
            ll += lse;
            for (int j = 0; j < k; ++j) resp[i][static_cast<std::size_t>(j)] = std::exp(logp[static_cast<std::size_t>(j)] - lse);
        }
        res.trace.push_back(ll);
        res.model.fitted_log_likelihood = ll;
        if (ll - prev_ll < cfg.tolerance && iter > 0) break;
        prev_ll = ll;

        // M step; an emptied component would make the update ill-defined, so
        // keep the last consistent iterate instead (trace stays monotone).
        bool empty_component = false;
        std::vector<double> nk(static_cast<std::size_t>(k), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) nk[static_cast<std::size_t>(j)] += resp[i][static_cast<std::size_t>(j)];
        for (double v : nk)
            if (v < 1e-12) empty_component = true;
        if (empty_component) break;

        for (int j = 0; j < k; ++j) {
            auto& comp = res.model.components[static_cast<std::size_t>(j)];
            const double denom = nk[static_cast<std::size_t>(j)];
            comp.weight = denom / static_cast<double>(n);
            std::fill(comp.mean.begin(), comp.mean.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t d = 0; d < dim; ++d) comp.mean[d] += resp[i][static_cast<std::size_t>(j)] * zs[i][d];
            for (double& m : comp.mean) m /= denom;
            std::fill(comp.variance.begin(), comp.variance.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t d = 0; d < dim; ++d) {
                    const double diff = zs[i][d] - comp.mean[d];
                    comp.variance[d] += resp[i][static_cast<std::size_t>(j)] * diff * diff;
                }
            for (double& v : comp.variance) v = std::max(v / denom, cfg.variance_floor);
        }
    }
    res.ok = true;
    return res;
}

double bic(const ClassDensityModel& m, std::size_t n) {
    const auto k = static_cast<double>(m.num_components());
    const auto d = static_cast<double>(m.dimension());
    const double params = (k - 1.0) + 2.0 * k * d;  // weights + means + variances
    return params * std::log(static_cast<double>(n)) - 2.0 * m.fitted_log_likelihood;
}

}  // namespace

ClassDensityModel fit_class_density(const std::vector<std::vector<double>>& features, const GmmFitConfig& cfg,
                                    std::vector<GmmFitTrace>* traces) {
    if (features.size() < 2) throw InterfaceError("density fit needs at least 2 feature vectors");
    const std::size_t dim = features.front().size();
    if (dim == 0) throw InterfaceError("density fit needs non-empty feature vectors");
    for (const auto& z : features)
        if (z.size() != dim) throw InterfaceError("feature vectors disagree on dimension");
    if (cfg.k_candidates.empty()) throw ConfigError("k_candidates must be nonempty");
    for (int k : cfg.k_candidates)
        if (k < 1) throw ConfigError("component counts must be >= 1");
    if (!(cfg.variance_floor > 0.0)) throw ConfigError("variance_floor must be positive");

    // Count distinct points; candidates larger than that are unfittable.
    std::vector<std::vector<double>> sorted = features;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    const std::size_t distinct = sorted.size();

    if (distinct == 1) {
        ClassDensityModel m;
        m.degenerate = true;
        m.components.resize(1);
        m.components[0].weight = 1.0;
        m.components[0].mean = features.front();
        m.components[0].variance.assign(dim, cfg.variance_floor);
        m.fitted_log_likelihood =
            static_cast<double>(features.size()) * log_gaussian(features.front(), m.components[0].mean, m.components[0].variance);
        return m;
    }

    std::vector<int> usable;
    for (int k : cfg.k_candidates)
        if (static_cast<std::size_t>(k) <= distinct) usable.push_back(k);
    if (usable.empty()) usable.push_back(1);  // K=1 is always well-posed

    ClassDensityModel best;
    double best_bic = std::numeric_limits<double>::infinity();
    for (int k : usable) {
        EmResult r = run_em(features, k, cfg, derive_seed(cfg.seed, "gmm_k" + std::to_string(k)));
        const double b = bic(r.model, features.size());
        if (traces) {
            GmmFitTrace t;
            t.k = k;
            t.bic = b;
            t.log_likelihood = std::move(r.trace);
            traces->push_back(std::move(t));
        }
        if (b < best_bic) {
            best_bic = b;
            best = std::move(r.model);
        }
    }
    return best;
}

double log_likelihood(const ClassDensityModel& dm, std::span<const double> z) {
    if (dm.components.empty()) throw InterfaceError("density model has no components");
    if (z.size() != dm.dimension())
        throw InterfaceError("feature dimension " + std::to_string(z.size()) + " does not match density model dimension " +
                             std::to_string(dm.dimension()));
    std::vector<double> logp;
    logp.reserve(dm.components.size());
    for (const auto& comp : dm.components)
        logp.push_back(std::log(comp.weight) + log_gaussian(z, comp.mean, comp.variance));
    return logsumexp(logp);
}

}  // namespace inflight
