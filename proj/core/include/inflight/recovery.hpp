#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "inflight/image.hpp"
#include "inflight/net.hpp"
#include "inflight/pattern.hpp"

namespace inflight {

// Gradient-based estimation of the backdoor pattern for a known target
// class, standing in for a post-training reverse-engineering defense.
struct RecoveryConfig {
    enum class Mode { additive, patch };
    Mode mode = Mode::additive;
    int max_iterations = 200;
    double step_size = 1.0;          // initial step; geometric backoff on objective increase
    double lambda = 1e-3;            // L2 weight (additive) / L1 mask weight (patch)
    double success_threshold = 0.9;  // pi: required flip fraction on the defense images
    double mask_init = 0.5;          // patch mode initial mask value
    double pattern_init = 0.5;       // patch mode initial pattern value
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

struct RecoveryTracePoint {
    int iteration = 0;
    double objective = 0.0;      // mean cross-entropy + regularizer
    double flip_fraction = 0.0;  // fraction of defense images predicted to t
    double mask_l1 = 0.0;        // patch mode only
};

struct RecoveryResult {
    BackdoorPattern pattern;
    double flip_fraction = 0.0;
    int mask_support = 0;  // patch mode: pixels with binarized mask = 1
    std::vector<RecoveryTracePoint> trace;
};

// Raised when the flip fraction is still below the success threshold at the
// iteration cap; carries the best pattern found and its flip rate.
struct RecoveryFailure : std::runtime_error {
    RecoveryResult best;
    RecoveryFailure(const std::string& what, RecoveryResult best_)
        : std::runtime_error(what), best(std::move(best_)) {}
};

// Projected gradient descent on a universal additive perturbation v:
// minimize mean CE(f(clip(x+v)), t) + lambda*||v||_2^2 with v in [-1,1].
RecoveryResult estimate_additive(const Model& model, int target_class, const LabeledDataset& defense_nontarget,
                                 const RecoveryConfig& cfg);

// Joint relaxed mask/pattern optimization: minimize mean CE over
// m.*p + (1-m).*x plus lambda*||m||_1, both projected to [0,1]; the final
// mask is binarized at 0.5.
RecoveryResult estimate_patch(const Model& model, int target_class, const LabeledDataset& defense_nontarget,
                              const RecoveryConfig& cfg);

// Fraction of eval images classified to the target class once the pattern
// is embedded. eval_set must exclude the target class.
double pattern_asr(const Model& model, const BackdoorPattern& pattern, int target_class,
                   const LabeledDataset& eval_set);

}  // namespace inflight
