#include "inflight/recovery.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "inflight/errors.hpp"

namespace inflight {

namespace {

constexpr double kMinStep = 1e-12;
constexpr double kAcceptSlack = 1e-12;

void check_defense_pool(const LabeledDataset& defense, int target_class, const Model& model) {
    if (!model.valid()) throw InterfaceError("recovery needs a valid model");
    if (defense.size() == 0) throw InterfaceError("recovery needs a nonempty defense pool");
    defense.validate();
    for (int label : defense.labels)
        if (label == target_class)
            throw InterfaceError("defense pool for recovery must exclude the target class " +
                                 std::to_string(target_class));
}

double flip_fraction(const std::vector<int>& predictions, int target_class) {
    if (predictions.empty()) return 0.0;
    std::size_t hits = 0;
    for (int p : predictions)
        if (p == target_class) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::vector<Image> embed_all(const LabeledDataset& defense, const BackdoorPattern& pattern) {
    std::vector<Image> out;
    out.reserve(defense.size());
    for (const Image& x : defense.images) out.push_back(embed(x, pattern));
    return out;
}

}  // namespace

void RecoveryConfig::validate() const {
    if (max_iterations < 1) throw ConfigError("recovery max_iterations must be >= 1");
    if (!(step_size > 0.0)) throw ConfigError("recovery step_size must be positive");
    if (lambda < 0.0) throw ConfigError("recovery lambda must be >= 0");
    if (!(success_threshold > 0.0 && success_threshold <= 1.0))
        throw ConfigError("recovery success_threshold must lie in (0,1]");
    if (mask_init < 0.0 || mask_init > 1.0) throw ConfigError("recovery mask_init must lie in [0,1]");
    if (pattern_init < 0.0 || pattern_init > 1.0) throw ConfigError("recovery pattern_init must lie in [0,1]");
}

RecoveryResult estimate_additive(const Model& model, int target_class, const LabeledDataset& defense_nontarget,
                                 const RecoveryConfig& cfg) {
    cfg.validate();
    check_defense_pool(defense_nontarget, target_class, model);
    const LossSpec loss{target_class};
    const int h = defense_nontarget.height(), w = defense_nontarget.width(), c = defense_nontarget.channels();
    const std::size_t n = defense_nontarget.size();

    RealGrid v = RealGrid::zeros(h, w, c);
    auto v_norm_sq = [](const RealGrid& g) {
        double s = 0.0;
        for (double x : g.values) s += x * x;
        return s;
    };
    auto pattern_of = [](const RealGrid& g) { return BackdoorPattern(AdditivePattern{g}); };

    auto eval = model.batch_eval(embed_all(defense_nontarget, pattern_of(v)), loss);
    double objective = eval.mean_loss + cfg.lambda * v_norm_sq(v);
    double flip = flip_fraction(eval.predictions, target_class);

    RecoveryResult result;
    result.pattern = pattern_of(v);
    result.flip_fraction = flip;
    double best_flip = flip;
    double step = cfg.step_size;

    auto record = [&](int iter) { result.trace.push_back({iter, objective, flip, 0.0}); };

    bool reached = flip >= cfg.success_threshold;
    int iter = 0;
    for (; iter < cfg.max_iterations && !reached; ++iter) {
        record(iter);

        const auto glg = model.input_loss_gradients(embed_all(defense_nontarget, pattern_of(v)), loss);
        // d/dv of mean CE over clip(x+v): sum per-image input gradients,
        // zeroed where the clip saturates; plus the L2 term.
        RealGrid grad = RealGrid::zeros(h, w, c);
        for (std::size_t i = 0; i < n; ++i) {
            const Image& x = defense_nontarget.images[i];
            for (std::size_t p = 0; p < grad.values.size(); ++p) {
                const double pre = x.pixels[p] + v.values[p];
                if (pre >= 0.0 && pre <= 1.0) grad.values[p] += glg.gradients[i].values[p];
            }
        }
        for (std::size_t p = 0; p < grad.values.size(); ++p)
            grad.values[p] = grad.values[p] / static_cast<double>(n) + 2.0 * cfg.lambda * v.values[p];

        bool accepted = false;
        while (step >= kMinStep) {
            RealGrid v_try = v;
            for (std::size_t p = 0; p < v_try.values.size(); ++p)
                v_try.values[p] = std::clamp(v_try.values[p] - step * grad.values[p], -1.0, 1.0);
            auto ev = model.batch_eval(embed_all(defense_nontarget, pattern_of(v_try)), loss);
            const double obj_try = ev.mean_loss + cfg.lambda * v_norm_sq(v_try);
            if (obj_try <= objective + kAcceptSlack) {
                v = std::move(v_try);
                objective = obj_try;
                flip = flip_fraction(ev.predictions, target_class);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no descent direction at any step size

        if (flip >= best_flip) {
            best_flip = flip;
            result.pattern = pattern_of(v);
            result.flip_fraction = flip;
        }
        reached = flip >= cfg.success_threshold;
    }
    record(iter);

    if (result.flip_fraction < cfg.success_threshold)
        throw RecoveryFailure("additive recovery reached flip fraction " + std::to_string(result.flip_fraction) +
                                  " after " + std::to_string(iter) + " iterations, below the required " +
                                  std::to_string(cfg.success_threshold),
                              std::move(result));
    return result;
}

RecoveryResult estimate_patch(const Model& model, int target_class, const LabeledDataset& defense_nontarget,
                              const RecoveryConfig& cfg) {
    cfg.validate();
    check_defense_pool(defense_nontarget, target_class, model);
    const LossSpec loss{target_class};
    const int h = defense_nontarget.height(), w = defense_nontarget.width(), c = defense_nontarget.channels();
    const std::size_t n = defense_nontarget.size();
    const std::size_t npix = static_cast<std::size_t>(h) * w * c;

    // Relaxed mask and pattern, both in [0,1].
    std::vector<double> mask(npix, cfg.mask_init);
    std::vector<double> pat(npix, cfg.pattern_init);

    auto blend_all = [&](const std::vector<double>& m, const std::vector<double>& p) {
        std::vector<Image> out;
        out.reserve(n);
        for (const Image& x : defense_nontarget.images) {
            Image e = x;
            for (std::size_t q = 0; q < npix; ++q) e.pixels[q] = m[q] * p[q] + (1.0 - m[q]) * x.pixels[q];
            out.push_back(std::move(e));
        }
        return out;
    };
    auto l1 = [](const std::vector<double>& m) {
        double s = 0.0;
        for (double x : m) s += std::abs(x);
        return s;
    };
    auto binarized = [&](const std::vector<double>& m, const std::vector<double>& p) {
        PatchPattern out;
        out.mask = Image::zeros(h, w, c);
        out.pattern = Image::zeros(h, w, c);
        for (std::size_t q = 0; q < npix; ++q) {
            out.mask.pixels[q] = m[q] >= 0.5 ? 1.0 : 0.0;
            out.pattern.pixels[q] = p[q];
        }
        return out;
    };
    auto spatial_support = [&](const PatchPattern& pp) {
        int count = 0;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                bool on = false;
                for (int ch = 0; ch < c; ++ch) on = on || pp.mask.at(i, j, ch) == 1.0;
                if (on) ++count;
            }
        return count;
    };
    auto binarized_flip = [&](const PatchPattern& pp) {
        auto ev = model.batch_eval(embed_all(defense_nontarget, BackdoorPattern(pp)), loss);
        return flip_fraction(ev.predictions, target_class);
    };

    auto eval = model.batch_eval(blend_all(mask, pat), loss);
    double objective = eval.mean_loss + cfg.lambda * l1(mask);
    double relaxed_flip = flip_fraction(eval.predictions, target_class);

    RecoveryResult result;
    {
        PatchPattern pp = binarized(mask, pat);
        result.flip_fraction = binarized_flip(pp);
        result.mask_support = spatial_support(pp);
        result.pattern = std::move(pp);
    }
    double best_flip = result.flip_fraction;
    double step = cfg.step_size;

    auto record = [&](int iter) { result.trace.push_back({iter, objective, relaxed_flip, l1(mask)}); };

    // Success needs the binarized pattern to flip too, not just the relaxed
    // blend; otherwise a fat fractional mask can fake success at iteration 0.
    bool reached = relaxed_flip >= cfg.success_threshold && result.flip_fraction >= cfg.success_threshold;
    int iter = 0;
    for (; iter < cfg.max_iterations && !reached; ++iter) {
        record(iter);

        const auto glg = model.input_loss_gradients(blend_all(mask, pat), loss);
        std::vector<double> gmask(npix, 0.0), gpat(npix, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const Image& x = defense_nontarget.images[i];
            const auto& gi = glg.gradients[i].values;
            for (std::size_t q = 0; q < npix; ++q) {
                gmask[q] += gi[q] * (pat[q] - x.pixels[q]);
                gpat[q] += gi[q] * mask[q];
            }
        }
        for (std::size_t q = 0; q < npix; ++q) {
            gmask[q] = gmask[q] / static_cast<double>(n) + cfg.lambda;  // d||m||_1 = 1 on m >= 0
            gpat[q] /= static_cast<double>(n);
        }

        bool accepted = false;
        while (step >= kMinStep) {
            std::vector<double> mask_try(npix), pat_try(npix);
            for (std::size_t q = 0; q < npix; ++q) {
                mask_try[q] = std::clamp(mask[q] - step * gmask[q], 0.0, 1.0);
                pat_try[q] = std::clamp(pat[q] - step * gpat[q], 0.0, 1.0);
            }
            auto ev = model.batch_eval(blend_all(mask_try, pat_try), loss);
            const double obj_try = ev.mean_loss + cfg.lambda * l1(mask_try);
            if (obj_try <= objective + kAcceptSlack) {
                mask = std::move(mask_try);
                pat = std::move(pat_try);
                objective = obj_try;
                relaxed_flip = flip_fraction(ev.predictions, target_class);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;

        if (relaxed_flip >= cfg.success_threshold) {
            PatchPattern pp = binarized(mask, pat);
            const double bf = binarized_flip(pp);
            if (bf >= best_flip) {
                best_flip = bf;
                result.flip_fraction = bf;
                result.mask_support = spatial_support(pp);
                result.pattern = std::move(pp);
            }
            reached = bf >= cfg.success_threshold;
        }
    }
    record(iter);

    // Final iterate may beat the stored best even when nothing crossed the
    // threshold during the loop.
    {
        PatchPattern pp = binarized(mask, pat);
        const double bf = binarized_flip(pp);
        if (bf > result.flip_fraction) {
            result.flip_fraction = bf;
            result.mask_support = spatial_support(pp);
            result.pattern = std::move(pp);
        }
    }

    if (result.flip_fraction < cfg.success_threshold)
        throw RecoveryFailure("patch recovery reached flip fraction " + std::to_string(result.flip_fraction) +
                                  " after " + std::to_string(iter) + " iterations, below the required " +
                                  std::to_string(cfg.success_threshold),
                              std::move(result));
    return result;
}

double pattern_asr(const Model& model, const BackdoorPattern& pattern, int target_class,
                   const LabeledDataset& eval_set) {
    if (eval_set.size() == 0) throw MetricError("pattern success rate needs a nonempty evaluation set");
    eval_set.validate();
    for (int label : eval_set.labels)
        if (label == target_class)
            throw MetricError("pattern success evaluation set must exclude the target class " +
                              std::to_string(target_class));
    validate_pattern(pattern);

    std::vector<Image> embedded = embed_all(eval_set, pattern);
    const std::vector<int> preds = model.predict_batch(embedded);
    std::size_t hits = 0;
    for (int p : preds)
        if (p == target_class) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

}  // namespace inflight
