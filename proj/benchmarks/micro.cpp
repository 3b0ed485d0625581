// Microbenchmarks for the pipeline hot paths: network forward/backward
// passes, trigger embedding, density fitting, and the per-image detector
// and baseline scores. Build with -DINFLIGHT_BUILD_BENCHMARKS=ON and run
//   ./benchmarks/inflight_benchmarks [--benchmark_filter=...]

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "inflight/baselines.hpp"
#include "inflight/dataset.hpp"
#include "inflight/detector.hpp"
#include "inflight/gmm.hpp"
#include "inflight/net.hpp"
#include "inflight/pattern.hpp"
#include "inflight/rng.hpp"

namespace {

using namespace inflight;

// One shared substrate per process: a small synthetic task and a model
// trained on it, so every benchmark measures realistic tensors.
struct Substrate {
    LabeledDataset train = generate_synthetic(4, 100, 16, 16, 1, 1);
    LabeledDataset pool = generate_synthetic(4, 25, 16, 16, 1, 2);
    Model model;
    BackdoorPattern pattern = make_chessboard(16, 16, 1, 0.25);

    Substrate() {
        TrainConfig tc;
        tc.epochs = 3;
        tc.seed = 3;
        model = inflight::train(train, tc).model;
    }

    static const Substrate& get() {
        static const Substrate s;
        return s;
    }
};

void bm_forward_single(benchmark::State& state) {
    const auto& s = Substrate::get();
    const Image& x = s.pool.images[0];
    for (auto _ : state) benchmark::DoNotOptimize(s.model.posteriors(x));
}
BENCHMARK(bm_forward_single);

void bm_forward_batch32(benchmark::State& state) {
    const auto& s = Substrate::get();
    const std::vector<Image> batch(s.pool.images.begin(), s.pool.images.begin() + 25);
    for (auto _ : state) benchmark::DoNotOptimize(s.model.predict_batch(batch));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 25);
}
BENCHMARK(bm_forward_batch32);

void bm_input_gradient(benchmark::State& state) {
    const auto& s = Substrate::get();
    const LossSpec loss{0};
    for (auto _ : state) benchmark::DoNotOptimize(s.model.input_gradient(s.pool.images[0], loss));
}
BENCHMARK(bm_input_gradient);

void bm_feature_tap(benchmark::State& state) {
    const auto& s = Substrate::get();
    for (auto _ : state) benchmark::DoNotOptimize(s.model.features(s.pool.images[0], "penultimate"));
}
BENCHMARK(bm_feature_tap);

void bm_embed_chessboard(benchmark::State& state) {
    const auto& s = Substrate::get();
    for (auto _ : state) benchmark::DoNotOptimize(embed(s.pool.images[0], s.pattern));
}
BENCHMARK(bm_embed_chessboard);

void bm_gmm_fit(benchmark::State& state) {
    // 80 samples of an 84-dim feature bank column, the detector-fit shape
    std::mt19937_64 g(9);
    std::vector<std::vector<double>> feats(80, std::vector<double>(84));
    for (auto& z : feats)
        for (double& v : z) v = uniform_in(g, -1.0, 1.0);
    GmmFitConfig cfg;
    cfg.k_candidates = {1, 2, 3};
    std::uint64_t seed = 0;
    for (auto _ : state) {
        cfg.seed = seed++;
        benchmark::DoNotOptimize(fit_class_density(feats, cfg));
    }
}
BENCHMARK(bm_gmm_fit);

void bm_gmm_loglik(benchmark::State& state) {
    std::mt19937_64 g(11);
    std::vector<std::vector<double>> feats(60, std::vector<double>(84));
    for (auto& z : feats)
        for (double& v : z) v = uniform_in(g, -1.0, 1.0);
    GmmFitConfig cfg;
    const ClassDensityModel dm = fit_class_density(feats, cfg);
    for (auto _ : state) benchmark::DoNotOptimize(log_likelihood(dm, feats[0]));
}
BENCHMARK(bm_gmm_loglik);

void bm_detector_infer(benchmark::State& state) {
    const auto& s = Substrate::get();
    DetectorConfig cfg;
    cfg.k_candidates = {1, 2};
    const Detector det = build_detector(s.model, s.pool, s.pattern, 0, cfg);
    // find a target-predicted input to satisfy the infer contract
    const Image* w = nullptr;
    for (const auto& x : s.pool.images)
        if (s.model.predict(x) == 0) {
            w = &x;
            break;
        }
    if (w == nullptr) {
        state.SkipWithError("no target-predicted image in the pool");
        return;
    }
    for (auto _ : state) benchmark::DoNotOptimize(infer(det, s.model, *w));
}
BENCHMARK(bm_detector_infer);

void bm_strip_score(benchmark::State& state) {
    const auto& s = Substrate::get();
    std::uint64_t seed = 0;
    for (auto _ : state)
        benchmark::DoNotOptimize(strip_score(s.model, s.pool.images[0], s.train.images, 20, 0.5, seed++));
}
BENCHMARK(bm_strip_score);

void bm_b3d_score(benchmark::State& state) {
    const auto& s = Substrate::get();
    for (auto _ : state) benchmark::DoNotOptimize(b3d_score(s.model, s.pool.images[0], s.pattern));
}
BENCHMARK(bm_b3d_score);

}  // namespace

BENCHMARK_MAIN();
