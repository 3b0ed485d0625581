#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "inflight/image.hpp"

namespace inflight {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double learning_rate = 0.05;
    double lr_decay_factor = 0.5;  // applied every lr_decay_period epochs
    int lr_decay_period = 8;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

// Scalar loss used for input gradients: cross-entropy of the softmax output
// against target_class.
struct LossSpec {
    int target_class = 0;
};

struct FeatureVector {
    std::vector<double> values;
    std::string tap;
    std::size_t dimension() const { return values.size(); }
};

struct ModelParams;

// Compact convolutional classifier, LeNet-5-like:
//   conv 5x5x6 - tanh - avgpool2 - conv 5x5x16 - tanh - avgpool2 -
//   fc 120 - tanh - fc 84 - tanh - fc C
// Internal-layer taps: "penultimate" (the 84-wide hidden layer) and
// "conv_1"/"conv_2" (k-th conv activation from the last, reduced to its
// channel count by per-channel global average pooling).
//
// Immutable once constructed; safe to share across concurrent readers.
class Model {
  public:
    Model() = default;

    // Fresh network with seeded uniform fan-in initialization.
    static Model init(int height, int width, int channels, int num_classes, std::uint64_t seed);

    bool valid() const { return params_ != nullptr; }
    int input_height() const;
    int input_width() const;
    int input_channels() const;
    int num_classes() const;
    std::vector<std::string> taps() const;
    std::size_t tap_dimension(std::string_view tap) const;

    std::vector<double> logits(const Image& x) const;
    std::vector<double> posteriors(const Image& x) const;  // stable softmax
    int predict(const Image& x) const;                     // argmax, ties to smallest index
    std::vector<int> predict_batch(std::span<const Image> xs) const;
    std::vector<std::vector<double>> posteriors_batch(std::span<const Image> xs) const;

    FeatureVector features(const Image& x, std::string_view tap) const;

    // d(loss)/d(input) by reverse-mode differentiation.
    RealGrid input_gradient(const Image& x, const LossSpec& loss) const;

    // Batched mean loss + per-image input gradients (recovery hot path).
    struct BatchLossGrad {
        double mean_loss = 0.0;
        std::vector<RealGrid> gradients;
        std::vector<int> predictions;
    };
    BatchLossGrad input_loss_gradients(std::span<const Image> xs, const LossSpec& loss) const;
    double mean_loss(std::span<const Image> xs, const LossSpec& loss) const;

    // Forward-only loss + predictions (recovery line-search trials).
    struct BatchEval {
        double mean_loss = 0.0;
        std::vector<int> predictions;
    };
    BatchEval batch_eval(std::span<const Image> xs, const LossSpec& loss) const;

    // Versioned binary checkpoint; round-trips bit-exactly.
    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

    // Bit-exact parameter equality (determinism tests).
    bool same_parameters(const Model& other) const;

    const ModelParams& params() const { return *params_; }

  private:
    explicit Model(std::shared_ptr<const ModelParams> p) : params_(std::move(p)) {}
    std::shared_ptr<const ModelParams> params_;

    friend struct TrainRun;
};

struct TrainResult {
    Model model;
    std::vector<double> epoch_loss;  // mean training loss per epoch
};

// Mini-batch SGD on softmax cross-entropy. Single-threaded and
// deterministic given cfg.seed (fixed init, fixed shuffle order).
// Throws TrainError (with the epoch) if the loss becomes non-finite.
TrainResult train(const LabeledDataset& train_set, const TrainConfig& cfg);

}  // namespace inflight
