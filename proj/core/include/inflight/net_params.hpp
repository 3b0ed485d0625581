#pragma once

#include <vector>

namespace inflight {

// Raw parameter storage for Model. Kept as plain vectors so the public
// surface stays free of linear-algebra library types.

struct ConvLayerParams {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;                // square, stride 1, valid padding
    std::vector<double> weights;   // [out][in*kernel*kernel], row-major
    std::vector<double> bias;      // [out]
};

struct DenseLayerParams {
    int in_dim = 0;
    int out_dim = 0;
    std::vector<double> weights;  // [out][in], row-major
    std::vector<double> bias;     // [out]
};

struct ModelParams {
    int input_height = 0;
    int input_width = 0;
    int input_channels = 0;
    int num_classes = 0;

    ConvLayerParams conv1;  // -> tanh -> 2x2 average pool
    ConvLayerParams conv2;  // -> tanh -> 2x2 average pool
    DenseLayerParams fc1;   // -> tanh
    DenseLayerParams fc2;   // -> tanh (the "penultimate" tap)
    DenseLayerParams fc3;   // -> logits
};

}  // namespace inflight
