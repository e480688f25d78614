#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spcl/autodiff.hpp"

namespace spcl {

/// Encoder-decoder over H x W x 3 images (H, W divisible by 4):
///   encoder: 3x3 convs 3->16 (stride 2), 16->32 (stride 2), 32->N, relu each
///   decoder: 1x1 conv N->C on the H/4 x W/4 feature map
struct SegModel {
    struct ConvLayer {
        Tensor kernel;
        Tensor bias;
        int stride = 1;
    };

    int feature_dim = 32;
    int num_classes = 8;
    ConvLayer enc1, enc2, enc3, dec;

    SegModel() : SegModel(32, 8) {}
    SegModel(int feature_dim, int num_classes);

    /// Named parameters in a fixed order (kernels and biases).
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    void zero_grads() const;
};

/// Fan-in-scaled normal init (std = sqrt(2/fan_in)), zero biases,
/// deterministic per seed.
void init_params(SegModel& model, std::uint64_t seed);

/// Encoder features at H/4 x W/4 x N; not normalized.
Tensor forward_features(const SegModel& model, const Tensor& image);

/// Decoder score map O at feature resolution, H' x W' x C.
Tensor forward_scores(const SegModel& model, const Tensor& features);

struct ForwardMaps {
    Tensor features;  // H' x W' x N
    Tensor scores;    // H' x W' x C
    Tensor probs;     // H x W x C, per-pixel softmax after 4x upsample
};

ForwardMaps forward_all(const SegModel& model, const Tensor& image);

/// Upsampled per-pixel probabilities P, H x W x C.
Tensor forward_probs(const SegModel& model, const Tensor& image);

/// Wraps an H*W*3 image array as a (non-grad) input tensor.
Tensor image_tensor(const Eigen::ArrayXd& image, int h, int w);

}  // namespace spcl
