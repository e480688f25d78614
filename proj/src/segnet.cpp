#include "spcl/segnet.hpp"

#include <cmath>
#include <stdexcept>

#include "spcl/rng.hpp"

namespace spcl {

SegModel::SegModel(int feature_dim, int num_classes)
    : feature_dim(feature_dim), num_classes(num_classes) {
    auto make = [](int k, int cin, int cout, int stride) {
        ConvLayer l;
        l.kernel = Tensor::zeros({k, k, cin, cout}, /*requires_grad=*/true);
        l.bias = Tensor::zeros({cout}, /*requires_grad=*/true);
        l.stride = stride;
        return l;
    };
    enc1 = make(3, 3, 16, 2);
    enc2 = make(3, 16, 32, 2);
    enc3 = make(3, 32, feature_dim, 1);
    dec = make(1, feature_dim, num_classes, 1);
}

std::vector<std::pair<std::string, Tensor>> SegModel::parameters() const {
    return {
        {"enc1.kernel", enc1.kernel}, {"enc1.bias", enc1.bias},
        {"enc2.kernel", enc2.kernel}, {"enc2.bias", enc2.bias},
        {"enc3.kernel", enc3.kernel}, {"enc3.bias", enc3.bias},
        {"dec.kernel", dec.kernel},   {"dec.bias", dec.bias},
    };
}

void SegModel::zero_grads() const {
    for (auto& [name, t] : parameters()) {
        Tensor tt = t;
        tt.zero_grad();
    }
}

void init_params(SegModel& model, std::uint64_t seed) {
    int layer = 0;
    for (auto* l : {&model.enc1, &model.enc2, &model.enc3, &model.dec}) {
        const int k = l->kernel.dim(0), cin = l->kernel.dim(2);
        const double std = std::sqrt(2.0 / (k * k * cin));
        RandomStream rng(seed, 0x696e6974, static_cast<std::uint64_t>(layer));
        for (long i = 0; i < l->kernel.size(); ++i) l->kernel.values()[i] = std * rng.normal();
        l->bias.values().setZero();
        l->kernel.zero_grad();
        l->bias.zero_grad();
        ++layer;
    }
}

Tensor forward_features(const SegModel& model, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw std::invalid_argument("forward_features: expects H x W x 3 image, got " +
                                    shape_str(image.shape()));
    }
    if (image.dim(0) % 4 != 0 || image.dim(1) % 4 != 0) {
        throw std::invalid_argument("forward_features: extents must be divisible by 4, got " +
                                    shape_str(image.shape()));
    }
    Tensor x = image;
    for (const auto* l : {&model.enc1, &model.enc2, &model.enc3}) {
        x = relu(bias_add(conv2d(x, l->kernel, l->stride, 1), l->bias));
    }
    return x;
}

Tensor forward_scores(const SegModel& model, const Tensor& features) {
    return bias_add(conv2d(features, model.dec.kernel, 1, 0), model.dec.bias);
}

ForwardMaps forward_all(const SegModel& model, const Tensor& image) {
    ForwardMaps m;
    m.features = forward_features(model, image);
    m.scores = forward_scores(model, m.features);
    m.probs = channel_softmax(bilinear_upsample(m.scores, 4));
    return m;
}

Tensor forward_probs(const SegModel& model, const Tensor& image) {
    return forward_all(model, image).probs;
}

Tensor image_tensor(const Eigen::ArrayXd& image, int h, int w) {
    return Tensor::from_values({h, w, 3}, image);
}

}  // namespace spcl
