#include "spcl/prototype_bank.hpp"

#include <cmath>
#include <stdexcept>

namespace spcl {

PrototypeBank::PrototypeBank(int classes, int feature_dim, double alpha)
    : mu_(Eigen::MatrixXd::Zero(classes, feature_dim)),
      initialized_(static_cast<std::size_t>(classes), 0),
      alpha_(alpha) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("PrototypeBank: alpha must lie in [0,1]");
    }
}

bool PrototypeBank::any_initialized() const {
    for (auto f : initialized_)
        if (f) return true;
    return false;
}

void PrototypeBank::set_prototype(int c, const Eigen::VectorXd& v) {
    const double n = v.norm();
    if (n == 0.0) throw std::invalid_argument("set_prototype: zero vector");
    mu_.row(c) = v.transpose() / n;
    initialized_[static_cast<std::size_t>(c)] = 1;
}

void PrototypeBank::restore(Eigen::MatrixXd mu, std::vector<std::uint8_t> initialized,
                            double alpha) {
    mu_ = std::move(mu);
    initialized_ = std::move(initialized);
    alpha_ = alpha;
}

void PrototypeBank::update(const Tensor& features, const Mask& mask, double eps) {
    if (alpha_ == 1.0) return;  // prototypes fixed, keep bits untouched
    for (auto& [c, mean] : class_feature_means(features, mask, eps)) {
        if (!initialized_[static_cast<std::size_t>(c)]) continue;
        Eigen::VectorXd blended = alpha_ * mu_.row(c).transpose() + (1.0 - alpha_) * mean;
        const double n = blended.norm();
        if (n == 0.0) continue;
        mu_.row(c) = blended.transpose() / n;
    }
}

Mask downsample_labels(const LabelMap& labels, int factor) {
    if (factor < 1) throw std::invalid_argument("downsample_labels: factor must be >= 1");
    if (labels.rows % factor != 0 || labels.cols % factor != 0) {
        throw std::invalid_argument("downsample_labels: extents " + std::to_string(labels.rows) +
                                    "x" + std::to_string(labels.cols) + " not divisible by " +
                                    std::to_string(factor));
    }
    Mask out(labels.rows / factor, labels.cols / factor);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out.at(r, c) = labels.at(r * factor, c * factor);
    return out;
}

std::vector<std::pair<int, Eigen::VectorXd>> class_feature_means(const Tensor& features,
                                                                 const Mask& mask, double eps) {
    const int h = features.dim(0), w = features.dim(1), n = features.dim(2);
    if (mask.rows != h || mask.cols != w) {
        throw std::invalid_argument("class_feature_means: mask " + std::to_string(mask.rows) +
                                    "x" + std::to_string(mask.cols) + " vs features " +
                                    shape_str(features.shape()));
    }
    std::vector<Eigen::VectorXd> sums;
    std::vector<long> counts;
    std::vector<int> order;
    sums.resize(256);
    counts.assign(256, 0);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::uint8_t cls = mask.at(r, c);
            if (cls == kIgnoreLabel) continue;
            auto v = features.values().segment((static_cast<long>(r) * w + c) * n, n);
            Eigen::VectorXd f = v.matrix();
            f /= std::sqrt(f.squaredNorm() + eps * eps);
            if (counts[cls] == 0) {
                sums[cls] = Eigen::VectorXd::Zero(n);
                order.push_back(cls);
            }
            sums[cls] += f;
            counts[cls] += 1;
        }
    }
    std::sort(order.begin(), order.end());
    std::vector<std::pair<int, Eigen::VectorXd>> out;
    out.reserve(order.size());
    for (int cls : order) {
        out.emplace_back(cls, sums[static_cast<std::size_t>(cls)] /
                                  static_cast<double>(counts[static_cast<std::size_t>(cls)]));
    }
    return out;
}

}  // namespace spcl
