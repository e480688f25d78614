#pragma once

#include <Eigen/Dense>

#include <vector>

#include "spcl/autodiff.hpp"
#include "spcl/label_map.hpp"

namespace spcl {

/// Feature-resolution class assignment, kIgnoreLabel for excluded pixels.
using Mask = LabelMap;

/// C unit-norm semantic prototypes with an EMA update coefficient. The
/// bank is a plain statistic: no gradient ever flows into or out of it.
class PrototypeBank {
public:
    PrototypeBank() = default;
    PrototypeBank(int classes, int feature_dim, double alpha);

    int classes() const { return static_cast<int>(mu_.rows()); }
    int feature_dim() const { return static_cast<int>(mu_.cols()); }
    double alpha() const { return alpha_; }

    const Eigen::MatrixXd& prototypes() const { return mu_; }
    Eigen::VectorXd prototype(int c) const { return mu_.row(c); }
    bool initialized(int c) const { return initialized_[static_cast<std::size_t>(c)]; }
    const std::vector<std::uint8_t>& initialized_flags() const { return initialized_; }
    bool any_initialized() const;

    /// Sets prototype c directly (unit-normalized); used by checkpoint
    /// restore and the initialization pass.
    void set_prototype(int c, const Eigen::VectorXd& v);
    void restore(Eigen::MatrixXd mu, std::vector<std::uint8_t> initialized, double alpha);

    /// EMA step for every class present in the mask:
    ///   mu_c <- normalize(alpha * mu_c + (1 - alpha) * batch_mean_c)
    /// where batch_mean_c averages the L2-normalized pixel features at
    /// mask == c. alpha = 1 keeps the bank bit-identical; classes absent
    /// from the mask (or not yet initialized) are untouched.
    void update(const Tensor& features, const Mask& mask, double eps = 1e-12);

private:
    Eigen::MatrixXd mu_;  // C x N, rows unit-norm once initialized
    std::vector<std::uint8_t> initialized_;
    double alpha_ = 0.1;
};

/// Nearest-neighbor label downsampling: out(i,j) = in(i*factor, j*factor).
Mask downsample_labels(const LabelMap& labels, int factor);

/// Mean of L2-normalized pixel features per class present in the mask.
/// Returns pairs (class, mean); classes with no pixels are omitted.
std::vector<std::pair<int, Eigen::VectorXd>> class_feature_means(const Tensor& features,
                                                                 const Mask& mask,
                                                                 double eps = 1e-12);

/// One-shot prototype initialization: for each class, the unit-normalized
/// mean over images containing it of the per-image mean of normalized
/// pixel features at that class. Images lacking a class do not dilute it.
template <typename FeatureFn>
void initialize_bank(PrototypeBank& bank, FeatureFn&& features_and_mask, int n_images) {
    const int C = bank.classes();
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(C, bank.feature_dim());
    Eigen::VectorXi images_with = Eigen::VectorXi::Zero(C);
    for (int i = 0; i < n_images; ++i) {
        auto [features, mask] = features_and_mask(i);
        for (auto& [c, mean] : class_feature_means(features, mask)) {
            acc.row(c) += mean.transpose();
            images_with[c] += 1;
        }
    }
    for (int c = 0; c < C; ++c) {
        if (images_with[c] == 0) continue;
        bank.set_prototype(c, acc.row(c).transpose() / images_with[c]);
    }
}

}  // namespace spcl
