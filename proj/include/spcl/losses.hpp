#pragma once

#include <Eigen/Dense>

#include <vector>

#include "spcl/autodiff.hpp"
#include "spcl/label_map.hpp"
#include "spcl/prototype_bank.hpp"
#include "spcl/segnet.hpp"

namespace spcl {

struct ContrastiveConfig {
    double tau = 0.1;     // softmax temperature, > 0
    double lambda = 1.0;  // weight of the contrastive terms in the objective
};

enum class ThresholdSpace { feature, output };

/// Per-class confidence thresholds, each capped at 0.9.
struct Thresholds {
    Eigen::VectorXd sigma;
    ThresholdSpace space = ThresholdSpace::feature;
};

using PseudoLabelMap = LabelMap;

/// InfoNCE term for a single unit-norm query against one positive and any
/// number of negative keys:
///   -log( exp(u.pos/tau) / (exp(u.pos/tau) + sum exp(u.neg/tau)) )
/// Differentiable in u; the keys are constants. Exactly 0 when negs is
/// empty.
Tensor contrastive(const Tensor& u, const Eigen::VectorXd& pos,
                   const std::vector<Eigen::VectorXd>& negs, double tau);

/// Pixel-prototype contrastive sum over one feature map. Pixels whose mask
/// class is ignore or uninitialized do not contribute. `sum` carries the
/// un-normalized total so callers can pool a pixel-exact mean over batches.
struct ContrastiveTerms {
    Tensor sum;   // scalar, 0 when no pixel contributes
    long pixels;  // contributing pixel count
};

ContrastiveTerms contrastive_terms(const Tensor& features, const Mask& mask,
                                   const PrototypeBank& bank, const ContrastiveConfig& cfg);

/// Mean pixel-prototype contrastive loss over the source mask (downsampled
/// ground truth). Returns 0 when no pixel contributes.
Tensor source_contrastive(const Tensor& features, const Mask& mask, const PrototypeBank& bank,
                          const ContrastiveConfig& cfg);

/// Same contract with a confidence-derived target mask.
Tensor target_contrastive(const Tensor& features, const Mask& mask, const PrototypeBank& bank,
                          const ContrastiveConfig& cfg);

/// The per-class threshold rule: sigma_c = min(median confidence over
/// pixels predicted c, 0.9), and 0.9 for classes never predicted.
Thresholds thresholds_from_confidences(std::vector<std::vector<double>> conf_by_class,
                                       ThresholdSpace space);

/// Gathers per-pixel (argmax class, max probability) over the target set
/// and applies the threshold rule. Feature space reads the softmaxed
/// score map at H' x W'; output space reads P at H x W.
Thresholds calibrate_thresholds(const SegModel& model, const std::vector<Tensor>& target_images,
                                ThresholdSpace space);

/// Per pixel, the largest-probability class among those with
/// p_c > sigma_c (strict); ignore when none passes.
Mask target_mask(const Tensor& probs, const Thresholds& thresholds);

/// Same rule over the output-resolution probability map.
PseudoLabelMap pseudo_labels(const Tensor& probs, const Thresholds& thresholds);

/// Mean over non-ignored pixels of -log p at the labeled class; 0 when
/// every pixel is ignored.
Tensor masked_nll(const Tensor& probs, const LabelMap& labels);

/// Cross-entropy against full ground truth (no ignore values expected).
Tensor segmentation_loss(const Tensor& probs, const LabelMap& labels);

/// Cross-entropy against frozen pseudo labels, ignore-aware.
Tensor self_training_loss(const Tensor& probs, const PseudoLabelMap& pseudo);

/// L_seg + lambda * (L_cl_s + L_cl_t).
Tensor total_loss(const Tensor& seg, const Tensor& cl_source, const Tensor& cl_target,
                  double lambda);

}  // namespace spcl
