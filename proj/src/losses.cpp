#include "spcl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spcl {

namespace {

double logsumexp(const Eigen::VectorXd& x) {
    const double m = x.maxCoeff();
    return m + std::log((x.array() - m).exp().sum());
}

Eigen::VectorXd softmax_vec(const Eigen::VectorXd& x) {
    Eigen::VectorXd e = (x.array() - x.maxCoeff()).exp();
    return e / e.sum();
}

/// Masked argmax shared by target_mask and pseudo_labels: class of largest
/// probability among those strictly above their threshold, ignore if none.
LabelMap masked_argmax(const Eigen::ArrayXd& values, int rows, int cols, int classes,
                       const Eigen::VectorXd& sigma) {
    LabelMap out(rows, cols, kIgnoreLabel);
    for (long p = 0; p < static_cast<long>(rows) * cols; ++p) {
        const double* probs = values.data() + p * classes;
        int best = -1;
        double best_p = 0.0;
        for (int c = 0; c < classes; ++c) {
            if (probs[c] > sigma[c] && (best < 0 || probs[c] > best_p)) {
                best = c;
                best_p = probs[c];
            }
        }
        if (best >= 0) out.v[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

}  // namespace

Tensor contrastive(const Tensor& u, const Eigen::VectorXd& pos,
                   const std::vector<Eigen::VectorXd>& negs, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("contrastive: temperature must be positive");
    if (u.size() != pos.size()) {
        throw std::invalid_argument("contrastive: query and key dimensions differ");
    }
    const long n = u.size();
    const long k = 1 + static_cast<long>(negs.size());
    auto keys = std::make_shared<Eigen::MatrixXd>(k, n);
    keys->row(0) = pos.transpose();
    for (std::size_t i = 0; i < negs.size(); ++i) {
        if (negs[i].size() != n) throw std::invalid_argument("contrastive: negative key dimension");
        keys->row(static_cast<long>(i) + 1) = negs[i].transpose();
    }
    const Eigen::VectorXd q = u.values().matrix();
    const Eigen::VectorXd logits = (*keys * q) / tau;
    Tensor out = Tensor::scalar(logsumexp(logits) - logits[0]);
    if (Tape::active() && u.requires_grad()) {
        out.set_requires_grad(true);
        auto ud = u.data(), od = out.data();
        auto probs = std::make_shared<Eigen::VectorXd>(softmax_vec(logits));
        Tape::active()->record({ud, od}, [ud, od, keys, probs, tau](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::VectorXd du = (keys->transpose() * *probs - keys->row(0).transpose()) / tau;
            adj.accum(ud.get(), ud->values.size()) += (*go)[0] * du.array();
        });
    }
    return out;
}

ContrastiveTerms contrastive_terms(const Tensor& features, const Mask& mask,
                                   const PrototypeBank& bank, const ContrastiveConfig& cfg) {
    if (cfg.tau <= 0.0) throw std::invalid_argument("contrastive: temperature must be positive");
    const int h = features.dim(0), w = features.dim(1), n = features.dim(2);
    if (mask.rows != h || mask.cols != w) {
        throw std::invalid_argument("contrastive_terms: mask extents " + std::to_string(mask.rows) +
                                    "x" + std::to_string(mask.cols) + " vs features " +
                                    shape_str(features.shape()));
    }

    // Key rows are the initialized prototypes; each contributing pixel's
    // class indexes its positive row, with the remaining rows as negatives.
    std::vector<int> channel_of(256, -1);
    std::vector<int> key_class;
    for (int c = 0; c < bank.classes(); ++c) {
        if (!bank.initialized(c)) continue;
        channel_of[static_cast<std::size_t>(c)] = static_cast<int>(key_class.size());
        key_class.push_back(c);
    }
    const long k = static_cast<long>(key_class.size());
    ContrastiveTerms terms{Tensor::scalar(0.0), 0};
    if (k == 0) return terms;

    auto keys = std::make_shared<Eigen::MatrixXd>(k, n);
    for (long j = 0; j < k; ++j)
        keys->row(j) = bank.prototype(key_class[static_cast<std::size_t>(j)]).transpose();

    Tensor fn = l2_normalize_channels(features);

    struct PixelTerm {
        long offset;  // flat offset of the pixel's channel vector in fn
        int channel;  // positive key row
        Eigen::VectorXd probs;
    };
    auto contributing = std::make_shared<std::vector<PixelTerm>>();
    double total = 0.0;
    for (long p = 0; p < static_cast<long>(h) * w; ++p) {
        const std::uint8_t cls = mask.v[static_cast<std::size_t>(p)];
        if (cls == kIgnoreLabel || channel_of[cls] < 0) continue;
        const Eigen::VectorXd q = fn.values().segment(p * n, n).matrix();
        const Eigen::VectorXd logits = (*keys * q) / cfg.tau;
        const int ch = channel_of[cls];
        total += logsumexp(logits) - logits[ch];
        contributing->push_back(PixelTerm{p * n, ch, softmax_vec(logits)});
    }
    terms.pixels = static_cast<long>(contributing->size());
    if (terms.pixels == 0) return terms;

    terms.sum = Tensor::scalar(total);
    if (Tape::active() && fn.requires_grad()) {
        terms.sum.set_requires_grad(true);
        auto fd = fn.data(), od = terms.sum.data();
        const double tau = cfg.tau;
        Tape::active()->record({fd, od}, [fd, od, keys, contributing, tau](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::ArrayXd& gf = adj.accum(fd.get(), fd->values.size());
            const long n = keys->cols();
            for (const auto& t : *contributing) {
                Eigen::VectorXd du =
                    (keys->transpose() * t.probs - keys->row(t.channel).transpose()) / tau;
                gf.segment(t.offset, n) += (*go)[0] * du.array();
            }
        });
    }
    return terms;
}

namespace {

Tensor contrastive_mean(const Tensor& features, const Mask& mask, const PrototypeBank& bank,
                        const ContrastiveConfig& cfg) {
    ContrastiveTerms t = contrastive_terms(features, mask, bank, cfg);
    if (t.pixels == 0) return Tensor::scalar(0.0);
    return scale(t.sum, 1.0 / static_cast<double>(t.pixels));
}

}  // namespace

Tensor source_contrastive(const Tensor& features, const Mask& mask, const PrototypeBank& bank,
                          const ContrastiveConfig& cfg) {
    return contrastive_mean(features, mask, bank, cfg);
}

Tensor target_contrastive(const Tensor& features, const Mask& mask, const PrototypeBank& bank,
                          const ContrastiveConfig& cfg) {
    return contrastive_mean(features, mask, bank, cfg);
}

Thresholds thresholds_from_confidences(std::vector<std::vector<double>> conf_by_class,
                                       ThresholdSpace space) {
    const int C = static_cast<int>(conf_by_class.size());
    Thresholds th;
    th.space = space;
    th.sigma = Eigen::VectorXd::Constant(C, 0.9);
    for (int c = 0; c < C; ++c) {
        auto& v = conf_by_class[static_cast<std::size_t>(c)];
        if (v.empty()) continue;  // never predicted: stay at 0.9
        std::sort(v.begin(), v.end());
        const std::size_t mid = v.size() / 2;
        const double median = v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
        th.sigma[c] = std::min(median, 0.9);
    }
    return th;
}

Thresholds calibrate_thresholds(const SegModel& model, const std::vector<Tensor>& target_images,
                                ThresholdSpace space) {
    if (target_images.empty()) {
        throw std::invalid_argument("calibrate_thresholds: empty target set");
    }
    const int C = model.num_classes;
    std::vector<std::vector<double>> conf(static_cast<std::size_t>(C));
    for (const Tensor& img : target_images) {
        Tensor probs;
        if (space == ThresholdSpace::feature) {
            probs = channel_softmax(forward_scores(model, forward_features(model, img)));
        } else {
            probs = forward_probs(model, img);
        }
        const long pixels = probs.size() / C;
        for (long p = 0; p < pixels; ++p) {
            const double* v = probs.values().data() + p * C;
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (v[c] > v[best]) best = c;
            conf[static_cast<std::size_t>(best)].push_back(v[best]);
        }
    }
    return thresholds_from_confidences(std::move(conf), space);
}

Mask target_mask(const Tensor& probs, const Thresholds& thresholds) {
    const int C = static_cast<int>(thresholds.sigma.size());
    if (probs.rank() != 3 || probs.dim(2) != C) {
        throw std::invalid_argument("target_mask: probs " + shape_str(probs.shape()) +
                                    " vs " + std::to_string(C) + " thresholds");
    }
    return masked_argmax(probs.values(), probs.dim(0), probs.dim(1), C, thresholds.sigma);
}

PseudoLabelMap pseudo_labels(const Tensor& probs, const Thresholds& thresholds) {
    return target_mask(probs, thresholds);
}

Tensor masked_nll(const Tensor& probs, const LabelMap& labels) {
    const int h = probs.dim(0), w = probs.dim(1), C = probs.dim(2);
    if (labels.rows != h || labels.cols != w) {
        throw std::invalid_argument("masked_nll: labels " + std::to_string(labels.rows) + "x" +
                                    std::to_string(labels.cols) + " vs probs " +
                                    shape_str(probs.shape()));
    }
    long count = 0;
    double total = 0.0;
    for (long p = 0; p < static_cast<long>(h) * w; ++p) {
        const std::uint8_t y = labels.v[static_cast<std::size_t>(p)];
        if (y == kIgnoreLabel) continue;
        if (y >= C) throw std::invalid_argument("masked_nll: label id out of range");
        total -= std::log(probs.values()[p * C + y]);
        ++count;
    }
    if (count == 0) return Tensor::scalar(0.0);
    Tensor out = Tensor::scalar(total / static_cast<double>(count));
    if (Tape::active() && probs.requires_grad()) {
        out.set_requires_grad(true);
        auto pd = probs.data(), od = out.data();
        auto lab = std::make_shared<LabelMap>(labels);
        Tape::active()->record({pd, od}, [pd, od, lab, C, count](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::ArrayXd& gp = adj.accum(pd.get(), pd->values.size());
            const double scale = (*go)[0] / static_cast<double>(count);
            for (long p = 0; p < lab->size(); ++p) {
                const std::uint8_t y = lab->v[static_cast<std::size_t>(p)];
                if (y == kIgnoreLabel) continue;
                gp[p * C + y] -= scale / pd->values[p * C + y];
            }
        });
    }
    return out;
}

Tensor segmentation_loss(const Tensor& probs, const LabelMap& labels) {
    return masked_nll(probs, labels);
}

Tensor self_training_loss(const Tensor& probs, const PseudoLabelMap& pseudo) {
    return masked_nll(probs, pseudo);
}

Tensor total_loss(const Tensor& seg, const Tensor& cl_source, const Tensor& cl_target,
                  double lambda) {
    return add(seg, scale(add(cl_source, cl_target), lambda));
}

}  // namespace spcl
