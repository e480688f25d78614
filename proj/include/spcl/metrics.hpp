#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spcl/label_map.hpp"

namespace spcl {

/// Row = ground truth, column = prediction. Mergeable by addition.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int classes);

    int classes() const { return static_cast<int>(m_.rows()); }
    long long at(int gt, int pred) const { return m_(gt, pred); }
    long long total() const { return m_.sum(); }

    /// Adds one labeling; ignore pixels in the ground truth are skipped.
    void accumulate(const LabelMap& pred, const LabelMap& gt);
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);

private:
    Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic> m_;
};

/// TP / (TP + FP + FN); nullopt when the class is absent from both
/// prediction and ground truth (0/0).
std::optional<double> iou(const ConfusionMatrix& cm, int c);

/// Mean over classes with defined IoU.
double miou(const ConfusionMatrix& cm);

/// Mean over a class subset (undefined classes excluded); throws on an
/// empty subset.
double subset_miou(const ConfusionMatrix& cm, const std::vector<int>& class_ids);

/// Class Center Distance per class:
///   CDD(c) = 1/(C-1) * sum_{k != c} mean_x |x - mu_c|^2 / |mu_c - mu_k|^2
/// over the classes that have feature samples. Throws when two prototypes
/// coincide, naming the pair.
Eigen::VectorXd ccd(const std::vector<std::vector<Eigen::VectorXd>>& features_by_class,
                    const Eigen::MatrixXd& prototypes);

struct MetricReport {
    std::vector<std::optional<double>> class_iou;
    std::vector<long long> class_pixels;  // ground-truth pixels per class
    double miou = 0.0;
    double miou_tail = 0.0;
    std::vector<std::pair<std::string, double>> subset_mious;
    std::vector<std::pair<int, double>> ccd_per_class;  // optional section
};

MetricReport make_report(const ConfusionMatrix& cm, const std::vector<int>& tail_ids);

/// CSV layout: `class,iou,pixels` header and per-class rows (blank iou for
/// undefined classes), then miou / miou_tail / miou_subset_<name> /
/// ccd_<class> lines.
void write_report_csv(const std::filesystem::path& path, const MetricReport& report);
std::string report_csv(const MetricReport& report);

}  // namespace spcl
