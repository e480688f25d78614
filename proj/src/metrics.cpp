#include "spcl/metrics.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spcl {

ConfusionMatrix::ConfusionMatrix(int classes) {
    m_ = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>::Zero(classes, classes);
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.rows != gt.rows || pred.cols != gt.cols) {
        throw std::invalid_argument("ConfusionMatrix: extent mismatch " +
                                    std::to_string(pred.rows) + "x" + std::to_string(pred.cols) +
                                    " vs " + std::to_string(gt.rows) + "x" +
                                    std::to_string(gt.cols));
    }
    for (long i = 0; i < gt.size(); ++i) {
        const std::uint8_t t = gt.v[static_cast<std::size_t>(i)];
        if (t == kIgnoreLabel) continue;
        const std::uint8_t p = pred.v[static_cast<std::size_t>(i)];
        if (t >= classes() || p >= classes()) {
            throw std::invalid_argument("ConfusionMatrix: label id out of range");
        }
        m_(t, p) += 1;
    }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    m_ += other.m_;
    return *this;
}

std::optional<double> iou(const ConfusionMatrix& cm, int c) {
    long long tp = cm.at(c, c), row = 0, col = 0;
    for (int k = 0; k < cm.classes(); ++k) {
        row += cm.at(c, k);
        col += cm.at(k, c);
    }
    const long long denom = row + col - tp;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(denom);
}

double miou(const ConfusionMatrix& cm) {
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < cm.classes(); ++c) {
        if (auto v = iou(cm, c)) {
            sum += *v;
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / n;
}

double subset_miou(const ConfusionMatrix& cm, const std::vector<int>& class_ids) {
    if (class_ids.empty()) throw std::invalid_argument("subset_miou: empty class subset");
    double sum = 0.0;
    int n = 0;
    for (int c : class_ids) {
        if (auto v = iou(cm, c)) {
            sum += *v;
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / n;
}

Eigen::VectorXd ccd(const std::vector<std::vector<Eigen::VectorXd>>& features_by_class,
                    const Eigen::MatrixXd& prototypes) {
    const int C = static_cast<int>(features_by_class.size());
    if (prototypes.rows() < C) {
        throw std::invalid_argument("ccd: prototype missing for some class with features");
    }
    std::vector<int> present;
    for (int c = 0; c < C; ++c)
        if (!features_by_class[static_cast<std::size_t>(c)].empty()) present.push_back(c);
    if (present.size() < 2) throw std::invalid_argument("ccd: needs features for >= 2 classes");

    Eigen::VectorXd out = Eigen::VectorXd::Constant(C, -1.0);
    for (int c : present) {
        double intra = 0.0;
        for (const auto& x : features_by_class[static_cast<std::size_t>(c)]) {
            intra += (x - prototypes.row(c).transpose()).squaredNorm();
        }
        intra /= static_cast<double>(features_by_class[static_cast<std::size_t>(c)].size());

        double acc = 0.0;
        for (int k : present) {
            if (k == c) continue;
            const double d2 = (prototypes.row(c) - prototypes.row(k)).squaredNorm();
            if (d2 == 0.0) {
                throw std::runtime_error("ccd: prototypes of classes " + std::to_string(c) +
                                         " and " + std::to_string(k) + " coincide");
            }
            acc += intra / d2;
        }
        out[c] = acc / static_cast<double>(present.size() - 1);
    }
    return out;
}

MetricReport make_report(const ConfusionMatrix& cm, const std::vector<int>& tail_ids) {
    MetricReport r;
    const int C = cm.classes();
    r.class_iou.resize(static_cast<std::size_t>(C));
    r.class_pixels.resize(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        r.class_iou[static_cast<std::size_t>(c)] = iou(cm, c);
        long long row = 0;
        for (int k = 0; k < C; ++k) row += cm.at(c, k);
        r.class_pixels[static_cast<std::size_t>(c)] = row;
    }
    r.miou = miou(cm);
    r.miou_tail = tail_ids.empty() ? 0.0 : subset_miou(cm, tail_ids);
    return r;
}

std::string report_csv(const MetricReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "class,iou,pixels\n";
    for (std::size_t c = 0; c < report.class_iou.size(); ++c) {
        os << c << ",";
        if (report.class_iou[c]) os << *report.class_iou[c];
        os << "," << report.class_pixels[c] << "\n";
    }
    os << "miou," << report.miou << "\n";
    os << "miou_tail," << report.miou_tail << "\n";
    for (const auto& [name, v] : report.subset_mious) os << "miou_subset_" << name << "," << v << "\n";
    for (const auto& [c, v] : report.ccd_per_class) os << "ccd_" << c << "," << v << "\n";
    return os.str();
}

void write_report_csv(const std::filesystem::path& path, const MetricReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << report_csv(report);
}

}  // namespace spcl
