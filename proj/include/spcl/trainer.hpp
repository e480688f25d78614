#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spcl/losses.hpp"
#include "spcl/metrics.hpp"
#include "spcl/prototype_bank.hpp"
#include "spcl/rng.hpp"
#include "spcl/segnet.hpp"
#include "spcl/synthdata.hpp"

namespace spcl {

struct TrainConfig {
    double lr0 = 2.5e-4;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double poly_power = 0.9;
    int iters_a = 500;
    int iters_b = 1500;
    int iters_c = 500;
    int batch_source = 2;
    int batch_target = 2;
    double lambda = 1.0;
    double tau = 0.1;
    double alpha = 0.1;
    int threshold_refresh = 500;  // recalibration interval K in stage B
    std::uint64_t seed = 1;
    bool aug_flip = true;
    bool aug_jitter = true;
    int eval_every = 250;  // 0 disables in-stage evaluation rows
    int feature_dim = 32;
    bool use_cl_s = true;  // ablation switches for the contrastive terms
    bool use_cl_t = true;

    void validate() const;
    /// Canonical key = value text; its hash ties checkpoints to a config.
    std::string canonical() const;
    std::uint64_t hash() const;
};

/// lr0 * (1 - iter/max_iters)^power
double poly_lr(long iter, long max_iters, double lr0, double power);

/// One SGD step with classic momentum and decoupled-from-nothing weight
/// decay folded into the gradient:
///   buffer <- momentum * buffer + grad + weight_decay * param
///   param  <- param - lr * buffer
void sgd_update(Eigen::ArrayXd& param, const Eigen::ArrayXd& grad, Eigen::ArrayXd& buffer,
                double lr, double momentum, double weight_decay);

/// Flip (p = 0.5, image and labels together) then brightness / contrast /
/// saturation jitter within +-20% (image only), clamped to [0,1].
Sample augment_sample(const Sample& s, RandomStream& rng, bool flip, bool jitter);

/// Training-time dataset view. Source samples expose their labels; target
/// labels are reachable only through the counted eval accessor, which the
/// training stages never call.
class TrainDataset {
public:
    static TrainDataset load(const std::filesystem::path& root);
    static TrainDataset from_samples(std::vector<Sample> source, std::vector<Sample> target,
                                     int classes);

    int classes() const { return classes_; }
    int height() const { return height_; }
    int width() const { return width_; }
    int n_source() const { return static_cast<int>(source_.size()); }
    int n_target() const { return static_cast<int>(target_.size()); }

    const Sample& source(int i) const { return source_[static_cast<std::size_t>(i)]; }
    const Eigen::ArrayXd& target_image(int i) const {
        return target_[static_cast<std::size_t>(i)].image;
    }
    const LabelMap& target_labels_for_eval(int i) const;
    long target_label_reads() const { return label_reads_; }

    const std::vector<int>& tail_ids() const { return tail_ids_; }

private:
    int classes_ = 0, height_ = 0, width_ = 0;
    std::vector<Sample> source_, target_;
    std::vector<int> tail_ids_;
    mutable long label_reads_ = 0;
};

// --- checkpoints -------------------------------------------------------------
// Binary layout: magic "SPCL1", u32 entry count, entries of
// (u32 name length, name, u32 rank, u32 extents..., u64 count, f64 data),
// then a u32-length-prefixed metadata block of key = value lines.

struct CheckpointEntry {
    std::string name;
    Shape shape;
    Eigen::ArrayXd data;
};

struct Checkpoint {
    int version = 1;
    std::string stage = "A";
    long iteration = 0;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds a model from a checkpoint's parameter arrays alone (feature
/// dim and class count are read off the kernel shapes).
SegModel model_from_checkpoint(const Checkpoint& ckpt);

// --- metrics log -------------------------------------------------------------

struct MetricsRow {
    std::string stage;
    long iter = 0;
    std::string split;
    double miou = 0.0;
    double miou_tail = 0.0;
    double loss_seg = 0.0;
    double loss_cl_s = 0.0;
    double loss_cl_t = 0.0;
    double lr = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

// --- evaluation --------------------------------------------------------------

LabelMap predict_labels(const SegModel& model, const Eigen::ArrayXd& image, int h, int w);
MetricReport evaluate_split(const SegModel& model, const TrainDataset& data, Domain split);

/// Normalized encoder features grouped by downsampled ground-truth class,
/// over up to max_images of the split.
std::vector<std::vector<Eigen::VectorXd>> collect_class_features(const SegModel& model,
                                                                 const TrainDataset& data,
                                                                 Domain split, int max_images);

/// Unit-normalized class means; zero rows for classes without features.
Eigen::MatrixXd feature_centroids(const std::vector<std::vector<Eigen::VectorXd>>& by_class,
                                  int feature_dim);

// --- the three-stage procedure -----------------------------------------------

/// Stage A: source-only warm-up on the segmentation loss. Stage B:
/// prototype bank init, then the combined objective with per-batch EMA
/// prototype updates and periodic threshold recalibration. Stage C:
/// pseudo-label generation on the target set, then self-training.
class Trainer {
public:
    Trainer(TrainDataset& data, TrainConfig cfg);

    void init_fresh();
    void restore(const Checkpoint& ckpt);
    Checkpoint checkpoint() const;

    /// Runs the stage to its iteration budget (or the halt point).
    /// Returns false when halted early.
    bool run_stage_a();
    bool run_stage_b();
    bool run_stage_c();

    /// Stop once the global iteration (A then B then C, cumulative)
    /// reaches this value; 0 disables.
    void set_halt(long global_iter) { halt_ = global_iter; }

    const SegModel& model() const { return model_; }
    const PrototypeBank& bank() const { return bank_; }
    const std::string& stage() const { return stage_; }
    long stage_iter() const { return iter_; }
    long global_iter() const;
    const std::vector<MetricsRow>& metrics_log() const { return log_; }
    const Thresholds& feature_thresholds() const { return sigma_o_; }
    const std::vector<PseudoLabelMap>& frozen_pseudo_labels() const { return pseudo_; }
    double pseudo_coverage() const { return pseudo_coverage_; }

    /// Deterministic per-iteration streams; exposed so tests can replay
    /// the exact batches a stage drew.
    static RandomStream batch_stream(std::uint64_t seed, char stage, long iter, int half);
    static RandomStream aug_stream(std::uint64_t seed, char stage, long iter, int slot);

private:
    void eval_and_log(double lr);
    void maybe_eval(double lr);
    void initialize_bank_from_source();
    std::vector<Tensor> target_image_tensors() const;

    TrainDataset& data_;
    TrainConfig cfg_;
    SegModel model_;
    std::vector<Eigen::ArrayXd> momentum_;  // parallel to model_.parameters()
    PrototypeBank bank_;
    Thresholds sigma_o_;
    std::vector<PseudoLabelMap> pseudo_;
    double pseudo_coverage_ = 0.0;
    std::string stage_ = "A";
    long iter_ = 0;
    long halt_ = 0;
    std::vector<MetricsRow> log_;
    double last_seg_ = 0.0, last_cl_s_ = 0.0, last_cl_t_ = 0.0;
};

}  // namespace spcl
