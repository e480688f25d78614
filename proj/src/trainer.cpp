#include "spcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spcl {

namespace {

constexpr std::uint64_t kBatchTag = 0x626174;  // "bat"
constexpr std::uint64_t kAugTag = 0x617567;    // "aug"

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

LabelMap argmax_labels(const Eigen::ArrayXd& values, int rows, int cols, int classes) {
    LabelMap out(rows, cols);
    for (long p = 0; p < static_cast<long>(rows) * cols; ++p) {
        const double* v = values.data() + p * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (v[c] > v[best]) best = c;
        out.v[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(lr0 > 0.0)) throw std::invalid_argument("config: lr0 must be positive");
    if (!(poly_power > 0.0)) throw std::invalid_argument("config: poly_power must be positive");
    if (batch_source < 1 || batch_target < 1) {
        throw std::invalid_argument("config: batch counts must be >= 1");
    }
    if (iters_a < 0 || iters_b < 0 || iters_c < 0) {
        throw std::invalid_argument("config: negative iteration budget");
    }
    if (tau <= 0.0) throw std::invalid_argument("config: tau must be positive");
    if (lambda < 0.0) throw std::invalid_argument("config: lambda must be nonnegative");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("config: alpha must be in [0,1]");
    if (threshold_refresh < 1) throw std::invalid_argument("config: threshold_refresh must be >= 1");
    if (eval_every < 0) throw std::invalid_argument("config: eval_every must be >= 0");
    if (feature_dim < 1) throw std::invalid_argument("config: feature_dim must be >= 1");
}

std::string TrainConfig::canonical() const {
    std::ostringstream os;
    os << "alpha = " << fmt17(alpha) << "\n";
    os << "aug_flip = " << (aug_flip ? 1 : 0) << "\n";
    os << "aug_jitter = " << (aug_jitter ? 1 : 0) << "\n";
    os << "batch_source = " << batch_source << "\n";
    os << "batch_target = " << batch_target << "\n";
    os << "eval_every = " << eval_every << "\n";
    os << "feature_dim = " << feature_dim << "\n";
    os << "iters_a = " << iters_a << "\n";
    os << "iters_b = " << iters_b << "\n";
    os << "iters_c = " << iters_c << "\n";
    os << "lambda = " << fmt17(lambda) << "\n";
    os << "lr0 = " << fmt17(lr0) << "\n";
    os << "momentum = " << fmt17(momentum) << "\n";
    os << "poly_power = " << fmt17(poly_power) << "\n";
    os << "seed = " << seed << "\n";
    os << "tau = " << fmt17(tau) << "\n";
    os << "threshold_refresh = " << threshold_refresh << "\n";
    os << "use_cl_s = " << (use_cl_s ? 1 : 0) << "\n";
    os << "use_cl_t = " << (use_cl_t ? 1 : 0) << "\n";
    os << "weight_decay = " << fmt17(weight_decay) << "\n";
    return os.str();
}

std::uint64_t TrainConfig::hash() const {
    const std::string s = canonical();
    return fnv1a64(s.data(), s.size());
}

double poly_lr(long iter, long max_iters, double lr0, double power) {
    if (iter < 0 || iter > max_iters) {
        throw std::invalid_argument("poly_lr: iteration outside [0, max_iters]");
    }
    return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iters), power);
}

void sgd_update(Eigen::ArrayXd& param, const Eigen::ArrayXd& grad, Eigen::ArrayXd& buffer,
                double lr, double momentum, double weight_decay) {
    buffer = momentum * buffer + grad + weight_decay * param;
    param -= lr * buffer;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

Sample augment_sample(const Sample& s, RandomStream& rng, bool flip, bool jitter) {
    Sample out = s;
    const int h = s.labels.rows, w = s.labels.cols;
    if (flip && rng.bernoulli(0.5)) {
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w / 2; ++c) {
                const int m = w - 1 - c;
                std::swap(out.labels.at(r, c), out.labels.at(r, m));
                for (int ch = 0; ch < 3; ++ch) {
                    std::swap(out.image[(static_cast<long>(r) * w + c) * 3 + ch],
                              out.image[(static_cast<long>(r) * w + m) * 3 + ch]);
                }
            }
        }
    }
    if (jitter) {
        const double fb = rng.uniform(0.8, 1.2);
        const double fc = rng.uniform(0.8, 1.2);
        const double fs = rng.uniform(0.8, 1.2);
        const double mean = out.image.mean();
        for (long p = 0; p < static_cast<long>(h) * w; ++p) {
            double* px = out.image.data() + p * 3;
            const double gray = (px[0] + px[1] + px[2]) / 3.0;
            for (int ch = 0; ch < 3; ++ch) {
                double v = px[ch] * fb;                 // brightness
                v = mean + fc * (v - mean);             // contrast about the image mean
                v = gray * fb + fs * (v - gray * fb);   // saturation about the pixel gray
                px[ch] = std::min(1.0, std::max(0.0, v));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// TrainDataset
// ---------------------------------------------------------------------------

TrainDataset TrainDataset::load(const std::filesystem::path& root) {
    const DatasetManifest m = read_manifest(root);
    std::vector<Sample> source, target;
    source.reserve(static_cast<std::size_t>(m.count_source));
    target.reserve(static_cast<std::size_t>(m.count_target));
    for (int i = 0; i < m.count_source; ++i) source.push_back(load_sample(root, m, Domain::source, i));
    for (int i = 0; i < m.count_target; ++i) target.push_back(load_sample(root, m, Domain::target, i));
    return from_samples(std::move(source), std::move(target), m.spec.classes);
}

TrainDataset TrainDataset::from_samples(std::vector<Sample> source, std::vector<Sample> target,
                                        int classes) {
    if (source.empty()) throw std::invalid_argument("dataset: needs at least one source sample");
    TrainDataset d;
    d.classes_ = classes;
    d.height_ = source.front().labels.rows;
    d.width_ = source.front().labels.cols;
    d.source_ = std::move(source);
    d.target_ = std::move(target);
    d.tail_ids_ = tail_classes(class_pixel_shares(d.source_, classes));
    return d;
}

const LabelMap& TrainDataset::target_labels_for_eval(int i) const {
    ++label_reads_;
    return target_[static_cast<std::size_t>(i)].labels;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'S', 'P', 'C', 'L', '1'};

template <typename T>
void write_raw(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_raw(std::istream& in, const char* field) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error(std::string("checkpoint: truncated ") + field);
    return v;
}

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& e : ckpt.entries) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<long>(e.name.size()));
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (int ext : e.shape) write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ext));
        write_raw<std::uint64_t>(out, static_cast<std::uint64_t>(e.data.size()));
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<long>(e.data.size()) * 8);
    }
    std::ostringstream meta;
    meta << "version = " << ckpt.version << "\n";
    meta << "iteration = " << ckpt.iteration << "\n";
    meta << "stage = " << ckpt.stage << "\n";
    meta << "seed = " << ckpt.seed << "\n";
    meta << "config_hash = " << ckpt.config_hash << "\n";
    const std::string m = meta.str();
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
    out.write(m.data(), static_cast<long>(m.size()));
    if (!out) throw std::runtime_error("short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
    char magic[5] = {};
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw std::runtime_error("checkpoint: bad magic, expected SPCL1");
    }
    Checkpoint ckpt;
    const auto n = read_raw<std::uint32_t>(in, "entry count");
    ckpt.entries.resize(n);
    for (auto& e : ckpt.entries) {
        const auto name_len = read_raw<std::uint32_t>(in, "name length");
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        const auto rank = read_raw<std::uint32_t>(in, "rank");
        e.shape.resize(rank);
        for (auto& ext : e.shape) ext = static_cast<int>(read_raw<std::uint32_t>(in, "extent"));
        const auto count = read_raw<std::uint64_t>(in, "element count");
        if (static_cast<long>(count) != shape_count(e.shape)) {
            throw std::runtime_error("checkpoint: element count disagrees with shape for " +
                                     e.name);
        }
        e.data.resize(static_cast<long>(count));
        in.read(reinterpret_cast<char*>(e.data.data()), static_cast<long>(count) * 8);
        if (!in) throw std::runtime_error("checkpoint: truncated data for " + e.name);
    }
    const auto meta_len = read_raw<std::uint32_t>(in, "metadata length");
    std::string meta(meta_len, '\0');
    in.read(meta.data(), meta_len);
    if (!in) throw std::runtime_error("checkpoint: truncated metadata");
    std::istringstream ms(meta);
    std::string line;
    bool have_version = false;
    while (std::getline(ms, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), val = line.substr(eq + 3);
        if (key == "version") {
            ckpt.version = std::stoi(val);
            have_version = true;
        } else if (key == "iteration") {
            ckpt.iteration = std::stol(val);
        } else if (key == "stage") {
            ckpt.stage = val;
        } else if (key == "seed") {
            ckpt.seed = std::stoull(val);
        } else if (key == "config_hash") {
            ckpt.config_hash = std::stoull(val);
        }
    }
    if (!have_version) throw std::runtime_error("checkpoint: metadata missing version");
    if (ckpt.version != 1) {
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(ckpt.version));
    }
    return ckpt;
}

SegModel model_from_checkpoint(const Checkpoint& ckpt) {
    const CheckpointEntry* enc3 = ckpt.find("model/enc3.kernel");
    const CheckpointEntry* dec = ckpt.find("model/dec.kernel");
    if (!enc3 || !dec || enc3->shape.size() != 4 || dec->shape.size() != 4) {
        throw std::runtime_error("checkpoint: missing or malformed model kernels");
    }
    SegModel model(enc3->shape[3], dec->shape[3]);
    for (auto& [name, p] : model.parameters()) {
        const CheckpointEntry* e = ckpt.find("model/" + name);
        if (!e) throw std::runtime_error("checkpoint: missing parameter " + name);
        if (e->shape != p.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
        Tensor t = p;
        t.values() = e->data;
    }
    return model;
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

std::string metrics_csv_header() {
    return "stage,iter,split,miou,miou_tail,loss_seg,loss_cl_s,loss_cl_t,lr\n";
}

std::string metrics_csv_row(const MetricsRow& r) {
    std::ostringstream os;
    os << r.stage << "," << r.iter << "," << r.split << "," << fmt17(r.miou) << ","
       << fmt17(r.miou_tail) << "," << fmt17(r.loss_seg) << "," << fmt17(r.loss_cl_s) << ","
       << fmt17(r.loss_cl_t) << "," << fmt17(r.lr) << "\n";
    return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << metrics_csv_header();
    for (const auto& r : rows) out << metrics_csv_row(r);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

LabelMap predict_labels(const SegModel& model, const Eigen::ArrayXd& image, int h, int w) {
    Tensor probs = forward_probs(model, image_tensor(image, h, w));
    return argmax_labels(probs.values(), h, w, model.num_classes);
}

MetricReport evaluate_split(const SegModel& model, const TrainDataset& data, Domain split) {
    ConfusionMatrix cm(data.classes());
    const int n = split == Domain::source ? data.n_source() : data.n_target();
    for (int i = 0; i < n; ++i) {
        const Eigen::ArrayXd& img =
            split == Domain::source ? data.source(i).image : data.target_image(i);
        const LabelMap& gt =
            split == Domain::source ? data.source(i).labels : data.target_labels_for_eval(i);
        cm.accumulate(predict_labels(model, img, data.height(), data.width()), gt);
    }
    return make_report(cm, data.tail_ids());
}

std::vector<std::vector<Eigen::VectorXd>> collect_class_features(const SegModel& model,
                                                                 const TrainDataset& data,
                                                                 Domain split, int max_images) {
    std::vector<std::vector<Eigen::VectorXd>> by_class(static_cast<std::size_t>(data.classes()));
    const int total = split == Domain::source ? data.n_source() : data.n_target();
    const int n = std::min(total, max_images);
    const double eps = 1e-12;
    for (int i = 0; i < n; ++i) {
        const Eigen::ArrayXd& img =
            split == Domain::source ? data.source(i).image : data.target_image(i);
        const LabelMap& labels =
            split == Domain::source ? data.source(i).labels : data.target_labels_for_eval(i);
        Tensor f = forward_features(model, image_tensor(img, data.height(), data.width()));
        const Mask mask = downsample_labels(labels, 4);
        const int fh = f.dim(0), fw = f.dim(1), fd = f.dim(2);
        for (long p = 0; p < static_cast<long>(fh) * fw; ++p) {
            const std::uint8_t cls = mask.v[static_cast<std::size_t>(p)];
            if (cls == kIgnoreLabel || cls >= data.classes()) continue;
            Eigen::VectorXd v = f.values().segment(p * fd, fd).matrix();
            v /= std::sqrt(v.squaredNorm() + eps * eps);
            by_class[cls].push_back(std::move(v));
        }
    }
    return by_class;
}

Eigen::MatrixXd feature_centroids(const std::vector<std::vector<Eigen::VectorXd>>& by_class,
                                  int feature_dim) {
    Eigen::MatrixXd mu =
        Eigen::MatrixXd::Zero(static_cast<long>(by_class.size()), feature_dim);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].empty()) continue;
        Eigen::VectorXd m = Eigen::VectorXd::Zero(feature_dim);
        for (const auto& v : by_class[c]) m += v;
        m /= static_cast<double>(by_class[c].size());
        const double n = m.norm();
        if (n > 0.0) mu.row(static_cast<long>(c)) = m.transpose() / n;
    }
    return mu;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(TrainDataset& data, TrainConfig cfg)
    : data_(data), cfg_(cfg), model_(cfg.feature_dim, data.classes()) {
    cfg_.validate();
    bank_ = PrototypeBank(data.classes(), cfg_.feature_dim, cfg_.alpha);
    for (auto& [name, p] : model_.parameters()) {
        momentum_.push_back(Eigen::ArrayXd::Zero(p.size()));
    }
}

RandomStream Trainer::batch_stream(std::uint64_t seed, char stage, long iter, int half) {
    return RandomStream(seed, kBatchTag << 8 | static_cast<std::uint64_t>(stage),
                        static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(half));
}

RandomStream Trainer::aug_stream(std::uint64_t seed, char stage, long iter, int slot) {
    return RandomStream(seed, kAugTag << 8 | static_cast<std::uint64_t>(stage),
                        static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(slot));
}

void Trainer::init_fresh() {
    init_params(model_, cfg_.seed);
    for (auto& b : momentum_) b.setZero();
    bank_ = PrototypeBank(data_.classes(), cfg_.feature_dim, cfg_.alpha);
    sigma_o_ = Thresholds{};
    pseudo_.clear();
    pseudo_coverage_ = 0.0;
    stage_ = "A";
    iter_ = 0;
    log_.clear();
}

long Trainer::global_iter() const {
    if (stage_ == "A") return iter_;
    if (stage_ == "B") return cfg_.iters_a + iter_;
    return cfg_.iters_a + cfg_.iters_b + iter_;
}

std::vector<Tensor> Trainer::target_image_tensors() const {
    std::vector<Tensor> imgs;
    imgs.reserve(static_cast<std::size_t>(data_.n_target()));
    for (int i = 0; i < data_.n_target(); ++i) {
        imgs.push_back(image_tensor(data_.target_image(i), data_.height(), data_.width()));
    }
    return imgs;
}

void Trainer::initialize_bank_from_source() {
    bank_ = PrototypeBank(data_.classes(), cfg_.feature_dim, cfg_.alpha);
    initialize_bank(bank_,
                    [&](int i) {
                        const Sample& s = data_.source(i);
                        Tensor f = forward_features(
                            model_, image_tensor(s.image, data_.height(), data_.width()));
                        return std::make_pair(f, downsample_labels(s.labels, 4));
                    },
                    data_.n_source());
    if (!bank_.any_initialized()) {
        throw std::runtime_error("prototype bank: no class present in the source set");
    }
}

void Trainer::eval_and_log(double lr) {
    for (Domain split : {Domain::source, Domain::target}) {
        if (split == Domain::target && data_.n_target() == 0) continue;
        MetricReport rep = evaluate_split(model_, data_, split);
        MetricsRow row;
        row.stage = stage_;
        row.iter = iter_;
        row.split = std::string(domain_name(split));
        row.miou = rep.miou;
        row.miou_tail = rep.miou_tail;
        row.loss_seg = last_seg_;
        row.loss_cl_s = last_cl_s_;
        row.loss_cl_t = last_cl_t_;
        row.lr = lr;
        log_.push_back(std::move(row));
    }
}

void Trainer::maybe_eval(double lr) {
    if (cfg_.eval_every <= 0) return;
    const long budget = stage_ == "A" ? cfg_.iters_a : stage_ == "B" ? cfg_.iters_b : cfg_.iters_c;
    if (iter_ % cfg_.eval_every == 0 || iter_ == budget) eval_and_log(lr);
}

namespace {

struct ParamStep {
    // Applies one SGD step over all parameters and clears their grads.
    static void apply(const SegModel& model, std::vector<Eigen::ArrayXd>& momentum, double lr,
                      double mu, double wd) {
        auto params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor p = params[i].second;
            sgd_update(p.values(), p.grad(), momentum[i], lr, mu, wd);
            p.zero_grad();
        }
    }
};

}  // namespace

bool Trainer::run_stage_a() {
    if (stage_ != "A") throw std::logic_error("run_stage_a: trainer is in stage " + stage_);
    while (iter_ < cfg_.iters_a) {
        if (halt_ > 0 && global_iter() >= halt_) return false;
        const double lr = poly_lr(iter_, cfg_.iters_a, cfg_.lr0, cfg_.poly_power);
        RandomStream bs = batch_stream(cfg_.seed, 'A', iter_, 0);
        std::vector<Sample> batch;
        for (int b = 0; b < cfg_.batch_source; ++b) {
            RandomStream as = aug_stream(cfg_.seed, 'A', iter_, b);
            batch.push_back(augment_sample(data_.source(bs.uniform_int(data_.n_source())), as,
                                           cfg_.aug_flip, cfg_.aug_jitter));
        }
        {
            Tape tape;
            Tensor sum = Tensor::scalar(0.0);
            for (const Sample& s : batch) {
                Tensor probs =
                    forward_probs(model_, image_tensor(s.image, data_.height(), data_.width()));
                sum = add(sum, segmentation_loss(probs, s.labels));
            }
            Tensor loss = scale(sum, 1.0 / cfg_.batch_source);
            last_seg_ = loss.value();
            last_cl_s_ = last_cl_t_ = 0.0;
            tape.backward(loss);
        }
        ParamStep::apply(model_, momentum_, lr, cfg_.momentum, cfg_.weight_decay);
        ++iter_;
        maybe_eval(lr);
    }
    return true;
}

bool Trainer::run_stage_b() {
    if (stage_ == "A") {
        if (iter_ != cfg_.iters_a) throw std::logic_error("run_stage_b: stage A incomplete");
        stage_ = "B";
        iter_ = 0;
    }
    if (stage_ != "B") throw std::logic_error("run_stage_b: trainer is in stage " + stage_);
    if (data_.n_target() < 1) throw std::runtime_error("stage B requires target samples");
    if (iter_ == 0) initialize_bank_from_source();
    if (!bank_.any_initialized()) {
        throw std::runtime_error("stage B: prototype bank has no initialized class");
    }
    const ContrastiveConfig ccfg{cfg_.tau, cfg_.lambda};

    while (iter_ < cfg_.iters_b) {
        if (halt_ > 0 && global_iter() >= halt_) return false;
        if (iter_ % cfg_.threshold_refresh == 0) {
            sigma_o_ = calibrate_thresholds(model_, target_image_tensors(), ThresholdSpace::feature);
        }
        const double lr = poly_lr(iter_, cfg_.iters_b, cfg_.lr0, cfg_.poly_power);

        RandomStream src_stream = batch_stream(cfg_.seed, 'B', iter_, 0);
        RandomStream tgt_stream = batch_stream(cfg_.seed, 'B', iter_, 1);
        std::vector<Sample> src_batch;
        for (int b = 0; b < cfg_.batch_source; ++b) {
            RandomStream as = aug_stream(cfg_.seed, 'B', iter_, b);
            src_batch.push_back(augment_sample(data_.source(src_stream.uniform_int(data_.n_source())),
                                               as, cfg_.aug_flip, cfg_.aug_jitter));
        }
        std::vector<Sample> tgt_batch;
        for (int b = 0; b < cfg_.batch_target; ++b) {
            Sample t;
            t.image = data_.target_image(tgt_stream.uniform_int(data_.n_target()));
            t.labels = LabelMap(data_.height(), data_.width(), 0);  // placeholder, unused
            t.domain = Domain::target;
            RandomStream as = aug_stream(cfg_.seed, 'B', iter_, cfg_.batch_source + b);
            tgt_batch.push_back(augment_sample(t, as, cfg_.aug_flip, cfg_.aug_jitter));
        }

        std::vector<Tensor> bank_feats;
        std::vector<Mask> bank_masks;
        {
            Tape tape;
            Tensor seg_sum = Tensor::scalar(0.0);
            Tensor cls_sum = Tensor::scalar(0.0);
            Tensor clt_sum = Tensor::scalar(0.0);
            long cls_pixels = 0, clt_pixels = 0;
            for (const Sample& s : src_batch) {
                ForwardMaps fwd =
                    forward_all(model_, image_tensor(s.image, data_.height(), data_.width()));
                const Mask mask = downsample_labels(s.labels, 4);
                seg_sum = add(seg_sum, segmentation_loss(fwd.probs, s.labels));
                if (cfg_.use_cl_s) {
                    ContrastiveTerms t = contrastive_terms(fwd.features, mask, bank_, ccfg);
                    if (t.pixels > 0) {
                        cls_sum = add(cls_sum, t.sum);
                        cls_pixels += t.pixels;
                    }
                }
                bank_feats.push_back(fwd.features);
                bank_masks.push_back(mask);
            }
            for (const Sample& s : tgt_batch) {
                if (!cfg_.use_cl_t) break;
                ForwardMaps fwd =
                    forward_all(model_, image_tensor(s.image, data_.height(), data_.width()));
                const Mask mask = target_mask(channel_softmax(detach(fwd.scores)), sigma_o_);
                ContrastiveTerms t = contrastive_terms(fwd.features, mask, bank_, ccfg);
                if (t.pixels > 0) {
                    clt_sum = add(clt_sum, t.sum);
                    clt_pixels += t.pixels;
                }
            }
            Tensor seg = scale(seg_sum, 1.0 / cfg_.batch_source);
            Tensor cl_s = cls_pixels ? scale(cls_sum, 1.0 / static_cast<double>(cls_pixels))
                                     : Tensor::scalar(0.0);
            Tensor cl_t = clt_pixels ? scale(clt_sum, 1.0 / static_cast<double>(clt_pixels))
                                     : Tensor::scalar(0.0);
            Tensor loss = total_loss(seg, cl_s, cl_t, cfg_.lambda);
            last_seg_ = seg.value();
            last_cl_s_ = cl_s.value();
            last_cl_t_ = cl_t.value();
            tape.backward(loss);
        }
        ParamStep::apply(model_, momentum_, lr, cfg_.momentum, cfg_.weight_decay);
        // Bank EMA after the optimizer step, source half only, batch order.
        for (std::size_t i = 0; i < bank_feats.size(); ++i) {
            bank_.update(bank_feats[i], bank_masks[i]);
        }
        ++iter_;
        maybe_eval(lr);
    }
    return true;
}

bool Trainer::run_stage_c() {
    if (stage_ == "B") {
        if (iter_ != cfg_.iters_b) throw std::logic_error("run_stage_c: stage B incomplete");
        stage_ = "C";
        iter_ = 0;
    }
    if (stage_ != "C") throw std::logic_error("run_stage_c: trainer is in stage " + stage_);
    if (data_.n_target() < 1) throw std::runtime_error("stage C requires target samples");

    if (pseudo_.empty()) {
        const Thresholds sigma_p =
            calibrate_thresholds(model_, target_image_tensors(), ThresholdSpace::output);
        long valid = 0, total = 0;
        for (int i = 0; i < data_.n_target(); ++i) {
            Tensor probs = forward_probs(
                model_, image_tensor(data_.target_image(i), data_.height(), data_.width()));
            pseudo_.push_back(pseudo_labels(probs, sigma_p));
            for (std::uint8_t v : pseudo_.back().v) valid += v != kIgnoreLabel;
            total += pseudo_.back().size();
        }
        pseudo_coverage_ = static_cast<double>(valid) / static_cast<double>(total);
        if (valid == 0) {
            pseudo_.clear();
            throw std::runtime_error("stage C: every pseudo label is ignored, nothing to train on");
        }
    }

    while (iter_ < cfg_.iters_c) {
        if (halt_ > 0 && global_iter() >= halt_) return false;
        const double lr = poly_lr(iter_, cfg_.iters_c, cfg_.lr0, cfg_.poly_power);
        RandomStream ts = batch_stream(cfg_.seed, 'C', iter_, 1);
        std::vector<Sample> batch;
        for (int b = 0; b < cfg_.batch_target; ++b) {
            const int idx = ts.uniform_int(data_.n_target());
            Sample s;
            s.image = data_.target_image(idx);
            s.labels = pseudo_[static_cast<std::size_t>(idx)];
            s.domain = Domain::target;
            RandomStream as = aug_stream(cfg_.seed, 'C', iter_, b);
            batch.push_back(augment_sample(s, as, cfg_.aug_flip, cfg_.aug_jitter));
        }
        {
            Tape tape;
            Tensor sum = Tensor::scalar(0.0);
            long pixels = 0;
            for (const Sample& s : batch) {
                long count = 0;
                for (std::uint8_t v : s.labels.v) count += v != kIgnoreLabel;
                if (count == 0) continue;
                Tensor probs =
                    forward_probs(model_, image_tensor(s.image, data_.height(), data_.width()));
                sum = add(sum, scale(self_training_loss(probs, s.labels),
                                     static_cast<double>(count)));
                pixels += count;
            }
            Tensor loss =
                pixels ? scale(sum, 1.0 / static_cast<double>(pixels)) : Tensor::scalar(0.0);
            last_seg_ = loss.value();
            last_cl_s_ = last_cl_t_ = 0.0;
            tape.backward(loss);
        }
        ParamStep::apply(model_, momentum_, lr, cfg_.momentum, cfg_.weight_decay);
        ++iter_;
        maybe_eval(lr);
    }
    return true;
}

// ---------------------------------------------------------------------------
// Checkpoint round-trip
// ---------------------------------------------------------------------------

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.stage = stage_;
    c.iteration = iter_;
    c.seed = cfg_.seed;
    c.config_hash = cfg_.hash();

    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& p = params[i].second;
        c.entries.push_back({"model/" + params[i].first, p.shape(), p.values()});
        c.entries.push_back({"opt/" + params[i].first, p.shape(), momentum_[i]});
    }
    {
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm =
            bank_.prototypes();
        Eigen::ArrayXd flat = Eigen::Map<Eigen::ArrayXd>(rm.data(), rm.size());
        c.entries.push_back(
            {"bank/mu", {bank_.classes(), bank_.feature_dim()}, std::move(flat)});
        Eigen::ArrayXd flags(bank_.classes());
        for (int k = 0; k < bank_.classes(); ++k) flags[k] = bank_.initialized(k) ? 1.0 : 0.0;
        c.entries.push_back({"bank/initialized", {bank_.classes()}, std::move(flags)});
        c.entries.push_back({"bank/alpha", {1}, Eigen::ArrayXd::Constant(1, bank_.alpha())});
    }
    if (sigma_o_.sigma.size() > 0) {
        c.entries.push_back({"cal/sigma_o", {static_cast<int>(sigma_o_.sigma.size())},
                             sigma_o_.sigma.array()});
    }
    for (std::size_t i = 0; i < pseudo_.size(); ++i) {
        const PseudoLabelMap& m = pseudo_[i];
        Eigen::ArrayXd flat(m.size());
        for (long p = 0; p < m.size(); ++p) flat[p] = m.v[static_cast<std::size_t>(p)];
        c.entries.push_back(
            {"pseudo/" + std::to_string(i), {m.rows, m.cols}, std::move(flat)});
    }
    return c;
}

void Trainer::restore(const Checkpoint& c) {
    if (c.config_hash != cfg_.hash()) {
        throw std::runtime_error("checkpoint: config_hash does not match the active config");
    }
    if (c.stage != "A" && c.stage != "B" && c.stage != "C") {
        throw std::runtime_error("checkpoint: unknown stage tag '" + c.stage + "'");
    }
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params[i];
        const CheckpointEntry* ep = c.find("model/" + name);
        const CheckpointEntry* eo = c.find("opt/" + name);
        if (!ep || !eo) throw std::runtime_error("checkpoint: missing parameter " + name);
        if (ep->shape != p.shape()) {
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        }
        Tensor t = p;
        t.values() = ep->data;
        t.zero_grad();
        momentum_[i] = eo->data;
    }
    const CheckpointEntry* mu = c.find("bank/mu");
    const CheckpointEntry* flags = c.find("bank/initialized");
    const CheckpointEntry* alpha = c.find("bank/alpha");
    if (!mu || !flags || !alpha) throw std::runtime_error("checkpoint: missing bank state");
    {
        const int C = mu->shape[0], N = mu->shape[1];
        Eigen::MatrixXd m(C, N);
        for (int r = 0; r < C; ++r)
            for (int k = 0; k < N; ++k) m(r, k) = mu->data[static_cast<long>(r) * N + k];
        std::vector<std::uint8_t> f(static_cast<std::size_t>(C));
        for (int r = 0; r < C; ++r) f[static_cast<std::size_t>(r)] = flags->data[r] != 0.0;
        bank_ = PrototypeBank(C, N, alpha->data[0]);
        bank_.restore(std::move(m), std::move(f), alpha->data[0]);
    }
    sigma_o_ = Thresholds{};
    if (const CheckpointEntry* so = c.find("cal/sigma_o")) {
        sigma_o_.sigma = so->data.matrix();
        sigma_o_.space = ThresholdSpace::feature;
    }
    pseudo_.clear();
    pseudo_coverage_ = 0.0;
    for (int i = 0; c.find("pseudo/" + std::to_string(i)) != nullptr; ++i) {
        const CheckpointEntry* e = c.find("pseudo/" + std::to_string(i));
        PseudoLabelMap m(e->shape[0], e->shape[1]);
        for (long p = 0; p < m.size(); ++p)
            m.v[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(e->data[p]);
        pseudo_.push_back(std::move(m));
    }
    if (!pseudo_.empty()) {
        long valid = 0, total = 0;
        for (const auto& m : pseudo_) {
            for (std::uint8_t v : m.v) valid += v != kIgnoreLabel;
            total += m.size();
        }
        pseudo_coverage_ = static_cast<double>(valid) / static_cast<double>(total);
    }
    stage_ = c.stage;
    iter_ = c.iteration;
    log_.clear();
}

}  // namespace spcl
