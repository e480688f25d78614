#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace spcl {

using Shape = std::vector<int>;

long shape_count(const Shape& s);
std::string shape_str(const Shape& s);

/// Shared storage behind a Tensor handle. Values are row-major with the
/// last axis fastest (images are H x W x C, so per-pixel channel vectors
/// are contiguous).
struct TensorData {
    Shape shape;
    Eigen::ArrayXd values;
    Eigen::ArrayXd grad;  // size 0 until first touched
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, Eigen::ArrayXd values, bool requires_grad = false);
    static Tensor from_values(Shape shape, const std::vector<double>& values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int dim(int axis) const { return d_->shape[static_cast<size_t>(axis)]; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    long size() const { return d_->values.size(); }

    Eigen::ArrayXd& values() { return d_->values; }
    const Eigen::ArrayXd& values() const { return d_->values; }

    /// Scalar read; tensor must hold exactly one element.
    double value() const;

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    /// Gradient buffer, allocated as zeros on first access.
    Eigen::ArrayXd& grad();
    bool has_grad() const { return d_->grad.size() > 0; }
    void zero_grad();

    const std::shared_ptr<TensorData>& data() const { return d_; }

private:
    std::shared_ptr<TensorData> d_;
};

/// Per-backward-pass adjoint buffers, keyed by tensor storage. Kept apart
/// from Tensor::grad so that repeated backward calls accumulate exactly
/// (grad += this pass's adjoint, once per tensor).
class AdjointStore {
public:
    const Eigen::ArrayXd* find(const TensorData* t) const;
    Eigen::ArrayXd& accum(const TensorData* t, long size);

private:
    std::unordered_map<const TensorData*, Eigen::ArrayXd> adj_;
};

/// Ordered record of executed operations. Constructing a Tape makes it the
/// active tape for the current thread; destruction restores the previous
/// one. Operations record themselves only while a tape is active and some
/// input requires gradients.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::vector<std::shared_ptr<TensorData>> parts,
                std::function<void(AdjointStore&)> backward);
    std::size_t size() const { return nodes_.size(); }

    /// Reverse replay from a scalar root. Seeds the root adjoint with 1,
    /// visits recorded operations in exact reverse execution order, then
    /// adds each requires_grad tensor's adjoint into its grad buffer.
    void backward(const Tensor& root);

private:
    struct Node {
        std::vector<std::shared_ptr<TensorData>> parts;
        std::function<void(AdjointStore&)> fn;
    };
    std::vector<Node> nodes_;
    Tape* prev_;
    static thread_local Tape* active_;
};

/// backward on the active tape; throws if none is active.
void backward(const Tensor& root);

// ---------------------------------------------------------------------------
// Differentiable operations. Forward values are computed eagerly; when a
// tape is active and an input requires gradients, a backward node is
// recorded. Prototype/constant inputs simply carry requires_grad = false.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2-D convolution over an H x W x Cin input with a k x k x Cin x Cout
/// kernel. k must be odd, stride 1 or 2, padding (k-1)/2, so the output is
/// ceil(H/stride) x ceil(W/stride) x Cout.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

/// Adds a per-channel bias vector b (shape {C}) over every pixel.
Tensor bias_add(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);

/// Softmax over the last axis, per pixel.
Tensor channel_softmax(const Tensor& x);

/// Per-pixel v -> v / sqrt(|v|^2 + eps^2) over the last axis. Zero vectors
/// map to the zero vector.
Tensor l2_normalize_channels(const Tensor& x, double eps = 1e-12);

/// Bilinear upsampling of an H x W x C map by an integer factor
/// (half-pixel sampling, edges clamped).
Tensor bilinear_upsample(const Tensor& x, int factor);

/// Sum / mean over the given axes (empty = all axes, yielding shape {1}).
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes = {});
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes = {});

/// Value copy cut off from the tape (requires_grad = false).
Tensor detach(const Tensor& x);

}  // namespace spcl
