#include "spcl/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace spcl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace

long shape_count(const Shape& s) {
    long n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto d = std::make_shared<TensorData>();
    d->values = Eigen::ArrayXd::Zero(shape_count(shape));
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto d = std::make_shared<TensorData>();
    d->values = Eigen::ArrayXd::Constant(shape_count(shape), value);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::from_values(Shape shape, Eigen::ArrayXd values, bool requires_grad) {
    if (values.size() != shape_count(shape)) {
        throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(shape));
    }
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(values);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, bool requires_grad) {
    Eigen::ArrayXd v = Eigen::Map<const Eigen::ArrayXd>(values.data(),
                                                        static_cast<long>(values.size()));
    return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

double Tensor::value() const {
    if (d_->values.size() != 1) {
        throw std::logic_error("Tensor::value: tensor has " + std::to_string(d_->values.size()) +
                               " elements, expected 1");
    }
    return d_->values[0];
}

Eigen::ArrayXd& Tensor::grad() {
    if (d_->grad.size() == 0) d_->grad = Eigen::ArrayXd::Zero(d_->values.size());
    return d_->grad;
}

void Tensor::zero_grad() {
    if (d_->grad.size() > 0) d_->grad.setZero();
}

// ---------------------------------------------------------------------------
// AdjointStore / Tape
// ---------------------------------------------------------------------------

const Eigen::ArrayXd* AdjointStore::find(const TensorData* t) const {
    auto it = adj_.find(t);
    return it == adj_.end() ? nullptr : &it->second;
}

Eigen::ArrayXd& AdjointStore::accum(const TensorData* t, long size) {
    auto it = adj_.find(t);
    if (it == adj_.end()) it = adj_.emplace(t, Eigen::ArrayXd::Zero(size)).first;
    return it->second;
}

thread_local Tape* Tape::active_ = nullptr;

Tape::Tape() : prev_(active_) { active_ = this; }

Tape::~Tape() { active_ = prev_; }

Tape* Tape::active() { return active_; }

void Tape::record(std::vector<std::shared_ptr<TensorData>> parts,
                  std::function<void(AdjointStore&)> backward) {
    nodes_.push_back(Node{std::move(parts), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
    if (!root.defined() || root.size() != 1) {
        throw std::invalid_argument("backward: root must be a scalar tensor");
    }
    AdjointStore adj;
    adj.accum(root.data().get(), 1)[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn(adj);

    // grad += adjoint, once per distinct requires_grad tensor on the tape.
    std::unordered_set<TensorData*> seen;
    auto write_back = [&](const std::shared_ptr<TensorData>& t) {
        if (!t->requires_grad || !seen.insert(t.get()).second) return;
        if (const Eigen::ArrayXd* a = adj.find(t.get())) {
            if (t->grad.size() == 0) t->grad = Eigen::ArrayXd::Zero(t->values.size());
            t->grad += *a;
        }
    };
    write_back(root.data());
    for (const Node& n : nodes_)
        for (const auto& t : n.parts) write_back(t);
}

void backward(const Tensor& root) {
    Tape* t = Tape::active();
    if (t == nullptr) throw std::logic_error("backward: no active tape");
    t->backward(root);
}

// ---------------------------------------------------------------------------
// Elementwise and linear ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::from_values(a.shape(), a.values() + b.values());
    if (grad_enabled({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        Tape::active()->record({ad, bd, od}, [ad, bd, od](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            if (ad->requires_grad) adj.accum(ad.get(), ad->values.size()) += *go;
            if (bd->requires_grad) adj.accum(bd.get(), bd->values.size()) += *go;
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::from_values(a.shape(), a.values() * b.values());
    if (grad_enabled({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        Tape::active()->record({ad, bd, od}, [ad, bd, od](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            if (ad->requires_grad) adj.accum(ad.get(), ad->values.size()) += *go * bd->values;
            if (bd->requires_grad) adj.accum(bd.get(), bd->values.size()) += *go * ad->values;
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double s) {
    Tensor out = Tensor::from_values(x.shape(), x.values() * s);
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        Tape::active()->record({xd, od}, [xd, od, s](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            adj.accum(xd.get(), xd->values.size()) += *go * s;
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw std::invalid_argument("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    {
        MapConstMat A(a.values().data(), m, k), B(b.values().data(), k, n);
        MapMat(out.values().data(), m, n) = A * B;
    }
    if (grad_enabled({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        Tape::active()->record({ad, bd, od}, [ad, bd, od, m, k, n](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            MapConstMat G(go->data(), m, n);
            if (ad->requires_grad) {
                MapConstMat B(bd->values.data(), k, n);
                MapMat(adj.accum(ad.get(), ad->values.size()).data(), m, k) += G * B.transpose();
            }
            if (bd->requires_grad) {
                MapConstMat A(ad->values.data(), m, k);
                MapMat(adj.accum(bd.get(), bd->values.size()).data(), k, n) += A.transpose() * G;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: im2col + GEMM. Patch rows are ordered (ki, kj, ci) so the kernel
// reshapes to (k*k*Cin) x Cout without copying.
// ---------------------------------------------------------------------------

namespace {

RowMat im2col(const Eigen::ArrayXd& in, int h, int w, int cin, int k, int stride, int pad, int ho,
              int wo) {
    RowMat patches = RowMat::Zero(static_cast<long>(ho) * wo, static_cast<long>(k) * k * cin);
    for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
            double* row = patches.row(static_cast<long>(oh) * wo + ow).data();
            for (int ki = 0; ki < k; ++ki) {
                const int ih = oh * stride - pad + ki;
                if (ih < 0 || ih >= h) continue;
                for (int kj = 0; kj < k; ++kj) {
                    const int iw = ow * stride - pad + kj;
                    if (iw < 0 || iw >= w) continue;
                    const double* src = in.data() + (static_cast<long>(ih) * w + iw) * cin;
                    double* dst = row + (static_cast<long>(ki) * k + kj) * cin;
                    for (int c = 0; c < cin; ++c) dst[c] = src[c];
                }
            }
        }
    }
    return patches;
}

void col2im_add(const RowMat& pg, Eigen::ArrayXd& din, int h, int w, int cin, int k, int stride,
                int pad, int ho, int wo) {
    for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
            const double* row = pg.row(static_cast<long>(oh) * wo + ow).data();
            for (int ki = 0; ki < k; ++ki) {
                const int ih = oh * stride - pad + ki;
                if (ih < 0 || ih >= h) continue;
                for (int kj = 0; kj < k; ++kj) {
                    const int iw = ow * stride - pad + kj;
                    if (iw < 0 || iw >= w) continue;
                    double* dst = din.data() + (static_cast<long>(ih) * w + iw) * cin;
                    const double* src = row + (static_cast<long>(ki) * k + kj) * cin;
                    for (int c = 0; c < cin; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    if (input.rank() != 3 || kernel.rank() != 4) {
        throw std::invalid_argument("conv2d: expects H x W x Cin input and k x k x Cin x Cout "
                                    "kernel, got " +
                                    shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
    }
    const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    const int k = kernel.dim(0), cout = kernel.dim(3);
    if (kernel.dim(1) != k) throw std::invalid_argument("conv2d: kernel must be square");
    if (kernel.dim(2) != cin) {
        throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                                    " input channels, input has " + std::to_string(cin));
    }
    if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel extent must be odd");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    if (padding != (k - 1) / 2) {
        throw std::invalid_argument("conv2d: padding must be (k-1)/2 = " +
                                    std::to_string((k - 1) / 2));
    }
    const int ho = (h + 2 * padding - k) / stride + 1;
    const int wo = (w + 2 * padding - k) / stride + 1;

    auto patches = std::make_shared<RowMat>(im2col(input.values(), h, w, cin, k, stride, padding,
                                                   ho, wo));
    Tensor out = Tensor::zeros({ho, wo, cout});
    {
        MapConstMat K(kernel.values().data(), static_cast<long>(k) * k * cin, cout);
        MapMat(out.values().data(), static_cast<long>(ho) * wo, cout) = *patches * K;
    }
    if (grad_enabled({&input, &kernel})) {
        out.set_requires_grad(true);
        auto id = input.data(), kd = kernel.data(), od = out.data();
        Tape::active()->record(
            {id, kd, od},
            [id, kd, od, patches, h, w, cin, k, cout, stride, padding, ho, wo](AdjointStore& adj) {
                const Eigen::ArrayXd* go = adj.find(od.get());
                if (!go) return;
                MapConstMat G(go->data(), static_cast<long>(ho) * wo, cout);
                if (kd->requires_grad) {
                    MapMat KG(adj.accum(kd.get(), kd->values.size()).data(),
                              static_cast<long>(k) * k * cin, cout);
                    KG += patches->transpose() * G;
                }
                if (id->requires_grad) {
                    MapConstMat K(kd->values.data(), static_cast<long>(k) * k * cin, cout);
                    RowMat pg = G * K.transpose();
                    col2im_add(pg, adj.accum(id.get(), id->values.size()), h, w, cin, k, stride,
                               padding, ho, wo);
                }
            });
    }
    return out;
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
    if (x.rank() < 1 || b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0)) {
        throw std::invalid_argument("bias_add: bias " + shape_str(b.shape()) +
                                    " does not match last axis of " + shape_str(x.shape()));
    }
    const long c = b.size();
    const long pixels = x.size() / c;
    Tensor out = Tensor::zeros(x.shape());
    {
        MapConstMat X(x.values().data(), pixels, c);
        MapMat O(out.values().data(), pixels, c);
        O = X.rowwise() + Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), c);
    }
    if (grad_enabled({&x, &b})) {
        out.set_requires_grad(true);
        auto xd = x.data(), bd = b.data(), od = out.data();
        Tape::active()->record({xd, bd, od}, [xd, bd, od, pixels, c](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            if (xd->requires_grad) adj.accum(xd.get(), xd->values.size()) += *go;
            if (bd->requires_grad) {
                MapConstMat G(go->data(), pixels, c);
                Eigen::Map<Eigen::RowVectorXd>(adj.accum(bd.get(), c).data(), c) +=
                    G.colwise().sum();
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::from_values(x.shape(), x.values().max(0.0));
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        Tape::active()->record({xd, od}, [xd, od](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            adj.accum(xd.get(), xd->values.size()) += (xd->values > 0.0).cast<double>() * *go;
        });
    }
    return out;
}

Tensor log(const Tensor& x) {
    Tensor out = Tensor::from_values(x.shape(), x.values().log());
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        Tape::active()->record({xd, od}, [xd, od](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            adj.accum(xd.get(), xd->values.size()) += *go / xd->values;
        });
    }
    return out;
}

Tensor channel_softmax(const Tensor& x) {
    if (x.rank() < 1) throw std::invalid_argument("channel_softmax: rank-0 tensor");
    const long c = x.dim(x.rank() - 1);
    const long pixels = x.size() / c;
    Tensor out = Tensor::zeros(x.shape());
    for (long p = 0; p < pixels; ++p) {
        auto seg = x.values().segment(p * c, c);
        Eigen::ArrayXd e = (seg - seg.maxCoeff()).exp();
        out.values().segment(p * c, c) = e / e.sum();
    }
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        Tape::active()->record({xd, od}, [xd, od, pixels, c](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::ArrayXd& gx = adj.accum(xd.get(), xd->values.size());
            for (long p = 0; p < pixels; ++p) {
                auto y = od->values.segment(p * c, c);
                auto gy = go->segment(p * c, c);
                const double dot = (y * gy).sum();
                gx.segment(p * c, c) += y * (gy - dot);
            }
        });
    }
    return out;
}

Tensor l2_normalize_channels(const Tensor& x, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("l2_normalize_channels: eps must be positive");
    const long c = x.dim(x.rank() - 1);
    const long pixels = x.size() / c;
    Tensor out = Tensor::zeros(x.shape());
    Eigen::ArrayXd inv_norm(pixels);
    for (long p = 0; p < pixels; ++p) {
        auto v = x.values().segment(p * c, c);
        inv_norm[p] = 1.0 / std::sqrt(v.square().sum() + eps * eps);
        out.values().segment(p * c, c) = v * inv_norm[p];
    }
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        auto r = std::make_shared<Eigen::ArrayXd>(std::move(inv_norm));
        Tape::active()->record({xd, od}, [xd, od, r, pixels, c](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::ArrayXd& gx = adj.accum(xd.get(), xd->values.size());
            for (long p = 0; p < pixels; ++p) {
                auto v = xd->values.segment(p * c, c);
                auto gy = go->segment(p * c, c);
                const double ri = (*r)[p];
                const double dot = (v * gy).sum();
                gx.segment(p * c, c) += ri * gy - (ri * ri * ri * dot) * v;
            }
        });
    }
    return out;
}

Tensor bilinear_upsample(const Tensor& x, int factor) {
    if (x.rank() != 3) throw std::invalid_argument("bilinear_upsample: expects H x W x C");
    if (factor < 1) throw std::invalid_argument("bilinear_upsample: factor must be >= 1");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = h * factor, ow = w * factor;
    Tensor out = Tensor::zeros({oh, ow, c});

    // Half-pixel sample positions with edge clamping; each output pixel is a
    // convex blend of (up to) four input pixels.
    struct Tap {
        int h0, h1, w0, w1;
        double fh, fw;
    };
    std::vector<Tap> taps(static_cast<size_t>(oh) * ow);
    for (int i = 0; i < oh; ++i) {
        double sh = (i + 0.5) / factor - 0.5;
        sh = std::min(std::max(sh, 0.0), static_cast<double>(h - 1));
        const int h0 = static_cast<int>(std::floor(sh));
        const int h1 = std::min(h0 + 1, h - 1);
        for (int j = 0; j < ow; ++j) {
            double sw = (j + 0.5) / factor - 0.5;
            sw = std::min(std::max(sw, 0.0), static_cast<double>(w - 1));
            const int w0 = static_cast<int>(std::floor(sw));
            const int w1 = std::min(w0 + 1, w - 1);
            taps[static_cast<size_t>(i) * ow + j] = Tap{h0, h1, w0, w1, sh - h0, sw - w0};
        }
    }
    auto idx = [w, c](int i, int j) { return (static_cast<long>(i) * w + j) * c; };
    for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
            const Tap& t = taps[static_cast<size_t>(i) * ow + j];
            auto o = out.values().segment((static_cast<long>(i) * ow + j) * c, c);
            o = (1 - t.fh) * (1 - t.fw) * x.values().segment(idx(t.h0, t.w0), c) +
                (1 - t.fh) * t.fw * x.values().segment(idx(t.h0, t.w1), c) +
                t.fh * (1 - t.fw) * x.values().segment(idx(t.h1, t.w0), c) +
                t.fh * t.fw * x.values().segment(idx(t.h1, t.w1), c);
        }
    }
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        auto tp = std::make_shared<std::vector<Tap>>(std::move(taps));
        Tape::active()->record({xd, od}, [xd, od, tp, oh, ow, w, c](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::ArrayXd& gx = adj.accum(xd.get(), xd->values.size());
            auto idx = [w, c](int i, int j) { return (static_cast<long>(i) * w + j) * c; };
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    const Tap& t = (*tp)[static_cast<size_t>(i) * ow + j];
                    auto g = go->segment((static_cast<long>(i) * ow + j) * c, c);
                    gx.segment(idx(t.h0, t.w0), c) += (1 - t.fh) * (1 - t.fw) * g;
                    gx.segment(idx(t.h0, t.w1), c) += (1 - t.fh) * t.fw * g;
                    gx.segment(idx(t.h1, t.w0), c) += t.fh * (1 - t.fw) * g;
                    gx.segment(idx(t.h1, t.w1), c) += t.fh * t.fw * g;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

struct ReducePlan {
    Shape out_shape;
    std::vector<long> out_index;  // per input element, its output element
    long out_count;
};

ReducePlan plan_reduce(const Shape& shape, const std::vector<int>& axes) {
    const int rank = static_cast<int>(shape.size());
    std::vector<bool> reduced(static_cast<size_t>(rank), false);
    if (axes.empty()) {
        reduced.assign(static_cast<size_t>(rank), true);
    } else {
        for (int a : axes) {
            if (a < 0 || a >= rank) {
                throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                            " out of range for " + shape_str(shape));
            }
            if (reduced[static_cast<size_t>(a)]) {
                throw std::invalid_argument("reduce: duplicate axis " + std::to_string(a));
            }
            reduced[static_cast<size_t>(a)] = true;
        }
    }
    ReducePlan plan;
    for (int a = 0; a < rank; ++a)
        if (!reduced[static_cast<size_t>(a)]) plan.out_shape.push_back(shape[static_cast<size_t>(a)]);
    if (plan.out_shape.empty()) plan.out_shape = {1};
    plan.out_count = shape_count(plan.out_shape);

    const long n = shape_count(shape);
    plan.out_index.resize(static_cast<size_t>(n));
    std::vector<long> out_stride(static_cast<size_t>(rank), 0);
    long s = 1;
    for (int a = rank - 1; a >= 0; --a) {
        if (!reduced[static_cast<size_t>(a)]) {
            out_stride[static_cast<size_t>(a)] = s;
            s *= shape[static_cast<size_t>(a)];
        }
    }
    std::vector<int> coord(static_cast<size_t>(rank), 0);
    for (long i = 0; i < n; ++i) {
        long oi = 0;
        for (int a = 0; a < rank; ++a) oi += coord[static_cast<size_t>(a)] * out_stride[static_cast<size_t>(a)];
        plan.out_index[static_cast<size_t>(i)] = oi;
        for (int a = rank - 1; a >= 0; --a) {
            if (++coord[static_cast<size_t>(a)] < shape[static_cast<size_t>(a)]) break;
            coord[static_cast<size_t>(a)] = 0;
        }
    }
    return plan;
}

Tensor reduce_impl(const Tensor& x, const std::vector<int>& axes, bool mean) {
    auto plan = std::make_shared<ReducePlan>(plan_reduce(x.shape(), axes));
    const double denom = mean ? static_cast<double>(x.size() / plan->out_count) : 1.0;
    Tensor out = Tensor::zeros(plan->out_shape);
    for (long i = 0; i < x.size(); ++i)
        out.values()[plan->out_index[static_cast<size_t>(i)]] += x.values()[i];
    if (mean) out.values() /= denom;
    if (grad_enabled({&x})) {
        out.set_requires_grad(true);
        auto xd = x.data(), od = out.data();
        Tape::active()->record({xd, od}, [xd, od, plan, denom](AdjointStore& adj) {
            const Eigen::ArrayXd* go = adj.find(od.get());
            if (!go) return;
            Eigen::ArrayXd& gx = adj.accum(xd.get(), xd->values.size());
            for (long i = 0; i < xd->values.size(); ++i)
                gx[i] += (*go)[plan->out_index[static_cast<size_t>(i)]] / denom;
        });
    }
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes) {
    return reduce_impl(x, axes, /*mean=*/false);
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes) {
    return reduce_impl(x, axes, /*mean=*/true);
}

Tensor detach(const Tensor& x) { return Tensor::from_values(x.shape(), x.values()); }

}  // namespace spcl
