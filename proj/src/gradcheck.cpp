#include "spcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "spcl/losses.hpp"
#include "spcl/prototype_bank.hpp"
#include "spcl/rng.hpp"
#include "spcl/segnet.hpp"

namespace spcl {

double gradcheck_max_rel_error(const std::function<Tensor()>& loss_fn,
                               const std::vector<Tensor>& leaves, double step,
                               long sample_per_leaf, std::uint64_t probe_seed) {
    for (Tensor t : leaves) t.zero_grad();
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    std::vector<Eigen::ArrayXd> grads;
    grads.reserve(leaves.size());
    for (Tensor t : leaves) grads.push_back(t.grad());

    double max_err = 0.0;
    RandomStream probe(probe_seed, 0x70726f6265);
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        Tensor leaf = leaves[l];
        std::vector<long> idx;
        if (sample_per_leaf <= 0 || sample_per_leaf >= leaf.size()) {
            idx.resize(static_cast<std::size_t>(leaf.size()));
            for (long i = 0; i < leaf.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
        } else {
            for (long i = 0; i < sample_per_leaf; ++i) {
                idx.push_back(probe.uniform_int(static_cast<int>(leaf.size())));
            }
        }
        for (long i : idx) {
            const double orig = leaf.values()[i];
            leaf.values()[i] = orig + step;
            const double fp = loss_fn().value();
            leaf.values()[i] = orig - step;
            const double fm = loss_fn().value();
            leaf.values()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = grads[l][i];
            const double err = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

namespace {

Tensor rand_tensor(Shape shape, RandomStream& rng, double lo, double hi, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (long i = 0; i < t.size(); ++i) t.values()[i] = rng.uniform(lo, hi);
    return t;
}

/// Fixed random linear functional; makes any op's output a scalar loss.
/// Built once per instance so the loss closure is deterministic under
/// repeated evaluation.
Tensor make_weights(Shape shape, RandomStream& rng) {
    return rand_tensor(std::move(shape), rng, -1.0, 1.0, false);
}

/// Keeps relu test points away from the kink, where central differences
/// are meaningless.
void nudge_from_zero(Tensor& t, double margin) {
    for (long i = 0; i < t.size(); ++i) {
        double& v = t.values()[i];
        if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
    }
}

PrototypeBank random_bank(int classes, int dim, RandomStream& rng) {
    PrototypeBank bank(classes, dim, 0.1);
    for (int c = 0; c < classes; ++c) {
        Eigen::VectorXd v(dim);
        for (int i = 0; i < dim; ++i) v[i] = rng.uniform(-1.0, 1.0);
        bank.set_prototype(c, v);
    }
    return bank;
}

LabelMap random_labels(int rows, int cols, int classes, RandomStream& rng, double ignore_frac) {
    LabelMap m(rows, cols);
    for (auto& v : m.v) {
        v = rng.bernoulli(ignore_frac) ? kIgnoreLabel
                                       : static_cast<std::uint8_t>(rng.uniform_int(classes));
    }
    return m;
}

struct Case {
    std::string name;
    double tolerance;
    long sample_per_leaf;  // 0 = every element
    std::function<double(RandomStream&)> run;
};

double run_composed_objective(RandomStream& rng, long sample_per_leaf) {
    SegModel model(8, 4);
    init_params(model, rng.next_u64());
    // Nonzero biases move relu preactivations off the kink.
    for (auto* l : {&model.enc1, &model.enc2, &model.enc3}) {
        for (long i = 0; i < l->bias.size(); ++i) l->bias.values()[i] = rng.uniform(0.01, 0.05);
    }
    Tensor src = rand_tensor({16, 16, 3}, rng, 0.0, 1.0, false);
    Tensor tgt = rand_tensor({16, 16, 3}, rng, 0.0, 1.0, false);
    LabelMap labels = random_labels(16, 16, 4, rng, 0.0);
    PrototypeBank bank = random_bank(4, 8, rng);
    const Mask src_mask = downsample_labels(labels, 4);
    const ContrastiveConfig ccfg{0.5, 1.0};

    // The target mask is a constant selection: freeze it from the initial
    // forward pass so perturbations cannot flip it.
    Mask tgt_mask;
    {
        Tensor scores = forward_scores(model, forward_features(model, tgt));
        Thresholds th;
        th.sigma = Eigen::VectorXd::Constant(4, 0.1);
        th.space = ThresholdSpace::feature;
        tgt_mask = target_mask(channel_softmax(scores), th);
    }

    auto loss_fn = [&]() {
        ForwardMaps fs = forward_all(model, src);
        ForwardMaps ft = forward_all(model, tgt);
        Tensor seg = segmentation_loss(fs.probs, labels);
        Tensor cl_s = source_contrastive(fs.features, src_mask, bank, ccfg);
        Tensor cl_t = target_contrastive(ft.features, tgt_mask, bank, ccfg);
        return total_loss(seg, cl_s, cl_t, 1.0);
    };
    std::vector<Tensor> leaves;
    for (auto& [name, p] : model.parameters()) leaves.push_back(p);
    return gradcheck_max_rel_error(loss_fn, leaves, 1e-5, sample_per_leaf, rng.next_u64());
}

std::vector<Case> make_cases() {
    std::vector<Case> cases;
    cases.push_back({"add", 1e-6, 0, [](RandomStream& rng) {
        Tensor a = rand_tensor({3, 4}, rng, -1, 1, true), b = rand_tensor({3, 4}, rng, -1, 1, true);
        Tensor w = make_weights({3, 4}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(add(a, b), w)); }, {a, b});
    }});
    cases.push_back({"mul", 1e-6, 0, [](RandomStream& rng) {
        Tensor a = rand_tensor({3, 4}, rng, -1, 1, true), b = rand_tensor({3, 4}, rng, -1, 1, true);
        Tensor w = make_weights({3, 4}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(mul(a, b), w)); }, {a, b});
    }});
    cases.push_back({"scale", 1e-6, 0, [](RandomStream& rng) {
        Tensor a = rand_tensor({2, 5}, rng, -1, 1, true);
        Tensor w = make_weights({2, 5}, rng);
        const double s = rng.uniform(-2.0, 2.0);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(scale(a, s), w)); }, {a});
    }});
    cases.push_back({"matmul", 1e-6, 0, [](RandomStream& rng) {
        Tensor a = rand_tensor({3, 4}, rng, -1, 1, true), b = rand_tensor({4, 2}, rng, -1, 1, true);
        Tensor w = make_weights({3, 2}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(matmul(a, b), w)); }, {a, b});
    }});
    cases.push_back({"conv2d_s1", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({6, 6, 3}, rng, -1, 1, true);
        Tensor k = rand_tensor({3, 3, 3, 4}, rng, -1, 1, true);
        Tensor w = make_weights({6, 6, 4}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(conv2d(x, k, 1, 1), w)); },
                                       {x, k});
    }});
    cases.push_back({"conv2d_s2", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({8, 8, 3}, rng, -1, 1, true);
        Tensor k = rand_tensor({3, 3, 3, 4}, rng, -1, 1, true);
        Tensor w = make_weights({4, 4, 4}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(conv2d(x, k, 2, 1), w)); },
                                       {x, k});
    }});
    cases.push_back({"conv2d_1x1", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({4, 4, 5}, rng, -1, 1, true);
        Tensor k = rand_tensor({1, 1, 5, 3}, rng, -1, 1, true);
        Tensor w = make_weights({4, 4, 3}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(conv2d(x, k, 1, 0), w)); },
                                       {x, k});
    }});
    cases.push_back({"bias_add", 1e-6, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({4, 4, 3}, rng, -1, 1, true);
        Tensor b = rand_tensor({3}, rng, -1, 1, true);
        Tensor w = make_weights({4, 4, 3}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(bias_add(x, b), w)); }, {x, b});
    }});
    cases.push_back({"relu", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({5, 7}, rng, -1, 1, true);
        nudge_from_zero(x, 1e-3);
        Tensor w = make_weights({5, 7}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(relu(x), w)); }, {x});
    }});
    cases.push_back({"log", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({4, 5}, rng, 0.5, 2.0, true);
        Tensor w = make_weights({4, 5}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(log(x), w)); }, {x});
    }});
    cases.push_back({"channel_softmax", 1e-6, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({3, 3, 5}, rng, -2, 2, true);
        Tensor w = make_weights({3, 3, 5}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(channel_softmax(x), w)); },
                                       {x});
    }});
    cases.push_back({"l2_normalize_channels", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({3, 3, 4}, rng, 0.3, 1.5, true);
        Tensor w = make_weights({3, 3, 4}, rng);
        return gradcheck_max_rel_error(
            [&] { return reduce_sum(mul(l2_normalize_channels(x), w)); }, {x});
    }});
    cases.push_back({"bilinear_upsample", 1e-5, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({4, 4, 3}, rng, -1, 1, true);
        Tensor w = make_weights({8, 8, 3}, rng);
        return gradcheck_max_rel_error(
            [&] { return reduce_sum(mul(bilinear_upsample(x, 2), w)); }, {x});
    }});
    cases.push_back({"reduce_sum_axis", 1e-6, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({4, 5}, rng, -1, 1, true);
        Tensor w = make_weights({5}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(reduce_sum(x, {0}), w)); },
                                       {x});
    }});
    cases.push_back({"reduce_mean_axis", 1e-6, 0, [](RandomStream& rng) {
        Tensor x = rand_tensor({4, 5}, rng, -1, 1, true);
        Tensor w = make_weights({4}, rng);
        return gradcheck_max_rel_error([&] { return reduce_sum(mul(reduce_mean(x, {1}), w)); },
                                       {x});
    }});
    cases.push_back({"masked_nll", 1e-5, 0, [](RandomStream& rng) {
        Tensor logits = rand_tensor({4, 4, 5}, rng, -2, 2, true);
        LabelMap labels = random_labels(4, 4, 5, rng, 0.25);
        return gradcheck_max_rel_error(
            [&] { return masked_nll(channel_softmax(logits), labels); }, {logits});
    }});
    cases.push_back({"contrastive", 1e-5, 0, [](RandomStream& rng) {
        Tensor u = rand_tensor({6}, rng, -1, 1, true);
        Eigen::VectorXd pos(6);
        std::vector<Eigen::VectorXd> negs(3, Eigen::VectorXd(6));
        for (int i = 0; i < 6; ++i) pos[i] = rng.uniform(-1, 1);
        pos.normalize();
        for (auto& v : negs) {
            for (int i = 0; i < 6; ++i) v[i] = rng.uniform(-1, 1);
            v.normalize();
        }
        return gradcheck_max_rel_error([&] { return contrastive(u, pos, negs, 0.5); }, {u});
    }});
    cases.push_back({"pixel_prototype_contrastive", 1e-5, 0, [](RandomStream& rng) {
        Tensor f = rand_tensor({4, 4, 6}, rng, 0.2, 1.2, true);
        PrototypeBank bank = random_bank(5, 6, rng);
        LabelMap mask = random_labels(4, 4, 5, rng, 0.3);
        const ContrastiveConfig ccfg{0.4, 1.0};
        return gradcheck_max_rel_error(
            [&] { return source_contrastive(f, mask, bank, ccfg); }, {f});
    }});
    cases.push_back({"composed_objective", 1e-4, 0,
                     [](RandomStream& rng) { return run_composed_objective(rng, 0); }});
    return cases;
}

}  // namespace

std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed, int trials) {
    std::vector<GradCheckReport> reports;
    int case_index = 0;
    for (const Case& c : make_cases()) {
        GradCheckReport rep;
        rep.name = c.name;
        rep.tolerance = c.tolerance;
        rep.trials = trials;
        for (int t = 0; t < trials; ++t) {
            RandomStream rng(seed, 0x6763617365, static_cast<std::uint64_t>(case_index),
                             static_cast<std::uint64_t>(t));
            rep.max_rel_err = std::max(rep.max_rel_err, c.run(rng));
        }
        rep.pass = rep.max_rel_err <= rep.tolerance;
        reports.push_back(std::move(rep));
        ++case_index;
    }
    return reports;
}

}  // namespace spcl
