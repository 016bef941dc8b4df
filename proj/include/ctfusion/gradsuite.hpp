#pragma once

// The full gradient-oracle battery: central finite differences over every
// primitive and over the end-to-end micro model. Shared by the `gradcheck`
// subcommand and the acceptance suite.

#include "ctfusion/gradcheck.hpp"
#include "ctfusion/train.hpp"

namespace ctfusion {

inline RunConfig micro_run_config(uint64_t seed) {
    RunConfig cfg;
    cfg.dims.image_size = 16;
    cfg.dims.channels = 8;
    cfg.dims.vit_depth = 1;
    cfg.dims.text_depth = 1;
    cfg.dims.heads = 2;
    cfg.dims.adapter_rank = 4;
    cfg.dims.embed = 8;
    cfg.dims.cls_hidden = 8;
    cfg.dims.text_len = 8;
    cfg.dims.mlp_ratio = 2;
    cfg.dims.num_classes = 3;
    cfg.train.seed = seed;
    return cfg;
}

// FD over the whole micro model (B=1, 16x16 input, C=8, 2 heads, K=3).
// Adapter up-projections are nudged off their zero init so gradients flow
// through them; conv biases ahead of batch norm are skipped because their
// true gradient is identically zero (a constant channel shift cancels in the
// normalization) and central differences only read rounding noise there.
inline double model_gradient_check(uint64_t seed, int per_tensor = 8) {
    auto cfg = micro_run_config(seed);
    auto model = Model<double>::create(cfg, {"rust", "scab", "grey"});
    Rng rng(mix_seed(seed, 0xF00D));
    for (auto& blk : model.global_enc.blocks) {
        for (auto& v : blk.adapter->w2.data()) v = 0.05 * rng.normal();
        for (auto& v : blk.adapter->b2.data()) v = 0.05 * rng.normal();
    }
    auto images = Tensor<double>::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    std::vector<int> labels{static_cast<int>(rng.randint(3))};

    std::vector<Tensor<double>> inputs;
    for (auto& p : model.trainable_params()) {
        if (p.name.rfind("local.stage", 0) == 0 && p.name.size() > 2 &&
            p.name.compare(p.name.size() - 2, 2, ".b") == 0)
            continue;
        inputs.push_back(p.tensor);
    }
    // eps 1e-4: the loss is evaluated to ~1e-16 relative, so the difference
    // quotient carries ~1e-12 absolute noise; parameters this deep in the
    // model can have true gradients near 1e-8, and a smaller eps would let
    // that noise dominate the relative error
    return finite_diff_check_sampled(
        [&](const std::vector<Tensor<double>>&) {
            return cross_entropy(model.forward(images, Mode::train), labels);
        },
        std::move(inputs), 1e-4, per_tensor, rng);
}

// FD across every differentiable primitive at small shapes
inline double primitive_gradient_check(uint64_t seed) {
    Rng rng(seed);
    using TD = Tensor<double>;
    double worst = 0.0;
    auto track = [&worst](double e) { worst = std::max(worst, e); };

    {  // matmul (batched + plain)
        auto a = TD::randn({2, 3, 4}, rng, 1.0, true);
        auto b = TD::randn({4, 5}, rng, 1.0, true);
        auto probe = TD::randn({2, 3, 5}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) { return sum_all(mul(matmul(in[0], in[1]), probe)); },
            {a, b}, 1e-5));
    }
    {  // conv2d, strided and padded
        auto x = TD::randn({1, 2, 6, 6}, rng, 1.0, true);
        auto w = TD::randn({3, 2, 3, 3}, rng, 0.5, true);
        auto b = TD::randn({3}, rng, 0.5, true);
        auto probe = TD::randn({1, 3, 3, 3}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                return sum_all(mul(conv2d(in[0], in[1], in[2], 2, 1), probe));
            },
            {x, w, b}, 1e-5));
    }
    {  // activations; relu probed away from its kink
        for (auto kind : {Activation::relu, Activation::sigmoid, Activation::tanh}) {
            auto x = TD::randn({13}, rng, 1.0, true);
            std::vector<std::vector<char>> masks(1);
            masks[0].assign(x.data().size(), 1);
            if (kind == Activation::relu)
                for (size_t i = 0; i < x.data().size(); ++i)
                    if (std::abs(x.data()[i]) < 1e-3) masks[0][i] = 0;
            auto probe = TD::randn({13}, rng);
            track(finite_diff_check(
                [&](const std::vector<TD>& in) { return sum_all(mul(activation(in[0], kind), probe)); },
                {x}, 1e-5, &masks));
        }
    }
    {  // softmax
        auto x = TD::randn({3, 5}, rng, 2.0, true);
        auto probe = TD::randn({3, 5}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) { return sum_all(mul(softmax(in[0], 1), probe)); }, {x},
            1e-5));
    }
    {  // reductions
        auto x = TD::randn({2, 3, 4}, rng, 1.0, true);
        auto probe = TD::randn({2, 4}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                auto m = mean(in[0], {1});
                return sum_all(mul(mul(m, m), probe));
            },
            {x}, 1e-5));
    }
    {  // norms
        auto x = TD::randn({2, 3, 6}, rng, 1.0, true);
        auto g = TD::randn({6}, rng, 0.5, true);
        auto b = TD::randn({6}, rng, 0.5, true);
        auto probe = TD::randn({2, 3, 6}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                return sum_all(mul(layer_norm(in[0], in[1], in[2], 1e-5), probe));
            },
            {x, g, b}, 1e-5));
        auto x4 = TD::randn({2, 3, 4, 4}, rng, 1.0, true);
        auto g4 = TD::randn({3}, rng, 0.5, true);
        auto b4 = TD::randn({3}, rng, 0.5, true);
        auto probe4 = TD::randn({2, 3, 4, 4}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                BnState<double> st;
                return sum_all(mul(batch_norm(in[0], in[1], in[2], 1e-5, Mode::train, st), probe4));
            },
            {x4, g4, b4}, 1e-5));
    }
    {  // shape movement + gather
        auto a = TD::randn({2, 3, 4}, rng, 1.0, true);
        auto b = TD::randn({2, 2, 4}, rng, 1.0, true);
        auto probe = TD::randn({5, 2, 4}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                auto cat = concat<double>({in[0], in[1]}, 1);
                return sum_all(mul(reshape(transpose(cat, {1, 0, 2}), {5, 2, 4}), probe));
            },
            {a, b}, 1e-5));
        auto table = TD::randn({5, 3}, rng, 1.0, true);
        auto probe2 = TD::randn({4, 3}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                return sum_all(mul(index_select(in[0], {0, 2, 2, 4}), probe2));
            },
            {table}, 1e-5));
    }
    {  // elementwise binary with broadcast
        auto a = TD::randn({3, 4}, rng, 1.0, true);
        auto b = TD::randn({4}, rng, 1.0, true);
        auto probe = TD::randn({3, 4}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                auto y = div(mul(add(in[0], in[1]), sub(in[0], in[1])),
                             add_scalar(mul(in[1], in[1]), 2.0));
                return sum_all(mul(y, probe));
            },
            {a, b}, 1e-5));
    }
    {  // exp/log/sqrt chain
        auto x = TD::uniform({6}, rng, 0.5, 2.0, true);
        auto probe = TD::randn({6}, rng);
        track(finite_diff_check(
            [&](const std::vector<TD>& in) {
                return sum_all(mul(log_t(add_scalar(sqrt_t(exp_t(in[0])), 1.0)), probe));
            },
            {x}, 1e-5));
    }
    {  // cross-entropy through softmax
        auto logits = TD::randn({4, 3}, rng, 1.0, true);
        std::vector<int> labels{0, 2, 1, 2};
        track(finite_diff_check(
            [&](const std::vector<TD>& in) { return cross_entropy(softmax(in[0], 1), labels); },
            {logits}, 1e-5));
    }
    return worst;
}

struct GradSuiteReport {
    double primitive_err = 0.0;
    double model_err = 0.0;
    double max_err() const { return std::max(primitive_err, model_err); }
};

// >= 10 seeds over both batteries
inline GradSuiteReport run_gradient_suite(int seeds = 10, bool verbose = false) {
    GradSuiteReport rep;
    for (int s = 1; s <= seeds; ++s) {
        double pe = primitive_gradient_check(static_cast<uint64_t>(s));
        double me = model_gradient_check(static_cast<uint64_t>(s));
        rep.primitive_err = std::max(rep.primitive_err, pe);
        rep.model_err = std::max(rep.model_err, me);
        if (verbose)
            std::fprintf(stderr, "gradcheck seed %d: primitives %.3e, model %.3e\n", s, pe, me);
    }
    return rep;
}

}  // namespace ctfusion
