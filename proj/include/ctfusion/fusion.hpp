#pragma once

// Adaptive fusion of the two visual branches: align global patch tokens onto
// the conv grid, gate the recurrent and convolutional sub-branches with
// per-sample weights, and emit fused visual tokens.

#include "ctfusion/encoders.hpp"

namespace ctfusion {

// [B,N,C] tokens <-> [B,C,H,W] grid, raster order
template <class T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, int64_t h, int64_t w) {
    int64_t b = tokens.dim(0), n = tokens.dim(1), c = tokens.dim(2);
    if (n != h * w)
        throw ShapeError("tokens_to_grid: " + std::to_string(n) + " tokens cannot fill a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    return transpose(reshape(tokens, {b, h, w, c}), {0, 3, 1, 2});
}

template <class T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
    int64_t b = grid.dim(0), c = grid.dim(1), h = grid.dim(2), w = grid.dim(3);
    return reshape(transpose(grid, {0, 2, 3, 1}), {b, h * w, c});
}

template <class T>
struct AdaptiveFusion {
    int64_t channels = 0;
    // alignment and the three shape-preserving 3x3 convs (pad 1, stride 1)
    Tensor<T> align_w, align_b;        // 2C -> C
    Tensor<T> pre_w, pre_b;            // C -> C, refines X before both branches
    Tensor<T> conv_w, conv_b;          // C -> C, the convolutional branch
    Tensor<T> post_w, post_b;          // C -> C, final fuse conv
    // gate (dynamic per-sample branch weights): pool -> C/4 -> 2 -> softmax
    Tensor<T> gate_w1, gate_b1, gate_w2, gate_b2;
    // bidirectional recurrent scan over the raster sequence, gates [i,f,o,g]
    struct LstmDir {
        Tensor<T> wx;  // [C, 4C]
        Tensor<T> wh;  // [C, 4C]
        Tensor<T> b;   // [4C]
    };
    LstmDir fwd, bwd;
    Tensor<T> merge_w, merge_b;  // [2C, C]
    // single-head spatial self-attention, the drop-in alternative scan branch
    Tensor<T> attn_ln_g, attn_ln_b, attn_wq, attn_wk, attn_wv, attn_wo;

    AdaptiveFusion() = default;
    AdaptiveFusion(int64_t c, Rng& rng) : channels(c) {
        align_w = init::conv_weight<T>(c, 2 * c, 3, rng);
        align_b = Tensor<T>::zeros({c}, true);
        pre_w = init::conv_weight<T>(c, c, 3, rng);
        pre_b = Tensor<T>::zeros({c}, true);
        conv_w = init::conv_weight<T>(c, c, 3, rng);
        conv_b = Tensor<T>::zeros({c}, true);
        post_w = init::conv_weight<T>(c, c, 3, rng);
        post_b = Tensor<T>::zeros({c}, true);
        int64_t hid = c / 4;
        gate_w1 = init::linear_weight<T>(c, hid, rng);
        gate_b1 = Tensor<T>::zeros({hid}, true);
        gate_w2 = init::linear_weight<T>(hid, 2, rng);
        gate_b2 = Tensor<T>::zeros({2}, true);
        for (LstmDir* d : {&fwd, &bwd}) {
            d->wx = init::linear_weight<T>(c, 4 * c, rng);
            d->wh = init::linear_weight<T>(c, 4 * c, rng);
            d->b = Tensor<T>::zeros({4 * c}, true);
            // forget-gate bias starts open
            for (int64_t i = c; i < 2 * c; ++i) d->b.data()[static_cast<size_t>(i)] = T(1);
        }
        merge_w = init::linear_weight<T>(2 * c, c, rng);
        merge_b = Tensor<T>::zeros({c}, true);
        attn_ln_g = Tensor<T>::ones({c}, true);
        attn_ln_b = Tensor<T>::zeros({c}, true);
        attn_wq = init::linear_weight<T>(c, c, rng);
        attn_wk = init::linear_weight<T>(c, c, rng);
        attn_wv = init::linear_weight<T>(c, c, rng);
        attn_wo = init::linear_weight<T>(c, c, rng);
    }

    // drop the class token, grid the patch tokens, concat with the conv map
    // on channels, align with a 3x3 conv: -> X [B,C,H,W]
    Tensor<T> align_and_concat(const Tensor<T>& global_tokens, const Tensor<T>& local_map) const {
        if (local_map.rank() != 4) throw ShapeError("fusion: local map must be [B,C,H,W]");
        int64_t h = local_map.dim(2), w = local_map.dim(3);
        auto patches = narrow(global_tokens, 1, 1, global_tokens.dim(1) - 1);  // drop [CLS]
        auto grid = tokens_to_grid(patches, h, w);
        auto x = concat<T>({grid, local_map}, 1);  // [B,2C,H,W], global half first
        return relu(conv2d(x, align_w, align_b, 1, 1));
    }

    // per-sample branch weights [B,2]; rows sum to 1
    Tensor<T> gate(const Tensor<T>& x) const {
        auto pooled = mean(x, {2, 3});  // [B,C]
        auto h = relu(add(matmul(pooled, gate_w1), gate_b1));
        return softmax(add(matmul(h, gate_w2), gate_b2), 1);
    }

    // bidirectional LSTM over the raster sequence; [B,C,H,W] -> [B,C,H,W]
    Tensor<T> lstm_scan(const Tensor<T>& x) const {
        int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), n = h * w;
        auto seq = grid_to_tokens(x);  // [B,N,C]
        auto run = [&](const LstmDir& dir, bool reverse) {
            auto gx = add(matmul(seq, dir.wx), dir.b);  // [B,N,4C]
            Tensor<T> hprev = Tensor<T>::zeros({b, c});
            Tensor<T> cprev = Tensor<T>::zeros({b, c});
            std::vector<Tensor<T>> hs(static_cast<size_t>(n));
            for (int64_t step = 0; step < n; ++step) {
                int64_t t = reverse ? n - 1 - step : step;
                auto gates = add(reshape(narrow(gx, 1, t, 1), {b, 4 * c}), matmul(hprev, dir.wh));
                auto i = sigmoid(narrow(gates, 1, 0, c));
                auto f = sigmoid(narrow(gates, 1, c, c));
                auto o = sigmoid(narrow(gates, 1, 2 * c, c));
                auto g = tanh_t(narrow(gates, 1, 3 * c, c));
                cprev = add(mul(f, cprev), mul(i, g));
                hprev = mul(o, tanh_t(cprev));
                hs[static_cast<size_t>(t)] = reshape(hprev, {b, 1, c});
            }
            return concat<T>(hs, 1);  // [B,N,C], slot t = state at raster position t
        };
        auto both = concat<T>({run(fwd, false), run(bwd, true)}, 2);      // [B,N,2C]
        auto out = add(matmul(both, merge_w), merge_b);                   // [B,N,C]
        return tokens_to_grid(out, h, w);
    }

    // single-head pre-norm self-attention over the raster tokens
    Tensor<T> attn_branch(const Tensor<T>& x) const {
        int64_t h = x.dim(2), w = x.dim(3);
        auto tok = grid_to_tokens(x);
        auto hn = layer_norm(tok, attn_ln_g, attn_ln_b, T(1e-5));
        auto q = matmul(hn, attn_wq), k = matmul(hn, attn_wk), v = matmul(hn, attn_wv);
        auto a = softmax(scale(matmul(q, transpose_last2(k)),
                               static_cast<T>(1.0 / std::sqrt(double(channels)))),
                         -1);
        auto out = add(tok, matmul(matmul(a, v), attn_wo));
        return tokens_to_grid(out, h, w);
    }

    // full pass: X* = relu(post(att1 * x_v + att2 * x_c)), flattened to tokens.
    // att_out/fused_out expose the gate weights and the fused map.
    Tensor<T> forward(const Tensor<T>& global_tokens, const Tensor<T>& local_map, FusionBranch branch,
                      bool gate_on, Tensor<T>* att_out = nullptr, Tensor<T>* fused_out = nullptr) const {
        auto x = align_and_concat(global_tokens, local_map);
        int64_t b = x.dim(0);
        Tensor<T> att = gate_on ? gate(x) : Tensor<T>::full({b, 2}, T(0.5));
        if (att_out) *att_out = att;
        auto xp = relu(conv2d(x, pre_w, pre_b, 1, 1));
        auto x_c = relu(conv2d(xp, conv_w, conv_b, 1, 1));
        Tensor<T> fused;
        if (branch == FusionBranch::none) {
            fused = x_c;
        } else {
            auto x_v = branch == FusionBranch::lstm ? lstm_scan(xp) : attn_branch(xp);
            auto a1 = reshape(narrow(att, 1, 0, 1), {b, 1, 1, 1});
            auto a2 = reshape(narrow(att, 1, 1, 1), {b, 1, 1, 1});
            fused = add(mul(a1, x_v), mul(a2, x_c));
        }
        auto xstar = relu(conv2d(fused, post_w, post_b, 1, 1));
        if (fused_out) *fused_out = xstar;
        return grid_to_tokens(xstar);
    }

    // parameters reachable for a given configuration; `both_branches` marks
    // whether the alignment conv is in the graph at all
    template <class Fn>
    void collect_active(const std::string& p, FusionBranch branch, bool gate_on, bool affm_on,
                        bool both_branches, Fn&& fn) {
        if (!both_branches) return;
        fn(p + ".align_w", align_w);
        fn(p + ".align_b", align_b);
        if (!affm_on) return;
        fn(p + ".pre_w", pre_w);
        fn(p + ".pre_b", pre_b);
        fn(p + ".conv_w", conv_w);
        fn(p + ".conv_b", conv_b);
        fn(p + ".post_w", post_w);
        fn(p + ".post_b", post_b);
        if (gate_on) {
            fn(p + ".gate_w1", gate_w1);
            fn(p + ".gate_b1", gate_b1);
            fn(p + ".gate_w2", gate_w2);
            fn(p + ".gate_b2", gate_b2);
        }
        if (branch == FusionBranch::lstm) {
            fn(p + ".lstm_fwd.wx", fwd.wx);
            fn(p + ".lstm_fwd.wh", fwd.wh);
            fn(p + ".lstm_fwd.b", fwd.b);
            fn(p + ".lstm_bwd.wx", bwd.wx);
            fn(p + ".lstm_bwd.wh", bwd.wh);
            fn(p + ".lstm_bwd.b", bwd.b);
            fn(p + ".merge_w", merge_w);
            fn(p + ".merge_b", merge_b);
        } else if (branch == FusionBranch::attn) {
            fn(p + ".attn_ln_g", attn_ln_g);
            fn(p + ".attn_ln_b", attn_ln_b);
            fn(p + ".attn_wq", attn_wq);
            fn(p + ".attn_wk", attn_wk);
            fn(p + ".attn_wv", attn_wv);
            fn(p + ".attn_wo", attn_wo);
        }
    }

    template <class Fn>
    void collect(const std::string& p, Fn&& fn) {
        fn(p + ".align_w", align_w);
        fn(p + ".align_b", align_b);
        fn(p + ".pre_w", pre_w);
        fn(p + ".pre_b", pre_b);
        fn(p + ".conv_w", conv_w);
        fn(p + ".conv_b", conv_b);
        fn(p + ".post_w", post_w);
        fn(p + ".post_b", post_b);
        fn(p + ".gate_w1", gate_w1);
        fn(p + ".gate_b1", gate_b1);
        fn(p + ".gate_w2", gate_w2);
        fn(p + ".gate_b2", gate_b2);
        fn(p + ".lstm_fwd.wx", fwd.wx);
        fn(p + ".lstm_fwd.wh", fwd.wh);
        fn(p + ".lstm_fwd.b", fwd.b);
        fn(p + ".lstm_bwd.wx", bwd.wx);
        fn(p + ".lstm_bwd.wh", bwd.wh);
        fn(p + ".lstm_bwd.b", bwd.b);
        fn(p + ".merge_w", merge_w);
        fn(p + ".merge_b", merge_b);
        fn(p + ".attn_ln_g", attn_ln_g);
        fn(p + ".attn_ln_b", attn_ln_b);
        fn(p + ".attn_wq", attn_wq);
        fn(p + ".attn_wk", attn_wk);
        fn(p + ".attn_wv", attn_wv);
        fn(p + ".attn_wo", attn_wo);
    }
};

}  // namespace ctfusion
