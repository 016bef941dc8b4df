#pragma once

// Cross-modal enhancement: bidirectional multi-head attention between visual
// tokens and class-prompt text features, then pooled weighted fusion and the
// classification head.

#include "ctfusion/encoders.hpp"

namespace ctfusion {

template <class T>
struct BiCrossAttention {
    int64_t dv = 0, dl = 0, d = 0, heads = 0;
    Tensor<T> wq_v, wk_v, wv_v;  // [dv, d]
    Tensor<T> wq_l, wk_l, wv_l;  // [dl, d]
    Tensor<T> wo_v;              // [d, dv]
    Tensor<T> wo_l;              // [d, dl]

    BiCrossAttention() = default;
    BiCrossAttention(int64_t dv_, int64_t dl_, int64_t d_, int64_t heads_, Rng& rng)
        : dv(dv_), dl(dl_), d(d_), heads(heads_) {
        if (heads < 1 || d % heads != 0)
            throw ConfigError("cross attention: embed " + std::to_string(d) +
                              " not divisible by heads " + std::to_string(heads));
        wq_v = init::linear_weight<T>(dv, d, rng);
        wk_v = init::linear_weight<T>(dv, d, rng);
        wv_v = init::linear_weight<T>(dv, d, rng);
        wq_l = init::linear_weight<T>(dl, d, rng);
        wk_l = init::linear_weight<T>(dl, d, rng);
        wv_l = init::linear_weight<T>(dl, d, rng);
        wo_v = init::linear_weight<T>(d, dv, rng);
        wo_l = init::linear_weight<T>(d, dl, rng);
    }

    // [B,N,d] -> [B,H,N,dh]
    Tensor<T> split_heads(const Tensor<T>& x) const {
        int64_t b = x.dim(0), n = x.dim(1), dh = d / heads;
        return transpose(reshape(x, {b, n, heads, dh}), {0, 2, 1, 3});
    }
    Tensor<T> merge_heads(const Tensor<T>& x) const {
        int64_t b = x.dim(0), n = x.dim(2);
        return reshape(transpose(x, {0, 2, 1, 3}), {b, n, d});
    }

    // v: [B,Nv,dv], l: [B,Nl,dl] -> (v_hat [B,Nv,dv], l_hat [B,Nl,dl]);
    // att_v [B,H,Nv,Nl] and att_l [B,H,Nl,Nv] are row-stochastic
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& v, const Tensor<T>& l,
                                            Tensor<T>* att_v = nullptr,
                                            Tensor<T>* att_l = nullptr) const {
        T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)));
        auto qv = split_heads(matmul(v, wq_v));
        auto kv = split_heads(matmul(v, wk_v));
        auto vv = split_heads(matmul(v, wv_v));
        auto ql = split_heads(matmul(l, wq_l));
        auto kl = split_heads(matmul(l, wk_l));
        auto vl = split_heads(matmul(l, wv_l));
        auto av = softmax(scale(matmul(qv, transpose_last2(kl)), inv_sqrt), -1);
        auto al = softmax(scale(matmul(ql, transpose_last2(kv)), inv_sqrt), -1);
        if (att_v) *att_v = av;
        if (att_l) *att_l = al;
        auto v_hat = matmul(merge_heads(matmul(av, vl)), wo_v);
        auto l_hat = matmul(merge_heads(matmul(al, vv)), wo_l);
        return {v_hat, l_hat};
    }

    // visual-queries-text half only; the plain cross-attention ablation
    Tensor<T> one_directional(const Tensor<T>& v, const Tensor<T>& l,
                              Tensor<T>* att_v = nullptr) const {
        T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)));
        auto qv = split_heads(matmul(v, wq_v));
        auto kl = split_heads(matmul(l, wk_l));
        auto vl = split_heads(matmul(l, wv_l));
        auto av = softmax(scale(matmul(qv, transpose_last2(kl)), inv_sqrt), -1);
        if (att_v) *att_v = av;
        return matmul(merge_heads(matmul(av, vl)), wo_v);
    }

    template <class Fn>
    void collect_bidir(const std::string& p, Fn&& fn) {
        fn(p + ".wq_v", wq_v);
        fn(p + ".wk_v", wk_v);
        fn(p + ".wv_v", wv_v);
        fn(p + ".wq_l", wq_l);
        fn(p + ".wk_l", wk_l);
        fn(p + ".wv_l", wv_l);
        fn(p + ".wo_v", wo_v);
        fn(p + ".wo_l", wo_l);
    }

    template <class Fn>
    void collect_one_directional(const std::string& p, Fn&& fn) {
        fn(p + ".wq_v", wq_v);
        fn(p + ".wk_l", wk_l);
        fn(p + ".wv_l", wv_l);
        fn(p + ".wo_v", wo_v);
    }
};

// pooled, scalar-weighted fusion of the two modal summaries, then a two-layer
// classifier with softmax rows
template <class T>
struct FusionHead {
    int64_t dv = 0, dl = 0, hidden = 0, classes = 0;
    Tensor<T> w_v, w_l;  // scalar fusion weights
    Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

    FusionHead() = default;
    FusionHead(int64_t dv_, int64_t dl_, int64_t hidden_, int64_t classes_, Rng& rng)
        : dv(dv_), dl(dl_), hidden(hidden_), classes(classes_) {
        w_v = Tensor<T>::ones({1}, true);
        w_l = Tensor<T>::ones({1}, true);
        fc1_w = init::linear_weight<T>(dv + dl, hidden, rng);
        fc1_b = Tensor<T>::zeros({hidden}, true);
        fc2_w = init::linear_weight<T>(hidden, classes, rng);
        fc2_b = Tensor<T>::zeros({classes}, true);
    }

    // v_hat [B,Nv,dv] and optional l_hat [B,Nl,dl] -> [B, dv+dl] as
    // [w_v * mean_N(v_hat) ; w_l * mean_N(l_hat)]; missing text half is zero
    Tensor<T> pool_fuse(const Tensor<T>& v_hat, const Tensor<T>* l_hat) const {
        auto v_bar = mul(mean(v_hat, {1}), w_v);  // [B, dv]
        Tensor<T> l_part = l_hat ? mul(mean(*l_hat, {1}), w_l)
                                 : Tensor<T>::zeros({v_hat.dim(0), dl});
        return concat<T>({v_bar, l_part}, 1);
    }

    // probability rows over the K classes; logits_out exposes the pre-softmax
    // activations for explanation passes
    Tensor<T> classify(const Tensor<T>& fusion, Tensor<T>* logits_out = nullptr) const {
        auto h = relu(add(matmul(fusion, fc1_w), fc1_b));
        auto logits = add(matmul(h, fc2_w), fc2_b);
        if (logits_out) *logits_out = logits;
        return softmax(logits, 1);
    }

    template <class Fn>
    void collect(const std::string& p, bool with_text_weight, Fn&& fn) {
        fn(p + ".w_v", w_v);
        if (with_text_weight) fn(p + ".w_l", w_l);
        fn(p + ".fc1_w", fc1_w);
        fn(p + ".fc1_b", fc1_b);
        fn(p + ".fc2_w", fc2_w);
        fn(p + ".fc2_b", fc2_b);
    }
};

}  // namespace ctfusion
