#pragma once

// Full classifier: encoders -> fusion -> cross-modal enhancement -> head,
// with every module behind a toggle so ablation rows are runnable.

#include "ctfusion/crossmodal.hpp"
#include "ctfusion/fusion.hpp"

namespace ctfusion {

template <class T>
struct Diagnostics {
    std::vector<Tensor<T>> vit_attn;   // per-block [B,H,N+1,N+1]
    std::vector<Tensor<T>> text_attn;  // per-block [K,H,L,L]
    Tensor<T> att_v, att_l;            // cross-modal attention maps
    Tensor<T> gate;                    // fusion branch weights [B,2]
    Tensor<T> local_map;               // [B,C,H,W] conv-branch features
    Tensor<T> fused_map;               // [B,C,H,W] visual map before flattening
    Tensor<T> logits;                  // [B,K] pre-softmax
};

template <class T>
struct Model {
    ModelDims dims;
    Toggles toggles;
    PromptSet prompts;
    std::vector<std::vector<int64_t>> prompt_ids;  // one [L] sequence per class

    LocalEncoder<T> local;
    GlobalEncoder<T> global_enc;
    TextEncoder<T> text;
    AdaptiveFusion<T> fusion;
    BiCrossAttention<T> cross;
    FusionHead<T> head;
    Tensor<T> null_token;     // [1, C] stand-in text feature when text is off
    Tensor<T> enh_w, enh_b;   // 3x3 conv for the conv-flavored enhancement

    static Model create(const RunConfig& cfg, const std::vector<std::string>& class_names) {
        auto prompts = build_prompts(class_names, cfg.prompt_template);
        return create_with_vocab(cfg, class_names, Vocab::build(prompts.prompts));
    }

    static Model create_with_vocab(const RunConfig& cfg, const std::vector<std::string>& class_names,
                                   Vocab vocab) {
        RunConfig c = cfg;
        c.dims.num_classes = static_cast<int>(class_names.size());
        validate(c);
        Model m;
        m.dims = c.dims;
        m.toggles = c.toggles;
        m.prompts = build_prompts(class_names, c.prompt_template);
        Rng rng(mix_seed(c.train.seed, 0x1417));
        const auto& d = m.dims;
        m.local = LocalEncoder<T>(d.channels, rng);
        m.global_enc = GlobalEncoder<T>(d, rng);
        m.text = TextEncoder<T>(std::move(vocab), d, rng);
        m.fusion = AdaptiveFusion<T>(d.channels, rng);
        m.cross = BiCrossAttention<T>(d.channels, d.channels, d.embed, d.heads, rng);
        m.head = FusionHead<T>(d.channels, d.channels, d.cls_hidden, d.num_classes, rng);
        m.null_token = Tensor<T>::randn({1, d.channels}, rng, 0.02, true);
        m.enh_w = init::conv_weight<T>(d.channels, d.channels, 3, rng);
        m.enh_b = Tensor<T>::zeros({d.channels}, true);
        for (const auto& p : m.prompts.prompts)
            m.prompt_ids.push_back(tokenize(p, m.text.vocab, d.text_len));
        if (c.toggles.freeze_backbone) m.set_freeze(true);
        return m;
    }

    bool uses_text_features() const {
        return toggles.feb && toggles.feb_attention != FebAttention::conv;
    }

    // images: [B,3,H,W] in [0,1] -> probability rows [B,K]
    Tensor<T> forward(const Tensor<T>& images, Mode mode, Diagnostics<T>* diag = nullptr) {
        int64_t b = images.dim(0);
        Tensor<T> local_map, tokens;
        if (toggles.cnn) {
            local_map = local.forward(images, mode);
            if (diag) diag->local_map = local_map;
        }
        if (toggles.vit)
            tokens = global_enc.forward(images, toggles.adapter, diag ? &diag->vit_attn : nullptr);

        // visual tokens [B,N,C] plus their grid view
        Tensor<T> vis, grid_map;
        if (toggles.cnn && toggles.vit) {
            if (toggles.affm) {
                Tensor<T> att;
                vis = fusion.forward(tokens, local_map, toggles.fusion_branch, toggles.fusion_gate,
                                     &att, &grid_map);
                if (diag) diag->gate = att;
            } else {
                grid_map = fusion.align_and_concat(tokens, local_map);
                vis = grid_to_tokens(grid_map);
            }
        } else if (toggles.cnn) {
            grid_map = local_map;
            vis = grid_to_tokens(local_map);
        } else {
            auto patches = narrow(tokens, 1, 1, tokens.dim(1) - 1);
            int64_t g = dims.image_size / dims.patch;
            grid_map = tokens_to_grid(patches, g, g);
            vis = patches;
        }
        if (diag) diag->fused_map = grid_map;

        Tensor<T> fused_vec;
        if (toggles.feb) {
            if (toggles.feb_attention == FebAttention::conv) {
                // conv enhancement over the visual grid; text plays no part
                auto enhanced = relu(conv2d(grid_map, enh_w, enh_b, 1, 1));
                fused_vec = head.pool_fuse(grid_to_tokens(enhanced), nullptr);
            } else {
                Tensor<T> l = text_features(b, diag);
                if (toggles.feb_attention == FebAttention::bidir) {
                    Tensor<T> av, al;
                    auto [v_hat, l_hat] = cross.forward(vis, l, &av, &al);
                    if (diag) {
                        diag->att_v = av;
                        diag->att_l = al;
                    }
                    fused_vec = head.pool_fuse(v_hat, &l_hat);
                } else {
                    Tensor<T> av;
                    auto v_hat = cross.one_directional(vis, l, &av);
                    if (diag) diag->att_v = av;
                    fused_vec = head.pool_fuse(v_hat, &l);
                }
            }
        } else {
            fused_vec = head.pool_fuse(vis, nullptr);
        }
        Tensor<T> logits;
        auto probs = head.classify(fused_vec, &logits);
        if (diag) diag->logits = logits;
        return probs;
    }

    // class-prompt features broadcast across the batch: [B,K,C]; with text
    // off, a single learned null token [B,1,C]
    Tensor<T> text_features(int64_t batch, Diagnostics<T>* diag = nullptr) {
        if (toggles.text) {
            auto feats = text.encode(prompt_ids, diag ? &diag->text_attn : nullptr);  // [K,C]
            auto r = reshape(feats, {1, feats.dim(0), feats.dim(1)});
            return add(r, Tensor<T>::zeros({batch, 1, 1}));
        }
        auto r = reshape(null_token, {1, 1, dims.channels});
        return add(r, Tensor<T>::zeros({batch, 1, 1}));
    }

    // freeze both visual backbones and the text encoder; adapters and all
    // post-encoder modules keep training
    void set_freeze(bool on) {
        toggles.freeze_backbone = on;
        auto freeze = [on](const std::string&, Tensor<T>& t) { t.set_requires_grad(!on); };
        local.collect("local", freeze);
        global_enc.set_frozen(on);
        text.set_frozen(on);
    }

    // every tensor, toggles ignored; the checkpoint and census surface
    template <class Fn>
    void collect_all(Fn&& fn) {
        local.collect("local", fn);
        global_enc.collect("global", fn);
        text.collect("text", fn);
        fusion.collect("fusion", fn);
        cross.collect_bidir("cross", fn);
        fn("enh_w", enh_w);
        fn("enh_b", enh_b);
        fn("null_token", null_token);
        head.collect("head", true, fn);
    }

    template <class Fn>
    void collect_bn(Fn&& fn) {
        local.collect_bn("local", fn);
    }

    // parameters that participate in the graph for the current toggles and
    // still require grad (frozen backbone drops out here)
    std::vector<NamedParam<T>> trainable_params() {
        std::vector<NamedParam<T>> out;
        auto fn = [&out](const std::string& n, Tensor<T>& t) {
            if (t.requires_grad()) out.push_back({n, t, true});
        };
        if (toggles.cnn) local.collect("local", fn);
        if (toggles.vit) {
            global_enc.collect_backbone("global", fn);
            if (toggles.adapter) global_enc.collect_adapters("global", fn);
        }
        if (uses_text_features()) {
            if (toggles.text)
                text.collect("text", fn);
            else
                fn("null_token", null_token);
        }
        if (toggles.cnn && toggles.vit)
            fusion.collect_active("fusion", toggles.fusion_branch, toggles.fusion_gate, toggles.affm,
                                  true, fn);
        if (toggles.feb) {
            if (toggles.feb_attention == FebAttention::bidir)
                cross.collect_bidir("cross", fn);
            else if (toggles.feb_attention == FebAttention::cross)
                cross.collect_one_directional("cross", fn);
            else {
                fn("enh_w", enh_w);
                fn("enh_b", enh_b);
            }
        }
        head.collect("head", uses_text_features(), fn);
        return out;
    }

    std::vector<std::string> grad_census() {
        std::vector<std::string> names;
        collect_all([&names](const std::string& n, Tensor<T>& t) {
            if (t.has_grad()) names.push_back(n);
        });
        return names;
    }

    void zero_grad() {
        collect_all([](const std::string&, Tensor<T>& t) { t.clear_grad(); });
    }
};

}  // namespace ctfusion
