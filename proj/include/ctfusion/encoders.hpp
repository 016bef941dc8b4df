#pragma once

// The three input encoders: a small strided CNN for local detail, a patch
// transformer with bottleneck adapters for global structure, and a word-level
// text encoder over class-prompt sentences.

#include "ctfusion/config.hpp"
#include "ctfusion/ops.hpp"

#include <array>
#include <cctype>
#include <map>
#include <optional>
#include <set>

namespace ctfusion {

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;  // false for the frozen backbone under freeze mode
};

namespace init {

template <class T>
Tensor<T> conv_weight(int64_t cout, int64_t cin, int64_t k, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    return Tensor<T>::randn({cout, cin, k, k}, rng, std, true);
}

template <class T>
Tensor<T> linear_weight(int64_t in, int64_t out, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(in + out));
    return Tensor<T>::randn({in, out}, rng, std, true);
}

}  // namespace init

// ---------------------------------------------------------------------------
// adapter: bottleneck MLP blended with its input by the residual ratio alpha

inline int64_t adapter_param_count(int64_t d, int64_t r, bool with_bias) {
    if (d < 1 || r < 1) throw ArgError("adapter_param_count: d and r must be >= 1");
    return with_bias ? 2 * d * r + r + d : 2 * d * r;
}

template <class T>
struct Adapter {
    Tensor<T> w1, b1;  // d -> r
    Tensor<T> w2, b2;  // r -> d
    double alpha = 0.2;

    Adapter() = default;
    Adapter(int64_t d, int64_t r, double alpha_, Rng& rng) : alpha(alpha_) {
        // small-variance down-projection, zero up-projection: starts as a
        // no-op beyond the (1 - alpha) scaling
        w1 = Tensor<T>::randn({d, r}, rng, 0.02, true);
        b1 = Tensor<T>::zeros({r}, true);
        w2 = Tensor<T>::zeros({r, d}, true);
        b2 = Tensor<T>::zeros({d}, true);
    }

    // f* = alpha * relu(f W1 + b1) W2 + b2 blended with (1 - alpha) * f
    Tensor<T> apply(const Tensor<T>& f) const {
        if (f.dim(-1) != w1.dim(0)) throw ShapeError("adapter: feature width mismatch");
        if (alpha == 0.0) return f;  // exact bypass
        auto h = relu(add(matmul(f, w1), b1));
        auto a = add(matmul(h, w2), b2);
        return add(scale(a, static_cast<T>(alpha)), scale(f, static_cast<T>(1.0 - alpha)));
    }

    template <class Fn>
    void collect(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w1", w1);
        fn(prefix + ".b1", b1);
        fn(prefix + ".w2", w2);
        fn(prefix + ".b2", b2);
    }
};

// ---------------------------------------------------------------------------
// pre-norm transformer block; the adapter, when present and enabled, rewrites
// each sublayer's output projection before the residual add

template <class T>
struct TransformerBlock {
    int64_t dim = 0, heads = 0;
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    // no key bias: a per-key constant shifts every score row uniformly and
    // cancels in the softmax, so it would be a dead parameter
    Tensor<T> wq, bq, wk, wv, bv, wo, bo;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    std::optional<Adapter<T>> adapter;

    TransformerBlock() = default;
    TransformerBlock(int64_t dim_, int64_t heads_, int64_t mlp_hidden, Rng& rng)
        : dim(dim_), heads(heads_) {
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("transformer block: dim " + std::to_string(dim) +
                              " not divisible by heads " + std::to_string(heads));
        ln1_g = Tensor<T>::ones({dim}, true);
        ln1_b = Tensor<T>::zeros({dim}, true);
        ln2_g = Tensor<T>::ones({dim}, true);
        ln2_b = Tensor<T>::zeros({dim}, true);
        wq = init::linear_weight<T>(dim, dim, rng);
        bq = Tensor<T>::zeros({dim}, true);
        wk = init::linear_weight<T>(dim, dim, rng);
        wv = init::linear_weight<T>(dim, dim, rng);
        bv = Tensor<T>::zeros({dim}, true);
        wo = init::linear_weight<T>(dim, dim, rng);
        bo = Tensor<T>::zeros({dim}, true);
        mlp_w1 = init::linear_weight<T>(dim, mlp_hidden, rng);
        mlp_b1 = Tensor<T>::zeros({mlp_hidden}, true);
        mlp_w2 = init::linear_weight<T>(mlp_hidden, dim, rng);
        mlp_b2 = Tensor<T>::zeros({dim}, true);
    }

    // x: [B,S,C]; key_bias: optional [B,1,1,S] additive attention-logit mask
    // (0 keep, large negative drop). attn_out receives the [B,H,S,S] weights.
    Tensor<T> forward(const Tensor<T>& x, bool adapter_enabled, const Tensor<T>* key_bias,
                      Tensor<T>* attn_out) const {
        int64_t b = x.dim(0), s = x.dim(1);
        int64_t dh = dim / heads;
        auto heads_split = [&](const Tensor<T>& t) {
            return transpose(reshape(t, {b, s, heads, dh}), {0, 2, 1, 3});  // [B,H,S,dh]
        };
        auto h = layer_norm(x, ln1_g, ln1_b, T(1e-5));
        auto q = heads_split(add(matmul(h, wq), bq));
        auto k = heads_split(matmul(h, wk));
        auto v = heads_split(add(matmul(h, wv), bv));
        auto scores = scale(matmul(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(double(dh))));
        if (key_bias) scores = add(scores, *key_bias);
        auto attn = softmax(scores, -1);  // [B,H,S,S]
        if (attn_out) *attn_out = attn;
        auto ctx = reshape(transpose(matmul(attn, v), {0, 2, 1, 3}), {b, s, dim});
        auto proj = add(matmul(ctx, wo), bo);
        if (adapter_enabled && adapter) proj = adapter->apply(proj);
        auto x1 = add(x, proj);

        auto h2 = layer_norm(x1, ln2_g, ln2_b, T(1e-5));
        auto m = add(matmul(relu(add(matmul(h2, mlp_w1), mlp_b1)), mlp_w2), mlp_b2);
        if (adapter_enabled && adapter) m = adapter->apply(m);
        return add(x1, m);
    }

    template <class Fn>
    void collect_backbone(const std::string& p, Fn&& fn) {
        fn(p + ".ln1_g", ln1_g); fn(p + ".ln1_b", ln1_b);
        fn(p + ".ln2_g", ln2_g); fn(p + ".ln2_b", ln2_b);
        fn(p + ".wq", wq); fn(p + ".bq", bq);
        fn(p + ".wk", wk);
        fn(p + ".wv", wv); fn(p + ".bv", bv);
        fn(p + ".wo", wo); fn(p + ".bo", bo);
        fn(p + ".mlp_w1", mlp_w1); fn(p + ".mlp_b1", mlp_b1);
        fn(p + ".mlp_w2", mlp_w2); fn(p + ".mlp_b2", mlp_b2);
    }
};

// ---------------------------------------------------------------------------
// local branch: three conv(3x3, stride 2, pad 1) -> batch norm -> relu stages,
// channels 3 -> 16 -> 32 -> C; spatial extent shrinks by exactly 8

template <class T>
struct LocalEncoder {
    struct Stage {
        Tensor<T> w, b, gamma, beta;
        BnState<T> bn;
    };
    std::array<Stage, 3> stages;
    int64_t out_channels = 0;

    LocalEncoder() = default;
    LocalEncoder(int64_t channels, Rng& rng) : out_channels(channels) {
        int64_t widths[4] = {3, 16, 32, channels};
        for (int i = 0; i < 3; ++i) {
            stages[i].w = init::conv_weight<T>(widths[i + 1], widths[i], 3, rng);
            stages[i].b = Tensor<T>::zeros({widths[i + 1]}, true);
            stages[i].gamma = Tensor<T>::ones({widths[i + 1]}, true);
            stages[i].beta = Tensor<T>::zeros({widths[i + 1]}, true);
        }
    }

    // images: [B,3,H,W] with H,W divisible by 8 -> [B,C,H/8,W/8]
    Tensor<T> forward(const Tensor<T>& images, Mode mode) {
        if (images.rank() != 4 || images.dim(1) != 3)
            throw ShapeError("local encoder: expected [B,3,H,W]");
        if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0)
            throw ShapeError("local encoder: image extent " + std::to_string(images.dim(2)) + "x" +
                             std::to_string(images.dim(3)) + " not divisible by 8");
        Tensor<T> x = images;
        for (auto& st : stages)
            x = relu(batch_norm(conv2d(x, st.w, st.b, 2, 1), st.gamma, st.beta, T(1e-5), mode, st.bn));
        return x;
    }

    template <class Fn>
    void collect(const std::string& p, Fn&& fn) {
        for (size_t i = 0; i < stages.size(); ++i) {
            std::string sp = p + ".stage" + std::to_string(i);
            fn(sp + ".w", stages[i].w);
            fn(sp + ".b", stages[i].b);
            fn(sp + ".gamma", stages[i].gamma);
            fn(sp + ".beta", stages[i].beta);
        }
    }

    template <class Fn>
    void collect_bn(const std::string& p, Fn&& fn) {
        for (size_t i = 0; i < stages.size(); ++i)
            fn(p + ".stage" + std::to_string(i) + ".bn", stages[i].bn);
    }
};

// ---------------------------------------------------------------------------
// global branch: patch embedding + class token + learned positions, then
// `depth` transformer blocks, one adapter per block

// images [B,3,H,W] -> flattened non-overlapping patches [B,N,3*P*P]
template <class T>
Tensor<T> extract_patches(const Tensor<T>& images, int64_t p) {
    if (images.rank() != 4) throw ShapeError("extract_patches: expected [B,C,H,W]");
    int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (p < 1 || h % p != 0 || w % p != 0)
        throw ShapeError("extract_patches: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch " + std::to_string(p));
    int64_t gh = h / p, gw = w / p, n = gh * gw, pd = c * p * p;
    const auto& xd = images.data();
    std::vector<T> out(static_cast<size_t>(b * n * pd));
    auto src_index = [c, h, w, p, gw](int64_t bi, int64_t ni, int64_t k) {
        int64_t ci = k / (p * p), py = (k / p) % p, px = k % p;
        int64_t gy = ni / gw, gx = ni % gw;
        return ((bi * c + ci) * h + gy * p + py) * w + gx * p + px;
    };
    (void)gh;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t k = 0; k < pd; ++k)
                out[static_cast<size_t>((bi * n + ni) * pd + k)] =
                    xd[static_cast<size_t>(src_index(bi, ni, k))];
    return Tensor<T>::make_op({b, n, pd}, std::move(out), {images},
                              [images, b, n, pd, src_index](typename Tensor<T>::Node& self) {
                                  std::vector<T> g(images.data().size(), T(0));
                                  for (int64_t bi = 0; bi < b; ++bi)
                                      for (int64_t ni = 0; ni < n; ++ni)
                                          for (int64_t k = 0; k < pd; ++k)
                                              g[static_cast<size_t>(src_index(bi, ni, k))] +=
                                                  self.grad[static_cast<size_t>((bi * n + ni) * pd + k)];
                                  Tensor<T>::accum(images.node(), g);
                              });
}

template <class T>
struct GlobalEncoder {
    int64_t image = 0, patch = 0, dim = 0;
    Tensor<T> patch_w, patch_b;  // [3*P*P, C], [C]
    Tensor<T> cls;               // [1,1,C]
    Tensor<T> pos;               // [1,N+1,C]
    std::vector<TransformerBlock<T>> blocks;
    bool frozen = false;

    GlobalEncoder() = default;
    GlobalEncoder(const ModelDims& d, Rng& rng) : image(d.image_size), patch(d.patch), dim(d.channels) {
        int64_t n = d.patches();
        patch_w = init::linear_weight<T>(3 * patch * patch, dim, rng);
        patch_b = Tensor<T>::zeros({dim}, true);
        cls = Tensor<T>::randn({1, 1, dim}, rng, 0.02, true);
        pos = Tensor<T>::randn({1, n + 1, dim}, rng, 0.02, true);
        blocks.reserve(static_cast<size_t>(d.vit_depth));
        for (int i = 0; i < d.vit_depth; ++i) {
            blocks.emplace_back(dim, d.heads, static_cast<int64_t>(d.mlp_ratio) * dim, rng);
            blocks.back().adapter.emplace(dim, d.adapter_rank, d.adapter_alpha, rng);
        }
    }

    // [B,3,H,W] -> [B,N+1,C]: class token first, positions added
    Tensor<T> patch_embed(const Tensor<T>& images) const {
        int64_t b = images.dim(0);
        auto tokens = add(matmul(extract_patches(images, patch), patch_w), patch_b);  // [B,N,C]
        auto cls_b = add(cls, Tensor<T>::zeros({b, 1, 1}));                           // broadcast copy
        return add(concat<T>({cls_b, tokens}, 1), pos);
    }

    // attn, when given, receives one [B,H,N+1,N+1] map per block
    Tensor<T> forward(const Tensor<T>& images, bool adapter_enabled,
                      std::vector<Tensor<T>>* attn = nullptr) const {
        auto x = patch_embed(images);
        for (const auto& blk : blocks) {
            Tensor<T> a;
            x = blk.forward(x, adapter_enabled, nullptr, attn ? &a : nullptr);
            if (attn) attn->push_back(a);
        }
        return x;
    }

    void set_frozen(bool on) {
        frozen = on;
        auto freeze = [on](const std::string&, Tensor<T>& t) { t.set_requires_grad(!on); };
        patch_w.set_requires_grad(!on);
        patch_b.set_requires_grad(!on);
        cls.set_requires_grad(!on);
        pos.set_requires_grad(!on);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_backbone("", freeze);
    }

    template <class Fn>
    void collect_backbone(const std::string& p, Fn&& fn) {
        fn(p + ".patch_w", patch_w);
        fn(p + ".patch_b", patch_b);
        fn(p + ".cls", cls);
        fn(p + ".pos", pos);
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_backbone(p + ".block" + std::to_string(i), fn);
    }

    template <class Fn>
    void collect_adapters(const std::string& p, Fn&& fn) {
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].adapter->collect(p + ".block" + std::to_string(i) + ".adapter", fn);
    }

    template <class Fn>
    void collect(const std::string& p, Fn&& fn) {
        collect_backbone(p, fn);
        collect_adapters(p, fn);
    }
};

// ---------------------------------------------------------------------------
// prompts, vocabulary, tokenizer

struct PromptSet {
    std::string tmpl;
    std::vector<std::string> class_names;
    std::vector<std::string> prompts;  // one per class, in class order
};

inline std::string lowercased(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// substitutes each class name into the {Class} placeholder (case-insensitive
// on the placeholder), then lowercases the rendered prompt
inline PromptSet build_prompts(const std::vector<std::string>& class_names, const std::string& tmpl) {
    if (class_names.empty()) throw ConfigError("build_prompts: class name list is empty");
    std::string lower_tmpl = lowercased(tmpl);
    const std::string key = "{class}";
    size_t first = lower_tmpl.find(key);
    if (first == std::string::npos)
        throw ConfigError("build_prompts: template must contain a {Class} placeholder");
    if (lower_tmpl.find(key, first + 1) != std::string::npos)
        throw ConfigError("build_prompts: template must contain {Class} exactly once");
    PromptSet ps;
    ps.tmpl = tmpl;
    ps.class_names = class_names;
    for (const auto& name : class_names) {
        std::string rendered = tmpl;
        rendered.replace(first, key.size(), name);
        ps.prompts.push_back(lowercased(rendered));
    }
    return ps;
}

// maximal [a-z0-9] runs after lowercasing
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char raw : lowercased(text)) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(c));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

struct Vocab {
    std::vector<std::string> id_to_tok;  // [PAD], [CLS], [UNK], then sorted words
    std::map<std::string, int64_t> tok_to_id;

    static constexpr int64_t pad = 0;
    static constexpr int64_t cls = 1;
    static constexpr int64_t unk = 2;

    static Vocab build(const std::vector<std::string>& corpus) {
        std::set<std::string> words;
        for (const auto& line : corpus)
            for (auto& w : split_words(line)) words.insert(w);
        Vocab v;
        v.id_to_tok = {"[PAD]", "[CLS]", "[UNK]"};
        for (const auto& w : words) v.id_to_tok.push_back(w);
        for (size_t i = 0; i < v.id_to_tok.size(); ++i)
            v.tok_to_id[v.id_to_tok[i]] = static_cast<int64_t>(i);
        return v;
    }

    static Vocab from_tokens(std::vector<std::string> tokens) {
        Vocab v;
        v.id_to_tok = std::move(tokens);
        for (size_t i = 0; i < v.id_to_tok.size(); ++i)
            v.tok_to_id[v.id_to_tok[i]] = static_cast<int64_t>(i);
        return v;
    }

    int64_t size() const { return static_cast<int64_t>(id_to_tok.size()); }
};

// [CLS] + word ids (unknowns -> [UNK]), padded/truncated to max_len
inline std::vector<int64_t> tokenize(const std::string& text, const Vocab& vocab, int64_t max_len) {
    std::vector<int64_t> ids{Vocab::cls};
    for (const auto& w : split_words(text)) {
        auto it = vocab.tok_to_id.find(w);
        ids.push_back(it == vocab.tok_to_id.end() ? Vocab::unk : it->second);
    }
    ids.resize(static_cast<size_t>(max_len), Vocab::pad);
    return ids;
}

// ---------------------------------------------------------------------------
// text encoder: embeddings + positions, masked transformer blocks, [CLS] out

template <class T>
struct TextEncoder {
    Vocab vocab;
    int64_t max_len = 0, dim = 0;
    Tensor<T> tok_embed;  // [V, C]
    Tensor<T> pos_embed;  // [L, C]
    std::vector<TransformerBlock<T>> blocks;

    TextEncoder() = default;
    TextEncoder(Vocab v, const ModelDims& d, Rng& rng)
        : vocab(std::move(v)), max_len(d.text_len), dim(d.channels) {
        tok_embed = Tensor<T>::randn({vocab.size(), dim}, rng, 0.02, true);
        pos_embed = Tensor<T>::randn({max_len, dim}, rng, 0.02, true);
        blocks.reserve(static_cast<size_t>(d.text_depth));
        for (int i = 0; i < d.text_depth; ++i)
            blocks.emplace_back(dim, d.heads, static_cast<int64_t>(d.mlp_ratio) * dim, rng);
    }

    // prompt_ids: K sequences of length L -> [K, C] ([CLS] features).
    // PAD key columns get a large negative attention bias.
    Tensor<T> encode(const std::vector<std::vector<int64_t>>& prompt_ids,
                     std::vector<Tensor<T>>* attn = nullptr) const {
        int64_t k = static_cast<int64_t>(prompt_ids.size());
        if (k == 0) throw ArgError("text encoder: no prompts");
        std::vector<int64_t> flat;
        flat.reserve(static_cast<size_t>(k * max_len));
        std::vector<T> bias(static_cast<size_t>(k * max_len), T(0));
        for (int64_t i = 0; i < k; ++i) {
            if (static_cast<int64_t>(prompt_ids[static_cast<size_t>(i)].size()) != max_len)
                throw ShapeError("text encoder: sequence length != " + std::to_string(max_len));
            for (int64_t j = 0; j < max_len; ++j) {
                int64_t id = prompt_ids[static_cast<size_t>(i)][static_cast<size_t>(j)];
                if (id < 0 || id >= vocab.size())
                    throw DataError("text encoder: token id " + std::to_string(id) + " out of range");
                flat.push_back(id);
                if (id == Vocab::pad) bias[static_cast<size_t>(i * max_len + j)] = T(-1e9);
            }
        }
        auto key_bias = Tensor<T>::from({k, 1, 1, max_len}, std::move(bias));
        auto x = add(reshape(index_select(tok_embed, flat), {k, max_len, dim}), pos_embed);
        for (const auto& blk : blocks) {
            Tensor<T> a;
            x = blk.forward(x, false, &key_bias, attn ? &a : nullptr);
            if (attn) attn->push_back(a);
        }
        return reshape(narrow(x, 1, 0, 1), {k, dim});  // position 0 = [CLS]
    }

    void set_frozen(bool on) {
        auto freeze = [on](const std::string&, Tensor<T>& t) { t.set_requires_grad(!on); };
        tok_embed.set_requires_grad(!on);
        pos_embed.set_requires_grad(!on);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_backbone("", freeze);
    }

    template <class Fn>
    void collect(const std::string& p, Fn&& fn) {
        fn(p + ".tok_embed", tok_embed);
        fn(p + ".pos_embed", pos_embed);
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_backbone(p + ".block" + std::to_string(i), fn);
    }
};

}  // namespace ctfusion
