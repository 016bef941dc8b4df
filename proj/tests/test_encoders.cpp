#include <catch2/catch_amalgamated.hpp>

#include "ctfusion/encoders.hpp"
#include "ctfusion/gradcheck.hpp"

using namespace ctfusion;
using Catch::Approx;

namespace {
const bool guard_on = [] {
    set_nan_guard(true);
    return true;
}();

ModelDims desk_dims() { return ModelDims{}; }

ModelDims micro_dims() {
    ModelDims d;
    d.image_size = 16;
    d.channels = 8;
    d.vit_depth = 1;
    d.text_depth = 1;
    d.heads = 2;
    d.adapter_rank = 4;
    d.embed = 8;
    d.cls_hidden = 8;
    d.text_len = 8;
    d.mlp_ratio = 2;
    d.num_classes = 3;
    return d;
}
}  // namespace

using TD = Tensor<double>;

TEST_CASE("local encoder shape contract and determinism") {
    Rng rng(1);
    LocalEncoder<double> enc(64, rng);
    auto imgs = TD::uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
    auto out = enc.forward(imgs, Mode::train);
    REQUIRE(out.shape() == Shape{2, 64, 8, 8});

    // 48x48 is fine too: spatial extent is input/8 exactly
    LocalEncoder<double> enc2(16, rng);
    REQUIRE(enc2.forward(TD::uniform({1, 3, 48, 48}, rng, 0, 1), Mode::train).shape() ==
            Shape{1, 16, 6, 6});

    REQUIRE_THROWS_AS(enc.forward(TD::zeros({1, 3, 60, 60}), Mode::train), ShapeError);

    // zero image: finite and deterministic
    auto z1 = enc.forward(TD::zeros({1, 3, 64, 64}), Mode::train);
    auto z2 = enc.forward(TD::zeros({1, 3, 64, 64}), Mode::train);
    REQUIRE(z1.data() == z2.data());
    for (double v : z1.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("local encoder end-to-end gradient to first-stage weights") {
    Rng rng(2);
    LocalEncoder<double> enc(8, rng);
    auto imgs = TD::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto probe = TD::randn({1, 8, 2, 2}, rng);
    // conv bias is excluded: batch norm cancels any constant channel shift,
    // so its true gradient is identically zero and FD reads pure noise there
    double err = finite_diff_check_sampled(
        [&](const std::vector<TD>&) {
            return sum_all(mul(enc.forward(imgs, Mode::train), probe));
        },
        {enc.stages[0].w, enc.stages[0].gamma, enc.stages[1].w}, 1e-5, 30, rng);
    REQUIRE(err < 1e-4);
}

TEST_CASE("patch embedding token count and locality") {
    Rng rng(3);
    ModelDims d = desk_dims();
    GlobalEncoder<double> enc(d, rng);
    auto img = TD::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
    auto tokens = enc.patch_embed(img);
    REQUIRE(tokens.shape() == Shape{1, 65, 64});  // 64 patches + class token

    // purity: identical images give identical sequences
    auto two = concat<double>({img, img}, 0);
    auto t2 = enc.patch_embed(two);
    for (int64_t j = 0; j < 65 * 64; ++j)
        REQUIRE(t2.data()[static_cast<size_t>(j)] ==
                t2.data()[static_cast<size_t>(65 * 64 + j)]);

    // locality: editing one patch touches exactly one patch token row
    auto imgd = img.data();
    imgd[5] += 0.25;  // pixel (0, 5) lives in patch 0
    auto t3 = enc.patch_embed(TD::from({1, 3, 64, 64}, imgd));
    int changed_rows = 0;
    for (int64_t row = 0; row < 65; ++row) {
        bool diff = false;
        for (int64_t cc = 0; cc < 64; ++cc)
            if (t3.data()[static_cast<size_t>(row * 64 + cc)] !=
                tokens.data()[static_cast<size_t>(row * 64 + cc)])
                diff = true;
        changed_rows += diff;
        if (diff) REQUIRE(row == 1);  // first patch token, right after [CLS]
    }
    REQUIRE(changed_rows == 1);

    REQUIRE_THROWS_AS(enc.patch_embed(TD::zeros({1, 3, 60, 60})), ShapeError);
}

TEST_CASE("transformer block preserves shape and rows are stochastic") {
    Rng rng(4);
    for (int64_t s : {3, 9, 17}) {
        TransformerBlock<double> blk(16, 4, 32, rng);
        auto x = TD::randn({2, s, 16}, rng);
        Tensor<double> attn;
        auto y = blk.forward(x, false, nullptr, &attn);
        REQUIRE(y.shape() == Shape{2, s, 16});
        REQUIRE(attn.shape() == Shape{2, 4, s, s});
        auto sums = sum(attn, {3});
        for (double v : sums.data()) REQUIRE(v == Approx(1.0).epsilon(1e-6));
    }
    REQUIRE_THROWS_AS(TransformerBlock<double>(10, 3, 20, rng), ConfigError);
}

TEST_CASE("disabled adapter reproduces a vanilla block") {
    Rng rng(5);
    TransformerBlock<double> with(12, 2, 24, rng);
    with.adapter.emplace(12, 4, 0.3, rng);
    TransformerBlock<double> without = with;
    without.adapter.reset();
    auto x = TD::randn({1, 5, 12}, rng);
    REQUIRE(with.forward(x, false, nullptr, nullptr).data() ==
            without.forward(x, false, nullptr, nullptr).data());
    // and the enabled path differs (the fresh adapter scales by 1 - alpha)
    REQUIRE(with.forward(x, true, nullptr, nullptr).data() !=
            without.forward(x, false, nullptr, nullptr).data());
}

TEST_CASE("adapter contracts at the alpha extremes") {
    Rng rng(6);
    auto f = TD::randn({2, 5, 16}, rng);

    Adapter<double> bypass(16, 4, 0.0, rng);
    REQUIRE(bypass.apply(f).data() == f.data());  // bit-exact identity

    Adapter<double> pure(16, 4, 1.0, rng);
    {
        Rng r2(99);
        pure.w1 = TD::randn({16, 4}, r2, 0.5, true);
        pure.w2 = TD::randn({4, 16}, r2, 0.5, true);
    }
    auto manual = add(matmul(relu(add(matmul(f, pure.w1), pure.b1)), pure.w2), pure.b2);
    REQUIRE(pure.apply(f).data() == manual.data());

    // zero up-projection leaves (1 - alpha) * f
    Adapter<double> zup(16, 4, 0.25, rng);
    auto out = zup.apply(f);
    for (size_t i = 0; i < f.data().size(); ++i)
        REQUIRE(out.data()[i] == Approx(0.75 * f.data()[i]).margin(1e-12));

    // affine in alpha: out(a) = a * A(f) + (1 - a) * f
    Adapter<double> mid(16, 4, 0.5, rng);
    {
        Rng r3(7);
        mid.w1 = TD::randn({16, 4}, r3, 0.5, true);
        mid.w2 = TD::randn({4, 16}, r3, 0.5, true);
    }
    auto lo = mid, hi = mid;
    lo.alpha = 0.2;
    hi.alpha = 0.8;
    auto y_lo = lo.apply(f), y_mid = mid.apply(f), y_hi = hi.apply(f);
    for (size_t i = 0; i < f.data().size(); ++i)
        REQUIRE(y_mid.data()[i] == Approx(0.5 * (y_lo.data()[i] + y_hi.data()[i])).margin(1e-9));
}

TEST_CASE("adapter parameter count") {
    REQUIRE(adapter_param_count(64, 16, true) == 2128);  // 2*64*16 + 16 + 64
    REQUIRE(adapter_param_count(64, 16, false) == 2048);
    for (int64_t d : {4, 9, 64}) REQUIRE(adapter_param_count(d, d, true) == 2 * d * d + 2 * d);

    // census of an actual instance matches the closed form
    Rng rng(8);
    Adapter<double> a(64, 16, 0.2, rng);
    int64_t census = 0;
    a.collect("a", [&census](const std::string&, Tensor<double>& t) { census += t.numel(); });
    REQUIRE(census == 2128);
}

TEST_CASE("global encoder shapes and frozen gradient census") {
    Rng rng(9);
    ModelDims d = desk_dims();
    GlobalEncoder<double> enc(d, rng);
    auto imgs = TD::uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
    std::vector<Tensor<double>> attn;
    auto tokens = enc.forward(imgs, true, &attn);
    REQUIRE(tokens.shape() == Shape{2, 65, 64});
    REQUIRE(attn.size() == 2);

    // depth 0 degenerates to the patch embedding
    ModelDims d0 = desk_dims();
    d0.vit_depth = 0;
    GlobalEncoder<double> enc0(d0, rng);
    auto t0 = enc0.forward(TD::uniform({1, 3, 64, 64}, rng, 0, 1), true, nullptr);
    REQUIRE(t0.shape() == Shape{1, 65, 64});

    // frozen mode: exactly the adapter parameters receive gradients
    ModelDims md = micro_dims();
    GlobalEncoder<double> frozen(md, rng);
    frozen.set_frozen(true);
    auto mi = TD::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    sum_all(frozen.forward(mi, true, nullptr)).backward();
    std::vector<std::string> with_grad, adapters;
    frozen.collect("g", [&with_grad](const std::string& n, Tensor<double>& t) {
        if (t.has_grad()) with_grad.push_back(n);
    });
    frozen.collect_adapters("g", [&adapters](const std::string& n, Tensor<double>&) {
        adapters.push_back(n);
    });
    std::sort(with_grad.begin(), with_grad.end());
    std::sort(adapters.begin(), adapters.end());
    REQUIRE(with_grad == adapters);
    REQUIRE_FALSE(adapters.empty());

    // unfrozen, the backbone participates again
    frozen.set_frozen(false);
    frozen.collect("g", [](const std::string&, Tensor<double>& t) { t.clear_grad(); });
    sum_all(frozen.forward(mi, true, nullptr)).backward();
    REQUIRE(frozen.patch_w.has_grad());
}

TEST_CASE("prompt rendering") {
    auto ps = build_prompts({"Rust"}, "A diseased plant with {Class} marks");
    REQUIRE(ps.prompts == std::vector<std::string>{"a diseased plant with rust marks"});

    auto two = build_prompts({"Scab", "Mosaic"}, "A diseased plant with {Class} marks");
    REQUIRE(two.prompts[0] == "a diseased plant with scab marks");
    REQUIRE(two.prompts[1] == "a diseased plant with mosaic marks");

    REQUIRE_THROWS_AS(build_prompts({"Rust"}, "no placeholder here"), ConfigError);
    REQUIRE_THROWS_AS(build_prompts({"Rust"}, "{Class} and {Class}"), ConfigError);
    REQUIRE_THROWS_AS(build_prompts({}, "x {Class}"), ConfigError);
}

TEST_CASE("tokenizer contract") {
    auto ps = build_prompts({"rust", "scab"}, "a diseased plant with {Class} marks");
    auto vocab = Vocab::build(ps.prompts);

    auto ids = tokenize("a diseased plant with rust marks", vocab, 12);
    REQUIRE(ids.size() == 12);
    REQUIRE(ids[0] == Vocab::cls);
    for (int i = 1; i <= 6; ++i) REQUIRE(ids[static_cast<size_t>(i)] >= 3);  // real words
    for (int i = 7; i < 12; ++i) REQUIRE(ids[static_cast<size_t>(i)] == Vocab::pad);

    auto empty = tokenize("", vocab, 12);
    REQUIRE(empty[0] == Vocab::cls);
    for (int i = 1; i < 12; ++i) REQUIRE(empty[static_cast<size_t>(i)] == Vocab::pad);

    auto oov = tokenize("a zzz plant", vocab, 12);
    REQUIRE(oov[2] == Vocab::unk);

    // truncation to L
    REQUIRE(tokenize("a a a a a a a a a a a a a a a", vocab, 4).size() == 4);
}

TEST_CASE("text encoder outputs one [CLS] row per prompt") {
    Rng rng(10);
    ModelDims d = desk_dims();
    std::vector<std::string> names;
    for (int i = 0; i < 7; ++i) names.push_back("class" + std::to_string(i));
    auto ps = build_prompts(names, "a diseased plant with {Class} marks");
    TextEncoder<double> enc(Vocab::build(ps.prompts), d, rng);

    std::vector<std::vector<int64_t>> ids;
    for (const auto& p : ps.prompts) ids.push_back(tokenize(p, enc.vocab, d.text_len));
    auto feats = enc.encode(ids);
    REQUIRE(feats.shape() == Shape{7, 64});

    // identical prompts give identical rows
    auto dup = enc.encode({ids[0], ids[0]});
    for (int64_t j = 0; j < 64; ++j)
        REQUIRE(dup.data()[static_cast<size_t>(j)] == dup.data()[static_cast<size_t>(64 + j)]);

    REQUIRE_THROWS_AS(enc.encode({std::vector<int64_t>(static_cast<size_t>(d.text_len), 9999)}),
                      DataError);
}

TEST_CASE("pad positions get zero attention weight") {
    Rng rng(11);
    ModelDims d = micro_dims();
    auto ps = build_prompts({"rust", "scab", "grey"}, "a plant with {Class}");
    TextEncoder<double> enc(Vocab::build(ps.prompts), d, rng);
    std::vector<std::vector<int64_t>> ids;
    for (const auto& p : ps.prompts) ids.push_back(tokenize(p, enc.vocab, d.text_len));
    std::vector<Tensor<double>> attn;
    enc.encode(ids, &attn);
    REQUIRE(attn.size() == 1);
    const auto& a = attn[0];  // [K,H,L,L]
    int64_t k = a.dim(0), h = a.dim(1), L = a.dim(2);
    for (int64_t ki = 0; ki < k; ++ki)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t q = 0; q < L; ++q)
                for (int64_t c = 0; c < L; ++c)
                    if (ids[static_cast<size_t>(ki)][static_cast<size_t>(c)] == Vocab::pad) {
                        double wgt = a.data()[static_cast<size_t>(((ki * h + hi) * L + q) * L + c)];
                        REQUIRE(std::abs(wgt) < 1e-8);
                    }
}

TEST_CASE("appending extra pads leaves the [CLS] feature unchanged") {
    Rng rng(12);
    ModelDims wide = micro_dims();
    wide.text_len = 12;
    ModelDims slim = micro_dims();
    slim.text_len = 8;

    auto ps = build_prompts({"rust"}, "a plant with {Class}");
    auto vocab = Vocab::build(ps.prompts);
    TextEncoder<double> wide_enc(vocab, wide, rng);
    TextEncoder<double> slim_enc(vocab, slim, rng);

    // share weights: slim takes wide's tables (positions truncated) and blocks
    slim_enc.tok_embed = wide_enc.tok_embed;
    {
        std::vector<double> pos8(wide_enc.pos_embed.data().begin(),
                                 wide_enc.pos_embed.data().begin() + 8 * wide.channels);
        slim_enc.pos_embed = TD::from({8, wide.channels}, pos8, true);
    }
    slim_enc.blocks = wide_enc.blocks;

    auto ids8 = tokenize(ps.prompts[0], vocab, 8);
    auto ids12 = tokenize(ps.prompts[0], vocab, 12);
    auto f8 = slim_enc.encode({ids8});
    auto f12 = wide_enc.encode({ids12});
    for (size_t i = 0; i < f8.data().size(); ++i)
        REQUIRE(f8.data()[i] == Approx(f12.data()[i]).margin(1e-6));
}

TEST_CASE("micro global encoder gradient vs central differences") {
    Rng rng(13);
    ModelDims d = micro_dims();
    GlobalEncoder<double> enc(d, rng);
    auto img = TD::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto probe = TD::randn({1, 5, 8}, rng);
    double err = finite_diff_check_sampled(
        [&](const std::vector<TD>&) { return sum_all(mul(enc.forward(img, true, nullptr), probe)); },
        {enc.patch_w, enc.cls, enc.pos, enc.blocks[0].wq, enc.blocks[0].mlp_w1,
         enc.blocks[0].adapter->w1, enc.blocks[0].adapter->w2},
        1e-5, 12, rng);
    REQUIRE(err < 1e-4);
}
