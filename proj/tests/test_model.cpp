#include <catch2/catch_amalgamated.hpp>

#include "ctfusion/gradsuite.hpp"
#include "ctfusion/model.hpp"
#include "ctfusion/train.hpp"

using namespace ctfusion;
using Catch::Approx;

namespace {
const bool guard_on = [] {
    set_nan_guard(true);
    return true;
}();

std::vector<std::string> class7() {
    std::vector<std::string> n;
    for (int i = 0; i < 7; ++i) n.push_back("class" + std::to_string(i));
    return n;
}

// a micro full-toggle model plus a matching random batch
struct MicroRig {
    RunConfig cfg;
    Model<double> model;
    Tensor<double> images;

    explicit MicroRig(uint64_t seed, std::vector<std::string> names = {"rust", "scab", "grey"})
        : cfg(micro_run_config(seed)),
          model(Model<double>::create(cfg, names)),
          images([&] {
              Rng rng(mix_seed(seed, 0x1111));
              return Tensor<double>::uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
          }()) {}
};
}  // namespace

using TD = Tensor<double>;

TEST_CASE("cross attention shape contract") {
    Rng rng(1);
    BiCrossAttention<double> bima(64, 64, 64, 4, rng);
    auto v = TD::randn({8, 64, 64}, rng);
    auto l = TD::randn({8, 7, 64}, rng);
    Tensor<double> av, al;
    auto [v_hat, l_hat] = bima.forward(v, l, &av, &al);
    REQUIRE(av.shape() == Shape{8, 4, 64, 7});
    REQUIRE(al.shape() == Shape{8, 4, 7, 64});
    REQUIRE(v_hat.shape() == Shape{8, 64, 64});
    REQUIRE(l_hat.shape() == Shape{8, 7, 64});

    REQUIRE_THROWS_AS(BiCrossAttention<double>(64, 64, 30, 4, rng), ConfigError);
}

TEST_CASE("cross attention rows are stochastic across seeds") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        int64_t nv = 3 + static_cast<int64_t>(rng.randint(6));
        int64_t nl = 1 + static_cast<int64_t>(rng.randint(5));
        BiCrossAttention<double> bima(8, 8, 8, 2, rng);
        auto v = TD::randn({2, nv, 8}, rng, 2.0);
        auto l = TD::randn({2, nl, 8}, rng, 2.0);
        Tensor<double> av, al;
        bima.forward(v, l, &av, &al);
        auto sv = sum(av, {3});
        auto sl = sum(al, {3});
        for (double s : sv.data()) REQUIRE(s == Approx(1.0).epsilon(1e-6));
        for (double s : sl.data()) REQUIRE(s == Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("single text token collapses visual attention to weight one") {
    Rng rng(2);
    BiCrossAttention<double> bima(8, 8, 8, 2, rng);
    auto v = TD::randn({2, 5, 8}, rng);
    auto l = TD::randn({2, 1, 8}, rng);
    Tensor<double> av;
    bima.forward(v, l, &av);
    for (double x : av.data()) REQUIRE(x == Approx(1.0));
}

TEST_CASE("scaling can ride on the query instead of the scores") {
    Rng rng(3);
    BiCrossAttention<double> bima(8, 8, 8, 2, rng);
    auto v = TD::randn({1, 4, 8}, rng);
    auto l = TD::randn({1, 3, 8}, rng);
    Tensor<double> av;
    bima.forward(v, l, &av);

    // unscaled scores on a pre-scaled query reproduce the same attention
    double inv = 1.0 / std::sqrt(4.0);  // d_h = 8/2
    auto q_pre = bima.split_heads(matmul(v, scale(bima.wq_v, inv)));
    auto k = bima.split_heads(matmul(l, bima.wk_l));
    auto av2 = softmax(matmul(q_pre, transpose_last2(k)), -1);
    for (size_t i = 0; i < av.data().size(); ++i)
        REQUIRE(av.data()[i] == Approx(av2.data()[i]).margin(1e-6));
}

TEST_CASE("pooled weighted fusion") {
    Rng rng(4);
    FusionHead<double> head(64, 64, 64, 7, rng);
    auto v_hat = TD::randn({3, 10, 64}, rng);
    auto l_hat = TD::randn({3, 7, 64}, rng);
    auto fused = head.pool_fuse(v_hat, &l_hat);
    REQUIRE(fused.shape() == Shape{3, 128});  // d_v + d_l at desk scale

    // w_l = 0 zeroes the text half
    head.w_l = TD::zeros({1}, true);
    auto gated = head.pool_fuse(v_hat, &l_hat);
    for (int64_t b = 0; b < 3; ++b)
        for (int64_t j = 64; j < 128; ++j)
            REQUIRE(gated.data()[static_cast<size_t>(b * 128 + j)] == 0.0);

    // constant rows pool to that constant
    auto cv = TD::full({1, 5, 64}, 2.5);
    head.w_v = TD::ones({1}, true);
    auto pooled = head.pool_fuse(cv, nullptr);
    for (int64_t j = 0; j < 64; ++j) REQUIRE(pooled.data()[static_cast<size_t>(j)] == Approx(2.5));
}

TEST_CASE("classifier head emits probability rows") {
    Rng rng(5);
    FusionHead<double> head(8, 8, 8, 7, rng);
    auto fused = TD::randn({4, 16}, rng, 2.0);
    auto probs = head.classify(fused);
    REQUIRE(probs.shape() == Shape{4, 7});
    auto rowsum = sum(probs, {1});
    for (double s : rowsum.data()) REQUIRE(s == Approx(1.0).epsilon(1e-6));

    // zero final layer: uniform 1/K
    head.fc2_w = TD::zeros({8, 7}, true);
    head.fc2_b = TD::zeros({7}, true);
    auto uniform = head.classify(fused);
    for (double p : uniform.data()) REQUIRE(p == Approx(1.0 / 7.0));

    // shift invariance of the bias
    Rng r2(6);
    head.fc2_w = TD::randn({8, 7}, r2, 0.5, true);
    head.fc2_b = TD::randn({7}, r2, 0.5, true);
    auto base = head.classify(fused);
    head.fc2_b = add_scalar(head.fc2_b, 3.7);
    auto shifted = head.classify(fused);
    for (size_t i = 0; i < base.data().size(); ++i)
        REQUIRE(base.data()[i] == Approx(shifted.data()[i]).margin(1e-6));
}

TEST_CASE("model forward: full toggles produce one probability row per image") {
    RunConfig cfg;  // desk scale
    cfg.train.seed = 7;
    auto model = Model<double>::create(cfg, class7());
    Rng rng(8);
    auto images = TD::uniform({8, 3, 64, 64}, rng, 0.0, 1.0);
    Diagnostics<double> diag;
    auto probs = model.forward(images, Mode::train, &diag);
    REQUIRE(probs.shape() == Shape{8, 7});
    auto rowsum = sum(probs, {1});
    for (double s : rowsum.data()) REQUIRE(s == Approx(1.0).epsilon(1e-6));
    REQUIRE(diag.gate.shape() == Shape{8, 2});
    REQUIRE(diag.att_v.shape() == Shape{8, 4, 64, 7});
    REQUIRE(diag.fused_map.shape() == Shape{8, 64, 8, 8});
    REQUIRE(diag.logits.shape() == Shape{8, 7});
    REQUIRE(diag.vit_attn.size() == 2);
}

TEST_CASE("model forward: toggle fallbacks keep the output shape") {
    for (auto mutate : std::vector<std::function<void(Toggles&)>>{
             [](Toggles& t) { t.text = false; },
             [](Toggles& t) { t.feb = false; },
             [](Toggles& t) { t.affm = false; },
             [](Toggles& t) { t.vit = false; t.affm = false; },
             [](Toggles& t) { t.cnn = false; t.affm = false; },
             [](Toggles& t) { t.adapter = false; },
             [](Toggles& t) { t.feb_attention = FebAttention::conv; },
             [](Toggles& t) { t.feb_attention = FebAttention::cross; },
             [](Toggles& t) { t.fusion_branch = FusionBranch::attn; },
             [](Toggles& t) { t.fusion_branch = FusionBranch::none; },
             [](Toggles& t) { t.fusion_gate = false; }}) {
        RunConfig cfg = micro_run_config(9);
        mutate(cfg.toggles);
        auto model = Model<double>::create(cfg, {"a", "b", "c"});
        Rng rng(10);
        auto probs = model.forward(TD::uniform({2, 3, 16, 16}, rng, 0, 1), Mode::train);
        REQUIRE(probs.shape() == Shape{2, 3});
        auto rowsum = sum(probs, {1});
        for (double s : rowsum.data()) REQUIRE(s == Approx(1.0).epsilon(1e-6));
    }

    RunConfig bad = micro_run_config(9);
    bad.toggles.cnn = bad.toggles.vit = false;
    REQUIRE_THROWS_AS(Model<double>::create(bad, {"a", "b", "c"}), ConfigError);
}

TEST_CASE("duplicate images produce identical probability rows in eval mode") {
    MicroRig rig(11);
    // one training step to populate batch-norm running stats
    auto labels = std::vector<int>{0, 1};
    rig.model.zero_grad();
    cross_entropy(rig.model.forward(rig.images, Mode::train), labels).backward();

    Rng rng(12);
    auto one = TD::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto dup = concat<double>({one, one}, 0);
    auto probs = rig.model.forward(dup, Mode::eval);
    for (int64_t j = 0; j < 3; ++j)
        REQUIRE(probs.data()[static_cast<size_t>(j)] == probs.data()[static_cast<size_t>(3 + j)]);
}

TEST_CASE("text token permutation leaves the probabilities unchanged") {
    MicroRig rig(13);
    Rng rng(14);
    auto v = TD::randn({2, 5, 8}, rng);
    auto l = TD::randn({2, 3, 8}, rng);
    Tensor<double> av, al;
    auto [v_hat, l_hat] = rig.model.cross.forward(v, l, &av, &al);

    std::vector<int64_t> perm{2, 0, 1};
    std::vector<Tensor<double>> parts;
    for (int64_t p : perm) parts.push_back(narrow(l, 1, p, 1));
    auto l_perm = concat<double>(parts, 1);
    Tensor<double> av_p, al_p;
    auto [v_hat_p, l_hat_p] = rig.model.cross.forward(v, l_perm, &av_p, &al_p);

    // visual enhancement is invariant; text rows and A_v columns permute
    for (size_t i = 0; i < v_hat.data().size(); ++i)
        REQUIRE(v_hat.data()[i] == Approx(v_hat_p.data()[i]).margin(1e-9));
    for (size_t pi = 0; pi < perm.size(); ++pi) {
        auto want = narrow(l_hat, 1, perm[static_cast<size_t>(pi)], 1);
        auto got = narrow(l_hat_p, 1, static_cast<int64_t>(pi), 1);
        for (size_t i = 0; i < want.data().size(); ++i)
            REQUIRE(got.data()[i] == Approx(want.data()[i]).margin(1e-9));
        auto want_col = narrow(av, 3, perm[static_cast<size_t>(pi)], 1);
        auto got_col = narrow(av_p, 3, static_cast<int64_t>(pi), 1);
        for (size_t i = 0; i < want_col.data().size(); ++i)
            REQUIRE(got_col.data()[i] == Approx(want_col.data()[i]).margin(1e-9));
    }

    // pooled fusion, and hence the classifier output, is permutation-invariant
    auto probs_a = rig.model.head.classify(rig.model.head.pool_fuse(v_hat, &l_hat));
    auto probs_b = rig.model.head.classify(rig.model.head.pool_fuse(v_hat_p, &l_hat_p));
    for (size_t i = 0; i < probs_a.data().size(); ++i)
        REQUIRE(probs_a.data()[i] == Approx(probs_b.data()[i]).margin(1e-6));
}

TEST_CASE("gradient reaches both fusion weights") {
    MicroRig rig(15);
    rig.model.zero_grad();
    cross_entropy(rig.model.forward(rig.images, Mode::train), {0, 2}).backward();
    REQUIRE(rig.model.head.w_v.has_grad());
    REQUIRE(rig.model.head.w_l.has_grad());
    REQUIRE(rig.model.head.w_v.grad()[0] != 0.0);
    REQUIRE(rig.model.head.w_l.grad()[0] != 0.0);
}

TEST_CASE("frozen backbone routes gradients to adapters and head only") {
    RunConfig cfg = micro_run_config(16);
    cfg.toggles.freeze_backbone = true;
    auto model = Model<double>::create(cfg, {"a", "b", "c"});
    Rng rng(17);
    auto images = TD::uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
    model.zero_grad();
    cross_entropy(model.forward(images, Mode::train), {0, 1}).backward();

    auto census = model.grad_census();
    REQUIRE_FALSE(census.empty());
    for (const auto& name : census) {
        bool adapter = name.find(".adapter.") != std::string::npos;
        bool downstream = name.rfind("fusion.", 0) == 0 || name.rfind("cross.", 0) == 0 ||
                          name.rfind("head.", 0) == 0;
        INFO(name);
        REQUIRE((adapter || downstream));
    }
    // every adapter parameter is present
    std::set<std::string> got(census.begin(), census.end());
    model.global_enc.collect_adapters("global", [&](const std::string& n, Tensor<double>&) {
        INFO(n);
        REQUIRE(got.count(n) == 1);
    });
}

TEST_CASE("micro model end-to-end gradient check") {
    double err = model_gradient_check(1, 6);
    REQUIRE(err < 1e-4);
}
