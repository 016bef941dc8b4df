#include <catch2/catch_amalgamated.hpp>

#include "ctfusion/checkpoint.hpp"
#include "ctfusion/gradsuite.hpp"
#include "ctfusion/reports.hpp"

#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace ctfusion;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {
const bool guard_on = [] {
    set_nan_guard(true);
    return true;
}();

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("ctfusion_io_" + std::to_string(::getpid()) + "_" + std::to_string(rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_cfg(uint64_t seed) {
    RunConfig cfg = micro_run_config(seed);
    cfg.dims.image_size = 32;
    cfg.train.batch_size = 8;
    cfg.train.epochs = 1;
    cfg.train.lr = 1e-3;
    cfg.train.precision = Precision::f32;
    return cfg;
}
}  // namespace

TEST_CASE("crc32 known vector and single-byte sensitivity") {
    const char* s = "123456789";
    REQUIRE(crc32_ieee(reinterpret_cast<const uint8_t*>(s), 9) == 0xCBF43926u);

    Rng rng(1);
    std::vector<uint8_t> buf(257);
    for (auto& b : buf) b = static_cast<uint8_t>(rng.randint(256));
    uint32_t base = crc32_ieee(buf.data(), buf.size());
    for (int trial = 0; trial < 40; ++trial) {
        auto copy = buf;
        size_t at = static_cast<size_t>(rng.randint(static_cast<int64_t>(copy.size())));
        uint8_t flip = static_cast<uint8_t>(1 + rng.randint(255));
        copy[at] ^= flip;
        REQUIRE(crc32_ieee(copy.data(), copy.size()) != base);
    }
}

TEST_CASE("checkpoint round-trip is bit-exact at f32 and metrics agree") {
    TempDir tmp;
    auto cfg = tiny_cfg(31);
    auto ds = generate_synthetic<float>(3, 6, 32, 11);
    auto [train, test] = split_dataset(ds, 0.5, cfg.train.seed);
    auto model = Model<float>::create(cfg, ds.class_names);
    AdamState<float> opt;
    train_loop(model, train, test, cfg.train, &opt);
    auto before = evaluate(model, test, 8);

    auto path = (tmp.path / "m.ctcp").string();
    save_checkpoint(model, &opt, cfg, path);
    auto bundle = load_checkpoint<float>(path);

    // every parameter: bytes out = bytes in
    std::map<std::string, std::vector<float>> orig;
    model.collect_all([&orig](const std::string& n, Tensor<float>& t) { orig[n] = t.data(); });
    bundle.model.collect_all([&orig](const std::string& n, Tensor<float>& t) {
        INFO(n);
        REQUIRE(orig.at(n) == t.data());
    });
    REQUIRE(bundle.has_optimizer);
    REQUIRE(bundle.opt.step == opt.step);
    REQUIRE(bundle.class_names == ds.class_names);
    REQUIRE(bundle.model.text.vocab.id_to_tok == model.text.vocab.id_to_tok);

    auto after = evaluate(bundle.model, test, 8);
    REQUIRE(before.accuracy == after.accuracy);
    REQUIRE(before.confusion == after.confusion);
    REQUIRE(before.macro_f1 == after.macro_f1);

    // training resumes from the loaded optimizer state identically
    TrainConfig more = cfg.train;
    more.epochs = 1;
    auto h1 = train_loop(model, train, test, more, &opt);
    auto h2 = train_loop(bundle.model, train, test, more, &bundle.opt);
    REQUIRE(h1.back().train_loss == h2.back().train_loss);
}

TEST_CASE("checkpoint corruption and version checks") {
    TempDir tmp;
    auto cfg = tiny_cfg(32);
    auto ds = generate_synthetic<float>(2, 3, 32, 12);
    auto model = Model<float>::create(cfg, ds.class_names);
    auto path = (tmp.path / "m.ctcp").string();
    save_checkpoint<float>(model, nullptr, cfg, path);
    REQUIRE_NOTHROW(load_checkpoint<float>(path));

    auto bytes = [&] {
        std::ifstream in(path, std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
    }();

    auto rewrite = [&](std::vector<char> mod, const std::string& name) {
        auto p = (tmp.path / name).string();
        std::ofstream out(p, std::ios::binary);
        out.write(mod.data(), static_cast<std::streamsize>(mod.size()));
        return p;
    };

    // flipped blob byte -> CRC error
    {
        auto mod = bytes;
        mod[mod.size() - 100] = static_cast<char>(mod[mod.size() - 100] ^ 0x40);
        REQUIRE_THROWS_AS(load_checkpoint<float>(rewrite(mod, "crc.ctcp")), FormatError);
    }
    // truncated file -> length error
    {
        auto mod = bytes;
        mod.resize(mod.size() - 9);
        REQUIRE_THROWS_AS(load_checkpoint<float>(rewrite(mod, "trunc.ctcp")), FormatError);
    }
    // unsupported version
    {
        auto mod = bytes;
        mod[4] = 99;
        try {
            load_checkpoint<float>(rewrite(mod, "ver.ctcp"));
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(std::string(e.what()).find("version") != std::string::npos);
        }
    }
    // wrong magic
    {
        auto mod = bytes;
        mod[0] = 'X';
        REQUIRE_THROWS_AS(load_checkpoint<float>(rewrite(mod, "magic.ctcp")), FormatError);
    }
    REQUIRE_THROWS_AS(load_checkpoint<float>((tmp.path / "missing.ctcp").string()), DataError);
}

TEST_CASE("run config defaults and overrides") {
    auto cfg = run_config_from_json(nlohmann::json::object());
    REQUIRE(cfg.train.lr == Approx(3.5e-5));
    REQUIRE(cfg.train.batch_size == 64);
    REQUIRE(cfg.train.epochs == 200);
    REQUIRE(cfg.train.beta1 == Approx(0.9));
    REQUIRE(cfg.train.weight_decay == Approx(1e-4));
    REQUIRE(cfg.train.split_ratio == Approx(0.8));
    REQUIRE(cfg.prompt_template == "a diseased plant with {Class} marks");
    REQUIRE(cfg.dims.image_size == 64);
    REQUIRE(cfg.dims.adapter_alpha == Approx(0.2));
    REQUIRE(cfg.toggles.text);
    REQUIRE(cfg.toggles.feb_attention == FebAttention::bidir);

    auto j = nlohmann::json::parse(R"({"train": {"lr": 1e-3}})");
    REQUIRE(run_config_from_json(j).train.lr == Approx(1e-3));
}

TEST_CASE("run config validation names the offending keys") {
    auto j = nlohmann::json::parse(R"({"model": {"channels": 60, "heads": 7}})");
    try {
        run_config_from_json(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("channels") != std::string::npos);
        REQUIRE(msg.find("heads") != std::string::npos);
    }

    // unknown key: strict error, lenient warning
    auto bad = nlohmann::json::parse(R"({"trian": {}})");
    REQUIRE_THROWS_AS(run_config_from_json(bad), ConfigError);
    REQUIRE_NOTHROW(run_config_from_json(bad, true));

    REQUIRE_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"train":{"lr":-1}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(
        run_config_from_json(nlohmann::json::parse(R"({"model":{"image_size":60}})")),
        ConfigError);
    REQUIRE_THROWS_AS(
        run_config_from_json(nlohmann::json::parse(R"({"toggles":{"cnn":false,"vit":false}})")),
        ConfigError);
}

TEST_CASE("config file loading and json round trip") {
    TempDir tmp;
    auto p = (tmp.path / "cfg.json").string();
    {
        std::ofstream out(p);
        out << R"({"model": {"image_size": 32, "channels": 8, "vit_depth": 1, "text_depth": 1,
                  "heads": 2, "adapter_rank": 4, "embed": 8, "cls_hidden": 8, "text_len": 8,
                  "mlp_ratio": 2},
                  "train": {"lr": 0.001, "epochs": 3, "batch_size": 8, "precision": "f32"},
                  "data": {"synthetic": {"classes": 3, "per_class": 4, "size": 32, "seed": 5}},
                  "out_dir": "x"})";
    }
    auto cfg = load_run_config(p);
    REQUIRE(cfg.dims.image_size == 32);
    REQUIRE(cfg.train.epochs == 3);
    REQUIRE(cfg.synthetic.has_value());
    REQUIRE(cfg.synthetic->classes == 3);

    auto back = run_config_from_json(run_config_to_json(cfg));
    REQUIRE(back.dims.image_size == cfg.dims.image_size);
    REQUIRE(back.train.lr == cfg.train.lr);
    REQUIRE(back.synthetic->seed == cfg.synthetic->seed);
    REQUIRE(back.out_dir == cfg.out_dir);

    REQUIRE_THROWS_AS(load_run_config((tmp.path / "nope.json").string()), DataError);
    {
        std::ofstream out(tmp.path / "broken.json");
        out << "{not json";
    }
    REQUIRE_THROWS_AS(load_run_config((tmp.path / "broken.json").string()), FormatError);
}

TEST_CASE("history and metrics exports") {
    TempDir tmp;
    History h;
    for (int e = 1; e <= 50; ++e) h.push_back({e, 3.5e-5, 1.0 / e, 0.5 + 0.005 * e});
    auto hp = (tmp.path / "history.csv").string();
    write_history_csv(h, hp);
    std::ifstream in(hp);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 51);  // header + 50 rows
    REQUIRE(lines[0] == "epoch,lr,train_loss,test_acc");
    REQUIRE(lines[1].rfind("1,3.5e-05,1,", 0) == 0);

    auto r = metrics_from_predictions({0, 1, 1, 0, 2}, {0, 1, 0, 0, 2}, 3);
    auto mp = (tmp.path / "metrics.json").string();
    write_metrics_json(r, {"a", "b", "c"}, mp);
    std::ifstream min(mp);
    nlohmann::json j;
    min >> j;  // round-trips through a generic parser
    REQUIRE(j.at("accuracy").get<double>() == Approx(0.8));
    REQUIRE(j.at("confusion").size() == 3);
    REQUIRE(j.at("per_class").size() == 3);
    REQUIRE(j.at("micro").at("precision").get<double>() == Approx(0.8));

    std::vector<AblationRow> rows{{"full", 0.97, 0.96, 0.95, 0.955}, {"cnn", 0.9, 0.9, 0.9, 0.9}};
    auto ap = (tmp.path / "ablation.csv").string();
    write_ablation_csv(rows, ap);
    std::ifstream ain(ap);
    lines.clear();
    while (std::getline(ain, line)) lines.push_back(line);
    REQUIRE(lines.size() == 3);
    REQUIRE(lines[0] == "name,acc,precision,recall,f1");
    REQUIRE(lines[1].rfind("full,0.97,", 0) == 0);
}
