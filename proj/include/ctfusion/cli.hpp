#pragma once

// Command-line surface: train / eval / predict / explain / ablate /
// gradcheck / synth. Exit codes: 0 success, 1 usage or configuration error,
// 2 data/format/numerical error.

#include "ctfusion/checkpoint.hpp"
#include "ctfusion/explain.hpp"
#include "ctfusion/gradsuite.hpp"
#include "ctfusion/reports.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace ctfusion {
namespace cli {

namespace fs = std::filesystem;

template <class T>
Dataset<T> resolve_dataset(const RunConfig& cfg, const std::string& data_flag) {
    std::string dir = !data_flag.empty() ? data_flag : cfg.data_path;
    if (!dir.empty()) return load_image_folder<T>(dir, cfg.dims.image_size);
    if (cfg.synthetic) {
        const auto& s = *cfg.synthetic;
        if (s.size != cfg.dims.image_size)
            throw ConfigError("data.synthetic.size must equal model.image_size");
        return generate_synthetic<T>(s.classes, s.per_class, s.size, s.seed);
    }
    throw ConfigError("no dataset: pass --data or configure data.path / data.synthetic");
}

template <class F>
int with_precision(Precision p, F&& f) {
    if (p == Precision::f32) return f(float{});
    return f(double{});
}

struct CommonOpts {
    std::string config_path;
    std::string data_dir;
    std::string out_dir;
    bool lenient = false;
};

inline RunConfig load_cfg(const CommonOpts& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path, o.lenient);
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    if (!o.data_dir.empty()) cfg.data_path = o.data_dir;
    return cfg;
}

template <class T>
int cmd_train(RunConfig cfg) {
    auto ds = resolve_dataset<T>(cfg, "");
    auto [train, test] = split_dataset(ds, cfg.train.split_ratio, cfg.train.seed);
    auto model = Model<T>::create(cfg, ds.class_names);
    std::printf("training on %lld samples (%d classes), %d epochs, lr %s\n",
                static_cast<long long>(train.size()), ds.num_classes(), cfg.train.epochs,
                fmt_g6(cfg.train.lr).c_str());
    AdamState<T> opt;
    auto history = train_loop(model, train, test, cfg.train, &opt);
    auto report = evaluate(model, test, cfg.train.batch_size);
    fs::create_directories(cfg.out_dir);
    save_checkpoint(model, &opt, cfg, (fs::path(cfg.out_dir) / "model.ctcp").string());
    write_history_csv(history, (fs::path(cfg.out_dir) / "history.csv").string());
    write_metrics_json(report, ds.class_names, (fs::path(cfg.out_dir) / "metrics.json").string());
    std::printf("test accuracy %s; wrote %s/{model.ctcp,history.csv,metrics.json}\n",
                fmt_g6(report.accuracy).c_str(), cfg.out_dir.c_str());
    return 0;
}

template <class T>
int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, std::string out_dir) {
    auto bundle = load_checkpoint<T>(ckpt_path);
    auto ds = resolve_dataset<T>(bundle.cfg, data_dir);
    if (ds.class_names != bundle.class_names)
        throw DataError("dataset classes do not match the checkpoint's class list");
    auto report = evaluate(bundle.model, ds, bundle.cfg.train.batch_size);
    if (out_dir.empty()) out_dir = bundle.cfg.out_dir;
    fs::create_directories(out_dir);
    write_metrics_json(report, ds.class_names, (fs::path(out_dir) / "metrics.json").string());
    std::printf("accuracy %s over %lld samples; wrote %s/metrics.json\n",
                fmt_g6(report.accuracy).c_str(), static_cast<long long>(report.total),
                out_dir.c_str());
    return 0;
}

template <class T>
int cmd_predict(const std::string& ckpt_path, const std::vector<std::string>& images,
                const std::string& out_json) {
    auto bundle = load_checkpoint<T>(ckpt_path);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& path : images) {
        auto img = image_to_tensor<T>(read_pnm(path), bundle.cfg.dims.image_size);
        NoGradGuard ng;
        auto probs =
            bundle.model.forward(reshape(img, {1, 3, img.dim(1), img.dim(2)}), Mode::eval);
        const auto& p = probs.data();
        int best = 0;
        for (int c = 1; c < bundle.cfg.dims.num_classes; ++c)
            if (p[static_cast<size_t>(c)] > p[static_cast<size_t>(best)]) best = c;
        std::printf("%s\t%s\t%s\n", path.c_str(), bundle.class_names[static_cast<size_t>(best)].c_str(),
                    fmt_g6(static_cast<double>(p[static_cast<size_t>(best)])).c_str());
        nlohmann::json row;
        row["image"] = path;
        row["class"] = bundle.class_names[static_cast<size_t>(best)];
        row["class_index"] = best;
        nlohmann::json pv = nlohmann::json::array();
        for (int c = 0; c < bundle.cfg.dims.num_classes; ++c)
            pv.push_back(round_g6(static_cast<double>(p[static_cast<size_t>(c)])));
        row["probs"] = pv;
        out.push_back(row);
    }
    if (!out_json.empty()) open_out(out_json) << out.dump(2) << "\n";
    return 0;
}

template <class T>
int cmd_explain(const std::string& ckpt_path, const std::string& image_path,
                const std::string& method, int class_index, const std::string& target,
                std::string out_base) {
    auto bundle = load_checkpoint<T>(ckpt_path);
    auto img = image_to_tensor<T>(read_pnm(image_path), bundle.cfg.dims.image_size);
    if (out_base.empty()) {
        fs::create_directories(bundle.cfg.out_dir);
        out_base = (fs::path(bundle.cfg.out_dir) / fs::path(image_path).stem()).string();
    } else if (fs::path(out_base).has_parent_path()) {
        fs::create_directories(fs::path(out_base).parent_path());
    }
    Heatmap hm;
    if (method == "attention") {
        hm = attention_heatmap(bundle.model, img);
    } else if (method == "gradcam") {
        if (class_index < 0) {
            NoGradGuard ng;
            auto probs =
                bundle.model.forward(reshape(img, {1, 3, img.dim(1), img.dim(2)}), Mode::eval);
            const auto& p = probs.data();
            class_index = 0;
            for (int c = 1; c < bundle.cfg.dims.num_classes; ++c)
                if (p[static_cast<size_t>(c)] > p[static_cast<size_t>(class_index)]) class_index = c;
        }
        hm = gradcam_heatmap(bundle.model, img, class_index,
                             target == "local" ? GradcamTarget::local : GradcamTarget::fusion);
    } else {
        throw ConfigError("explain: method must be attention or gradcam");
    }
    export_heatmap(hm, img, out_base);
    std::printf("wrote %s_heat.ppm and %s_overlay.ppm\n", out_base.c_str(), out_base.c_str());
    return 0;
}

template <class T>
int cmd_ablate(RunConfig cfg, const std::string& suite) {
    auto ds = resolve_dataset<T>(cfg, "");
    auto rows = run_ablation(cfg, builtin_ablation_suite(suite), ds);
    fs::create_directories(cfg.out_dir);
    write_ablation_csv(rows, (fs::path(cfg.out_dir) / "ablation.csv").string());
    write_ablation_json(rows, (fs::path(cfg.out_dir) / "ablation.json").string());
    std::printf("name,acc,precision,recall,f1\n");
    for (const auto& r : rows)
        std::printf("%s,%s,%s,%s,%s\n", r.name.c_str(), fmt_g6(r.acc).c_str(),
                    fmt_g6(r.precision).c_str(), fmt_g6(r.recall).c_str(), fmt_g6(r.f1).c_str());
    return 0;
}

inline int cmd_gradcheck(int seeds) {
    bool was = nan_guard_enabled();
    set_nan_guard(true);
    auto rep = run_gradient_suite(seeds, true);
    set_nan_guard(was);
    std::printf("gradcheck: primitives max rel err %s, model max rel err %s\n",
                fmt_g6(rep.primitive_err).c_str(), fmt_g6(rep.model_err).c_str());
    if (rep.max_err() >= 1e-4) {
        std::fprintf(stderr, "gradcheck FAILED: max relative error %s >= 1e-4\n",
                     fmt_g6(rep.max_err()).c_str());
        return 2;
    }
    std::printf("gradcheck passed (threshold 1e-4)\n");
    return 0;
}

inline int run(const std::vector<std::string>& args) {
    CLI::App app{"dual-branch image-text classifier (conv + patch-attention + class prompts)"};
    app.require_subcommand(1);

    CommonOpts common;
    int epochs = -1, batch = -1;
    double lr = -1;
    int64_t seed = -1;
    std::string precision;

    auto* train = app.add_subcommand("train", "train a model; writes checkpoint, history, metrics");
    train->add_option("--config", common.config_path, "JSON run configuration");
    train->add_option("--data", common.data_dir, "class-folder dataset root (PPM/PGM)");
    train->add_option("--out", common.out_dir, "output directory");
    train->add_flag("--lenient", common.lenient, "warn on unknown config keys instead of failing");
    train->add_option("--epochs", epochs, "override train.epochs");
    train->add_option("--lr", lr, "override train.lr");
    train->add_option("--batch", batch, "override train.batch_size");
    train->add_option("--seed", seed, "override train.seed");
    train->add_option("--precision", precision, "f32 or f64");

    std::string ckpt, out_json, method = "attention", target = "fusion";
    std::vector<std::string> images;
    int class_index = -1;

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes metrics.json");
    eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    eval->add_option("--data", common.data_dir, "dataset root (defaults to the checkpoint's data)");
    eval->add_option("--out", common.out_dir, "output directory");

    auto* predict = app.add_subcommand("predict", "per-image class and probability");
    predict->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    predict->add_option("--image", images, "image file(s)")->required();
    predict->add_option("--out", out_json, "optional JSON output path");

    auto* explain = app.add_subcommand("explain", "write heatmap + overlay PPM files");
    explain->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    explain->add_option("--image", images, "image file")->required()->expected(1);
    explain->add_option("--method", method, "attention or gradcam")
        ->check(CLI::IsMember({"attention", "gradcam"}));
    explain->add_option("--class", class_index, "class index for gradcam (default: predicted)");
    explain->add_option("--target", target, "gradcam feature map: fusion or local")
        ->check(CLI::IsMember({"fusion", "local"}));
    explain->add_option("--out", out_json, "output base path");

    std::string suite = "modules";
    auto* ablate = app.add_subcommand("ablate", "run a module-toggle study; writes ablation tables");
    ablate->add_option("--config", common.config_path, "JSON run configuration");
    ablate->add_option("--data", common.data_dir, "dataset root");
    ablate->add_option("--out", common.out_dir, "output directory");
    ablate->add_flag("--lenient", common.lenient, "warn on unknown config keys instead of failing");
    ablate->add_option("--suite", suite, "modules | fusion | attention")
        ->check(CLI::IsMember({"modules", "fusion", "attention"}));

    int gc_seeds = 10;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference oracle suite");
    gradcheck->add_option("--seeds", gc_seeds, "number of seeds (default 10)");

    SyntheticSpec synth;
    std::string synth_out;
    auto* synthc = app.add_subcommand("synth", "write a procedural dataset as a PPM tree");
    synthc->add_option("--classes", synth.classes, "number of classes (<= 8)");
    synthc->add_option("--per-class", synth.per_class, "samples per class");
    synthc->add_option("--size", synth.size, "image extent (>= 32)");
    synthc->add_option("--seed", synth.seed, "generator seed");
    synthc->add_option("--out", synth_out, "output directory")->required();

    std::vector<std::string> argv_copy = args;
    try {
        std::vector<const char*> argv;
        argv.push_back("ctfusion");
        for (const auto& a : argv_copy) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            RunConfig cfg = load_cfg(common);
            if (epochs >= 0) cfg.train.epochs = epochs;
            if (lr >= 0) cfg.train.lr = lr;
            if (batch >= 1) cfg.train.batch_size = batch;
            if (seed >= 0) cfg.train.seed = static_cast<uint64_t>(seed);
            if (!precision.empty()) {
                if (precision != "f32" && precision != "f64")
                    throw ConfigError("precision must be f32 or f64");
                cfg.train.precision = precision == "f32" ? Precision::f32 : Precision::f64;
            }
            validate(cfg);
            return with_precision(cfg.train.precision,
                                  [&](auto tag) { return cmd_train<decltype(tag)>(cfg); });
        }
        if (eval->parsed()) {
            Precision p = load_checkpoint<float>(ckpt).cfg.train.precision;
            return with_precision(p, [&](auto tag) {
                return cmd_eval<decltype(tag)>(ckpt, common.data_dir, common.out_dir);
            });
        }
        if (predict->parsed()) {
            Precision p = load_checkpoint<float>(ckpt).cfg.train.precision;
            return with_precision(
                p, [&](auto tag) { return cmd_predict<decltype(tag)>(ckpt, images, out_json); });
        }
        if (explain->parsed()) {
            Precision p = load_checkpoint<float>(ckpt).cfg.train.precision;
            return with_precision(p, [&](auto tag) {
                return cmd_explain<decltype(tag)>(ckpt, images[0], method, class_index, target,
                                                  out_json);
            });
        }
        if (ablate->parsed()) {
            RunConfig cfg = load_cfg(common);
            validate(cfg);
            return with_precision(cfg.train.precision,
                                  [&](auto tag) { return cmd_ablate<decltype(tag)>(cfg, suite); });
        }
        if (gradcheck->parsed()) return cmd_gradcheck(gc_seeds);
        if (synthc->parsed()) {
            auto ds = generate_synthetic<float>(synth.classes, synth.per_class, synth.size, synth.seed);
            write_dataset_ppm(ds, synth_out);
            std::printf("wrote %lld images under %s\n", static_cast<long long>(ds.size()),
                        synth_out.c_str());
            return 0;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ArgError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {  // data, format, shape, state, numerical
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}

}  // namespace cli
}  // namespace ctfusion
