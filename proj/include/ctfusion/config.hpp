#pragma once

// Run configuration: model dimensions, module toggles, training
// hyperparameters, data source. Loadable from a JSON document; missing keys
// take the defaults below, unknown keys are an error unless lenient.

#include "ctfusion/common.hpp"

#include <json.hpp>

#include <fstream>
#include <optional>
#include <set>
#include <string>

namespace ctfusion {

struct ModelDims {
    int image_size = 64;   // input resolution, must be divisible by 8 and by patch
    int patch = 8;         // patch extent of the global branch
    int channels = 64;     // C: feature width shared by both visual branches
    int vit_depth = 2;     // transformer blocks in the global encoder
    int text_depth = 2;    // transformer blocks in the text encoder
    int heads = 4;         // attention heads (self- and cross-attention)
    int adapter_rank = 16;       // r
    double adapter_alpha = 0.2;  // residual ratio
    int embed = 64;      // d: shared cross-attention embedding width
    int cls_hidden = 64; // classifier hidden width
    int text_len = 12;   // L: token sequence length
    int mlp_ratio = 4;   // transformer MLP expansion
    int num_classes = 7; // K

    int grid() const { return image_size / 8; }          // local-branch output extent
    int patches() const { return (image_size / patch) * (image_size / patch); }
};

enum class FebAttention { conv, cross, bidir };
enum class FusionBranch { none, lstm, attn };

struct Toggles {
    bool text = true;
    bool cnn = true;
    bool vit = true;
    bool adapter = true;
    bool feb = true;
    bool affm = true;
    FebAttention feb_attention = FebAttention::bidir;
    FusionBranch fusion_branch = FusionBranch::lstm;  // second branch inside the fusion block
    bool fusion_gate = true;                          // dynamic per-sample branch weights
    bool freeze_backbone = false;
};

enum class Precision { f32, f64 };

struct LrSchedule {
    enum class Kind { constant, step, cosine } kind = Kind::constant;
    double gamma = 0.1;
    int every = 10;
};

struct TrainConfig {
    double lr = 3.5e-5;
    int batch_size = 64;
    int epochs = 200;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double adam_eps = 1e-8;
    LrSchedule schedule;
    uint64_t seed = 42;
    double split_ratio = 0.8;
    Precision precision = Precision::f32;
};

struct SyntheticSpec {
    int classes = 7;
    int per_class = 50;
    int size = 64;
    uint64_t seed = 1;
};

struct RunConfig {
    ModelDims dims;
    Toggles toggles;
    TrainConfig train;
    std::string prompt_template = "a diseased plant with {Class} marks";
    std::string data_path;                  // class-folder dataset root, if set
    std::optional<SyntheticSpec> synthetic; // procedural dataset, if set
    std::string out_dir = "runs/out";
};

inline void validate(const Toggles& t) {
    if (!t.cnn && !t.vit)
        throw ConfigError("toggles: at least one visual branch (cnn or vit) must be enabled");
    if (t.affm && !(t.cnn && t.vit))
        throw ConfigError("toggles: affm requires both cnn and vit branches");
}

inline void validate(const RunConfig& cfg) {
    std::vector<std::string> bad;
    const auto& d = cfg.dims;
    if (d.image_size % 8 != 0) bad.push_back("image_size (must be divisible by 8)");
    if (d.patch < 1 || d.image_size % d.patch != 0) bad.push_back("patch (must divide image_size)");
    if (cfg.toggles.cnn && cfg.toggles.vit && d.image_size / d.patch != d.image_size / 8) {
        bad.push_back("patch (branch alignment needs the patch grid to match the conv grid: patch = 8)");
    }
    if (d.heads < 1 || d.channels % d.heads != 0) {
        bad.push_back("channels");
        bad.push_back("heads (channels must be divisible by heads)");
    }
    if (d.embed % d.heads != 0) bad.push_back("embed (must be divisible by heads)");
    if (d.channels % 4 != 0) bad.push_back("channels (gate hidden width is channels/4)");
    if (d.adapter_rank < 1) bad.push_back("adapter_rank");
    if (d.adapter_alpha < 0.0 || d.adapter_alpha > 1.0) bad.push_back("adapter_alpha (must be in [0,1])");
    if (d.text_len < 1) bad.push_back("text_len");
    if (d.num_classes < 2) bad.push_back("num_classes");
    if (cfg.train.lr <= 0) bad.push_back("lr (must be > 0)");
    if (cfg.train.split_ratio <= 0 || cfg.train.split_ratio >= 1) bad.push_back("split_ratio (must be in (0,1))");
    if (cfg.train.batch_size < 1) bad.push_back("batch_size");
    if (cfg.train.epochs < 0) bad.push_back("epochs");
    if (!bad.empty()) {
        std::string msg = "invalid config:";
        for (const auto& k : bad) msg += " " + k + ";";
        throw ConfigError(msg);
    }
    validate(cfg.toggles);
}

// ---------------------------------------------------------------------------
// JSON (de)serialization

namespace cfgdetail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& known,
                       const std::string& section, bool lenient) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            std::string msg = "unknown config key '" + (section.empty() ? it.key() : section + "." + it.key()) + "'";
            if (lenient)
                std::fprintf(stderr, "warning: %s (ignored)\n", msg.c_str());
            else
                throw ConfigError(msg);
        }
    }
}

template <class V>
void pick(const nlohmann::json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace cfgdetail

inline FebAttention feb_attention_from(const std::string& s) {
    if (s == "conv") return FebAttention::conv;
    if (s == "cross") return FebAttention::cross;
    if (s == "bidir") return FebAttention::bidir;
    throw ConfigError("feb_attention must be one of conv|cross|bidir, got '" + s + "'");
}
inline std::string to_string(FebAttention a) {
    switch (a) {
        case FebAttention::conv: return "conv";
        case FebAttention::cross: return "cross";
        default: return "bidir";
    }
}
inline FusionBranch fusion_branch_from(const std::string& s) {
    if (s == "none") return FusionBranch::none;
    if (s == "lstm") return FusionBranch::lstm;
    if (s == "attn") return FusionBranch::attn;
    throw ConfigError("fusion_branch must be one of none|lstm|attn, got '" + s + "'");
}
inline std::string to_string(FusionBranch b) {
    switch (b) {
        case FusionBranch::none: return "none";
        case FusionBranch::lstm: return "lstm";
        default: return "attn";
    }
}
inline std::string to_string(LrSchedule::Kind k) {
    switch (k) {
        case LrSchedule::Kind::constant: return "constant";
        case LrSchedule::Kind::step: return "step";
        default: return "cosine";
    }
}
inline LrSchedule::Kind schedule_from(const std::string& s) {
    if (s == "constant") return LrSchedule::Kind::constant;
    if (s == "step") return LrSchedule::Kind::step;
    if (s == "cosine") return LrSchedule::Kind::cosine;
    throw ConfigError("schedule must be one of constant|step|cosine, got '" + s + "'");
}

inline RunConfig run_config_from_json(const nlohmann::json& j, bool lenient = false) {
    RunConfig cfg;
    cfgdetail::check_keys(j, {"model", "toggles", "train", "prompt_template", "data", "out_dir"}, "",
                          lenient);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfgdetail::check_keys(m,
                              {"image_size", "patch", "channels", "vit_depth", "text_depth", "heads",
                               "adapter_rank", "adapter_alpha", "embed", "cls_hidden", "text_len",
                               "mlp_ratio", "num_classes"},
                              "model", lenient);
        auto& d = cfg.dims;
        cfgdetail::pick(m, "image_size", d.image_size);
        cfgdetail::pick(m, "patch", d.patch);
        cfgdetail::pick(m, "channels", d.channels);
        cfgdetail::pick(m, "vit_depth", d.vit_depth);
        cfgdetail::pick(m, "text_depth", d.text_depth);
        cfgdetail::pick(m, "heads", d.heads);
        cfgdetail::pick(m, "adapter_rank", d.adapter_rank);
        cfgdetail::pick(m, "adapter_alpha", d.adapter_alpha);
        cfgdetail::pick(m, "embed", d.embed);
        cfgdetail::pick(m, "cls_hidden", d.cls_hidden);
        cfgdetail::pick(m, "text_len", d.text_len);
        cfgdetail::pick(m, "mlp_ratio", d.mlp_ratio);
        cfgdetail::pick(m, "num_classes", d.num_classes);
    }
    if (j.contains("toggles")) {
        const auto& t = j.at("toggles");
        cfgdetail::check_keys(t,
                              {"text", "cnn", "vit", "adapter", "feb", "affm", "feb_attention",
                               "fusion_branch", "fusion_gate", "freeze_backbone"},
                              "toggles", lenient);
        auto& g = cfg.toggles;
        cfgdetail::pick(t, "text", g.text);
        cfgdetail::pick(t, "cnn", g.cnn);
        cfgdetail::pick(t, "vit", g.vit);
        cfgdetail::pick(t, "adapter", g.adapter);
        cfgdetail::pick(t, "feb", g.feb);
        cfgdetail::pick(t, "affm", g.affm);
        if (t.contains("feb_attention")) g.feb_attention = feb_attention_from(t.at("feb_attention"));
        if (t.contains("fusion_branch")) g.fusion_branch = fusion_branch_from(t.at("fusion_branch"));
        cfgdetail::pick(t, "fusion_gate", g.fusion_gate);
        cfgdetail::pick(t, "freeze_backbone", g.freeze_backbone);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfgdetail::check_keys(t,
                              {"lr", "batch_size", "epochs", "beta1", "beta2", "weight_decay",
                               "schedule", "schedule_gamma", "schedule_every", "seed", "split_ratio",
                               "precision"},
                              "train", lenient);
        auto& tr = cfg.train;
        cfgdetail::pick(t, "lr", tr.lr);
        cfgdetail::pick(t, "batch_size", tr.batch_size);
        cfgdetail::pick(t, "epochs", tr.epochs);
        cfgdetail::pick(t, "beta1", tr.beta1);
        cfgdetail::pick(t, "beta2", tr.beta2);
        cfgdetail::pick(t, "weight_decay", tr.weight_decay);
        if (t.contains("schedule")) tr.schedule.kind = schedule_from(t.at("schedule"));
        cfgdetail::pick(t, "schedule_gamma", tr.schedule.gamma);
        cfgdetail::pick(t, "schedule_every", tr.schedule.every);
        cfgdetail::pick(t, "seed", tr.seed);
        cfgdetail::pick(t, "split_ratio", tr.split_ratio);
        if (t.contains("precision")) {
            std::string p = t.at("precision");
            if (p == "f32") tr.precision = Precision::f32;
            else if (p == "f64") tr.precision = Precision::f64;
            else throw ConfigError("precision must be f32 or f64, got '" + p + "'");
        }
    }
    cfgdetail::pick(j, "prompt_template", cfg.prompt_template);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        cfgdetail::check_keys(d, {"path", "synthetic"}, "data", lenient);
        cfgdetail::pick(d, "path", cfg.data_path);
        if (d.contains("synthetic")) {
            const auto& s = d.at("synthetic");
            cfgdetail::check_keys(s, {"classes", "per_class", "size", "seed"}, "data.synthetic", lenient);
            SyntheticSpec spec;
            cfgdetail::pick(s, "classes", spec.classes);
            cfgdetail::pick(s, "per_class", spec.per_class);
            cfgdetail::pick(s, "size", spec.size);
            cfgdetail::pick(s, "seed", spec.seed);
            cfg.synthetic = spec;
        }
    }
    cfgdetail::pick(j, "out_dir", cfg.out_dir);
    validate(cfg);
    return cfg;
}

inline RunConfig load_run_config(const std::string& path, bool lenient = false) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j, lenient);
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    const auto& d = cfg.dims;
    j["model"] = {{"image_size", d.image_size},   {"patch", d.patch},
                  {"channels", d.channels},       {"vit_depth", d.vit_depth},
                  {"text_depth", d.text_depth},   {"heads", d.heads},
                  {"adapter_rank", d.adapter_rank}, {"adapter_alpha", d.adapter_alpha},
                  {"embed", d.embed},             {"cls_hidden", d.cls_hidden},
                  {"text_len", d.text_len},       {"mlp_ratio", d.mlp_ratio},
                  {"num_classes", d.num_classes}};
    const auto& t = cfg.toggles;
    j["toggles"] = {{"text", t.text},
                    {"cnn", t.cnn},
                    {"vit", t.vit},
                    {"adapter", t.adapter},
                    {"feb", t.feb},
                    {"affm", t.affm},
                    {"feb_attention", to_string(t.feb_attention)},
                    {"fusion_branch", to_string(t.fusion_branch)},
                    {"fusion_gate", t.fusion_gate},
                    {"freeze_backbone", t.freeze_backbone}};
    const auto& tr = cfg.train;
    j["train"] = {{"lr", tr.lr},
                  {"batch_size", tr.batch_size},
                  {"epochs", tr.epochs},
                  {"beta1", tr.beta1},
                  {"beta2", tr.beta2},
                  {"weight_decay", tr.weight_decay},
                  {"schedule", to_string(tr.schedule.kind)},
                  {"schedule_gamma", tr.schedule.gamma},
                  {"schedule_every", tr.schedule.every},
                  {"seed", tr.seed},
                  {"split_ratio", tr.split_ratio},
                  {"precision", tr.precision == Precision::f32 ? "f32" : "f64"}};
    j["prompt_template"] = cfg.prompt_template;
    nlohmann::json data;
    if (!cfg.data_path.empty()) data["path"] = cfg.data_path;
    if (cfg.synthetic) {
        data["synthetic"] = {{"classes", cfg.synthetic->classes},
                             {"per_class", cfg.synthetic->per_class},
                             {"size", cfg.synthetic->size},
                             {"seed", cfg.synthetic->seed}};
    }
    j["data"] = data;
    j["out_dir"] = cfg.out_dir;
    return j;
}

}  // namespace ctfusion
