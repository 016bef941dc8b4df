#pragma once

// Optimization loop and evaluation harness: cross-entropy on probability
// rows, Adam with classic L2-in-gradient weight decay, LR schedules,
// stratified splitting, and the module-toggle ablation runner.

#include "ctfusion/data.hpp"
#include "ctfusion/metrics.hpp"
#include "ctfusion/model.hpp"

namespace ctfusion {

// mean negative log-probability of the true class; log clamped at 1e-12
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2) throw ShapeError("cross_entropy: probs must be [B,K]");
    int64_t b = probs.dim(0), k = probs.dim(1);
    if (static_cast<int64_t>(labels.size()) != b)
        throw ArgError("cross_entropy: batch/label count mismatch");
    for (int lab : labels)
        if (lab < 0 || lab >= k) throw DataError("cross_entropy: label " + std::to_string(lab) + " out of [0," + std::to_string(k) + ")");
    const T clamp = static_cast<T>(1e-12);
    const auto& pd = probs.data();
    double loss = 0.0;
    for (int64_t i = 0; i < b; ++i)
        loss -= std::log(static_cast<double>(
            std::max(pd[static_cast<size_t>(i * k + labels[static_cast<size_t>(i)])], clamp)));
    loss /= static_cast<double>(b);
    return Tensor<T>::make_op(
        {1}, {static_cast<T>(loss)}, {probs}, [probs, labels, b, k, clamp](typename Tensor<T>::Node& self) {
            const auto& pd = probs.data();
            std::vector<T> g(pd.size(), T(0));
            T go = self.grad[0];
            for (int64_t i = 0; i < b; ++i) {
                size_t at = static_cast<size_t>(i * k + labels[static_cast<size_t>(i)]);
                if (pd[at] > clamp) g[at] = -go / (static_cast<T>(b) * pd[at]);
            }
            Tensor<T>::accum(probs.node(), g);
        });
}

// ---------------------------------------------------------------------------
// Adam with bias correction; weight decay enters the gradient (classic form)

template <class T>
struct AdamState {
    struct Slot {
        std::vector<T> m, v;
    };
    std::map<std::string, Slot> slots;
    int64_t step = 0;
};

template <class T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& state, double lr,
               const TrainConfig& cfg) {
    state.step += 1;
    double t = static_cast<double>(state.step);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& p : params) {
        if (!p.tensor.requires_grad()) continue;  // frozen parameters stay put
        if (!p.tensor.has_grad())
            throw StateError("adam: trainable parameter '" + p.name + "' has no gradient");
        auto& slot = state.slots[p.name];
        auto& data = p.tensor.data();
        const auto& grad = p.tensor.grad();
        if (slot.m.empty()) {
            slot.m.assign(data.size(), T(0));
            slot.v.assign(data.size(), T(0));
        }
        const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
        const T wd = static_cast<T>(cfg.weight_decay), eps = static_cast<T>(cfg.adam_eps);
        for (size_t i = 0; i < data.size(); ++i) {
            T g = grad[i] + wd * data[i];
            slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g * g;
            T mh = slot.m[i] / static_cast<T>(bc1);
            T vh = slot.v[i] / static_cast<T>(bc2);
            data[i] -= static_cast<T>(lr) * mh / (std::sqrt(vh) + eps);
        }
    }
}

inline double lr_at(const TrainConfig& cfg, int epoch) {
    if (epoch < 0) throw ArgError("lr_at: epoch must be >= 0");
    switch (cfg.schedule.kind) {
        case LrSchedule::Kind::constant:
            return cfg.lr;
        case LrSchedule::Kind::step:
            return cfg.lr * std::pow(cfg.schedule.gamma, epoch / cfg.schedule.every);
        case LrSchedule::Kind::cosine:
            return cfg.lr * (1.0 + std::cos(3.14159265358979323846 * epoch / cfg.epochs)) / 2.0;
    }
    return cfg.lr;
}

// ---------------------------------------------------------------------------
// stratified split: per class, seeded shuffle, round(ratio * n_c) into train

template <class T>
std::pair<Dataset<T>, Dataset<T>> split_dataset(const Dataset<T>& ds, double ratio, uint64_t seed) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ArgError("split: ratio must be in (0,1)");
    int k = ds.num_classes();
    std::vector<std::vector<int64_t>> per_class(static_cast<size_t>(k));
    for (int64_t i = 0; i < ds.size(); ++i)
        per_class[static_cast<size_t>(ds.samples[static_cast<size_t>(i)].label)].push_back(i);
    Dataset<T> train, test;
    train.class_names = ds.class_names;
    test.class_names = ds.class_names;
    for (int c = 0; c < k; ++c) {
        auto& idx = per_class[static_cast<size_t>(c)];
        if (idx.size() < 2)
            throw DataError("split: class '" + ds.class_names[static_cast<size_t>(c)] +
                            "' has fewer than 2 samples");
        Rng rng(mix_seed(seed, static_cast<uint64_t>(c), 0x5917));
        rng.shuffle(idx);
        auto n_train = static_cast<size_t>(std::lround(ratio * static_cast<double>(idx.size())));
        n_train = std::min(std::max<size_t>(n_train, 1), idx.size() - 1);  // both sides non-empty
        for (size_t i = 0; i < idx.size(); ++i)
            (i < n_train ? train : test).samples.push_back(ds.samples[static_cast<size_t>(idx[i])]);
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// evaluation and the epoch loop

template <class T>
std::vector<int> predict_labels(Model<T>& model, const Dataset<T>& ds, int batch_size) {
    NoGradGuard ng;
    std::vector<int> preds;
    preds.reserve(static_cast<size_t>(ds.size()));
    int64_t k = model.dims.num_classes;
    for (int64_t at = 0; at < ds.size(); at += batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = at; i < std::min<int64_t>(at + batch_size, ds.size()); ++i) idx.push_back(i);
        auto probs = model.forward(stack_images(ds, idx), Mode::eval);
        const auto& pd = probs.data();
        for (size_t row = 0; row < idx.size(); ++row) {
            int best = 0;
            for (int c = 1; c < k; ++c)
                if (pd[row * static_cast<size_t>(k) + static_cast<size_t>(c)] >
                    pd[row * static_cast<size_t>(k) + static_cast<size_t>(best)])
                    best = c;
            preds.push_back(best);
        }
    }
    return preds;
}

template <class T>
MetricsReport evaluate(Model<T>& model, const Dataset<T>& ds, int batch_size = 32) {
    if (ds.size() == 0) throw DataError("evaluate: empty dataset");
    auto preds = predict_labels(model, ds, batch_size);
    std::vector<int> truth;
    for (const auto& s : ds.samples) truth.push_back(s.label);
    return metrics_from_predictions(truth, preds, model.dims.num_classes);
}

struct EpochStat {
    int epoch = 0;  // 1-based
    double lr = 0, train_loss = 0, test_acc = 0;
};
using History = std::vector<EpochStat>;

template <class T>
History train_loop(Model<T>& model, const Dataset<T>& train, const Dataset<T>& test,
                   const TrainConfig& cfg, AdamState<T>* opt_state = nullptr) {
    if (train.size() == 0) throw DataError("train: empty training set");
    auto params = model.trainable_params();
    AdamState<T> local_state;
    AdamState<T>& state = opt_state ? *opt_state : local_state;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x7EA1));
    History history;
    std::vector<int64_t> order(static_cast<size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at(cfg, epoch);
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (int64_t at = 0; at < train.size(); at += cfg.batch_size) {
            std::vector<int64_t> idx(order.begin() + at,
                                     order.begin() + std::min<int64_t>(at + cfg.batch_size, train.size()));
            std::vector<int> labels;
            for (int64_t i : idx) labels.push_back(train.samples[static_cast<size_t>(i)].label);
            model.zero_grad();
            auto probs = model.forward(stack_images(train, idx), Mode::train);
            auto loss = cross_entropy(probs, labels);
            loss.backward();
            adam_step(params, state, lr, cfg);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        }
        EpochStat st;
        st.epoch = epoch + 1;
        st.lr = lr;
        st.train_loss = loss_sum / static_cast<double>(train.size());
        st.test_acc = test.size() > 0 ? evaluate(model, test, cfg.batch_size).accuracy : 0.0;
        history.push_back(st);
    }
    return history;
}

// ---------------------------------------------------------------------------
// ablation harness: named toggle rows, identical seed and split throughout

struct AblationConfig {
    std::string name;
    Toggles toggles;
};

struct AblationRow {
    std::string name;
    double acc = 0, precision = 0, recall = 0, f1 = 0;
};

// the module matrix: single branches, dual branch, fusion, text+enhancer
inline std::vector<AblationConfig> ablation_suite_modules() {
    auto base = [] {
        Toggles t;
        t.text = t.feb = t.affm = false;
        return t;
    };
    std::vector<AblationConfig> rows;
    {
        Toggles t = base();
        t.vit = false;
        rows.push_back({"cnn", t});
    }
    {
        Toggles t = base();
        t.cnn = false;
        t.adapter = false;
        rows.push_back({"vit_no_adapter", t});
    }
    {
        Toggles t = base();
        t.cnn = false;
        rows.push_back({"vit", t});
    }
    rows.push_back({"cnn_vit", base()});
    {
        Toggles t = base();
        t.affm = true;
        rows.push_back({"cnn_vit_affm", t});
    }
    {
        Toggles t = base();
        t.text = true;
        t.feb = true;
        rows.push_back({"text_cnn_vit_feb", t});
    }
    {
        Toggles t = base();
        t.text = t.feb = t.affm = true;
        rows.push_back({"full", t});
    }
    return rows;
}

// fusion internals: second branch kind and the dynamic gate
inline std::vector<AblationConfig> ablation_suite_fusion() {
    std::vector<AblationConfig> rows;
    {
        Toggles t;
        t.fusion_branch = FusionBranch::none;
        t.fusion_gate = false;
        rows.push_back({"conv_only", t});
    }
    {
        Toggles t;
        t.fusion_branch = FusionBranch::lstm;
        t.fusion_gate = false;
        rows.push_back({"conv_lstm", t});
    }
    {
        Toggles t;
        t.fusion_branch = FusionBranch::attn;
        t.fusion_gate = false;
        rows.push_back({"conv_attn", t});
    }
    {
        Toggles t;  // full model
        rows.push_back({"conv_lstm_gate", t});
    }
    return rows;
}

// enhancement attention kind
inline std::vector<AblationConfig> ablation_suite_attention() {
    std::vector<AblationConfig> rows;
    for (auto kind : {FebAttention::conv, FebAttention::cross, FebAttention::bidir}) {
        Toggles t;
        t.feb_attention = kind;
        rows.push_back({to_string(kind), t});
    }
    return rows;
}

inline std::vector<AblationConfig> builtin_ablation_suite(const std::string& name) {
    if (name == "modules") return ablation_suite_modules();
    if (name == "fusion") return ablation_suite_fusion();
    if (name == "attention") return ablation_suite_attention();
    throw ConfigError("unknown ablation suite '" + name + "' (modules|fusion|attention)");
}

template <class T>
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationConfig>& spec,
                                      const Dataset<T>& ds,
                                      History* histories = nullptr) {
    // every configuration is checked before any training starts
    std::set<std::string> names;
    for (const auto& c : spec) {
        if (!names.insert(c.name).second)
            throw ConfigError("ablation: duplicate configuration name '" + c.name + "'");
        RunConfig probe = base;
        probe.toggles = c.toggles;
        validate(probe);
    }
    auto [train, test] = split_dataset(ds, base.train.split_ratio, base.train.seed);
    std::vector<AblationRow> rows;
    for (const auto& c : spec) {
        RunConfig cfg = base;
        cfg.toggles = c.toggles;
        auto model = Model<T>::create(cfg, ds.class_names);
        auto hist = train_loop(model, train, test, cfg.train);
        auto report = evaluate(model, test, cfg.train.batch_size);
        rows.push_back({c.name, report.accuracy, report.macro_precision, report.macro_recall,
                        report.macro_f1});
        if (histories && !hist.empty()) histories->push_back(hist.back());
    }
    return rows;
}

}  // namespace ctfusion
