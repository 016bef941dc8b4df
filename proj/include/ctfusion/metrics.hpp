#pragma once

// Confusion-matrix classification metrics: per-class one-vs-rest
// precision/recall/F1, their unweighted macro means, and micro metrics from
// globally summed counts. Zero-denominator cases are defined as 0.

#include "ctfusion/common.hpp"

#include <vector>

namespace ctfusion {

struct MetricsReport {
    std::vector<std::vector<int64_t>> confusion;  // rows = true, cols = predicted
    double accuracy = 0;
    std::vector<double> precision, recall, f1;  // per class
    double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
    double micro_precision = 0, micro_recall = 0, micro_f1 = 0;
    int64_t total = 0;
};

inline double safe_ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

inline MetricsReport metrics_from_predictions(const std::vector<int>& truth,
                                              const std::vector<int>& preds, int k) {
    if (truth.empty()) throw DataError("metrics: empty evaluation set");
    if (truth.size() != preds.size()) throw ArgError("metrics: truth/prediction length mismatch");
    MetricsReport r;
    r.total = static_cast<int64_t>(truth.size());
    r.confusion.assign(static_cast<size_t>(k), std::vector<int64_t>(static_cast<size_t>(k), 0));
    for (size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= k || preds[i] < 0 || preds[i] >= k)
            throw DataError("metrics: label out of range");
        ++r.confusion[static_cast<size_t>(truth[i])][static_cast<size_t>(preds[i])];
    }
    int64_t trace = 0;
    for (int c = 0; c < k; ++c) trace += r.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
    r.accuracy = static_cast<double>(trace) / static_cast<double>(r.total);

    int64_t tp_all = 0, fp_all = 0, fn_all = 0;
    for (int c = 0; c < k; ++c) {
        int64_t tp = r.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < k; ++o) {
            if (o == c) continue;
            fp += r.confusion[static_cast<size_t>(o)][static_cast<size_t>(c)];
            fn += r.confusion[static_cast<size_t>(c)][static_cast<size_t>(o)];
        }
        double p = safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fp));
        double rec = safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fn));
        r.precision.push_back(p);
        r.recall.push_back(rec);
        r.f1.push_back(safe_ratio(2 * p * rec, p + rec));
        tp_all += tp;
        fp_all += fp;
        fn_all += fn;
    }
    for (int c = 0; c < k; ++c) {
        r.macro_precision += r.precision[static_cast<size_t>(c)] / k;
        r.macro_recall += r.recall[static_cast<size_t>(c)] / k;
        r.macro_f1 += r.f1[static_cast<size_t>(c)] / k;
    }
    r.micro_precision = safe_ratio(static_cast<double>(tp_all), static_cast<double>(tp_all + fp_all));
    r.micro_recall = safe_ratio(static_cast<double>(tp_all), static_cast<double>(tp_all + fn_all));
    r.micro_f1 = safe_ratio(2 * r.micro_precision * r.micro_recall, r.micro_precision + r.micro_recall);
    return r;
}

}  // namespace ctfusion
