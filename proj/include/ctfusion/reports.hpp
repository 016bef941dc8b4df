#pragma once

// File exports: training history, metric reports, ablation tables. Numbers
// are serialized with 6 significant digits so outputs are stable and
// diff-friendly.

#include "ctfusion/metrics.hpp"
#include "ctfusion/train.hpp"

#include <json.hpp>

#include <fstream>

namespace ctfusion {

inline double round_g6(double v) { return std::stod(fmt_g6(v)); }

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    return out;
}

inline void write_history_csv(const History& h, const std::string& path) {
    auto out = open_out(path);
    out << "epoch,lr,train_loss,test_acc\n";
    for (const auto& e : h)
        out << e.epoch << "," << fmt_g6(e.lr) << "," << fmt_g6(e.train_loss) << ","
            << fmt_g6(e.test_acc) << "\n";
}

inline void write_history_json(const History& h, const std::string& path) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : h)
        rows.push_back({{"epoch", e.epoch},
                        {"lr", round_g6(e.lr)},
                        {"train_loss", round_g6(e.train_loss)},
                        {"test_acc", round_g6(e.test_acc)}});
    open_out(path) << rows.dump(2) << "\n";
}

inline nlohmann::json metrics_to_json(const MetricsReport& r,
                                      const std::vector<std::string>& class_names) {
    nlohmann::json j;
    j["accuracy"] = round_g6(r.accuracy);
    j["total"] = r.total;
    j["confusion"] = r.confusion;
    nlohmann::json per = nlohmann::json::array();
    for (size_t c = 0; c < r.precision.size(); ++c)
        per.push_back({{"class", c < class_names.size() ? class_names[c] : std::to_string(c)},
                       {"precision", round_g6(r.precision[c])},
                       {"recall", round_g6(r.recall[c])},
                       {"f1", round_g6(r.f1[c])}});
    j["per_class"] = per;
    j["macro"] = {{"precision", round_g6(r.macro_precision)},
                  {"recall", round_g6(r.macro_recall)},
                  {"f1", round_g6(r.macro_f1)}};
    j["micro"] = {{"precision", round_g6(r.micro_precision)},
                  {"recall", round_g6(r.micro_recall)},
                  {"f1", round_g6(r.micro_f1)}};
    return j;
}

inline void write_metrics_json(const MetricsReport& r, const std::vector<std::string>& class_names,
                               const std::string& path) {
    open_out(path) << metrics_to_json(r, class_names).dump(2) << "\n";
}

inline void write_metrics_csv(const MetricsReport& r, const std::vector<std::string>& class_names,
                              const std::string& path) {
    auto out = open_out(path);
    out << "class,precision,recall,f1\n";
    for (size_t c = 0; c < r.precision.size(); ++c)
        out << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ","
            << fmt_g6(r.precision[c]) << "," << fmt_g6(r.recall[c]) << "," << fmt_g6(r.f1[c]) << "\n";
    out << "macro," << fmt_g6(r.macro_precision) << "," << fmt_g6(r.macro_recall) << ","
        << fmt_g6(r.macro_f1) << "\n";
    out << "micro," << fmt_g6(r.micro_precision) << "," << fmt_g6(r.micro_recall) << ","
        << fmt_g6(r.micro_f1) << "\n";
    out << "accuracy," << fmt_g6(r.accuracy) << ",,\n";
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    auto out = open_out(path);
    out << "name,acc,precision,recall,f1\n";
    for (const auto& r : rows)
        out << r.name << "," << fmt_g6(r.acc) << "," << fmt_g6(r.precision) << ","
            << fmt_g6(r.recall) << "," << fmt_g6(r.f1) << "\n";
}

inline void write_ablation_json(const std::vector<AblationRow>& rows, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
        j.push_back({{"name", r.name},
                     {"acc", round_g6(r.acc)},
                     {"precision", round_g6(r.precision)},
                     {"recall", round_g6(r.recall)},
                     {"f1", round_g6(r.f1)}});
    open_out(path) << j.dump(2) << "\n";
}

}  // namespace ctfusion
