#pragma once

// Checkpoint container: "CTCP" magic, version, a JSON metadata document
// (config, class names, vocabulary, parameter manifest, optimizer flag),
// little-endian f32 parameter blobs in manifest order, and a trailing CRC-32
// over the blob section.

#include "ctfusion/config.hpp"
#include "ctfusion/model.hpp"
#include "ctfusion/train.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace ctfusion {

inline uint32_t crc32_ieee(const uint8_t* data, size_t len, uint32_t seed = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = ~seed;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

namespace ckptdetail {

constexpr uint32_t kVersion = 1;
constexpr char kMagic[4] = {'C', 'T', 'C', 'P'};

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}
inline float get_f32(const uint8_t* p) {
    uint32_t bits = get_u32(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace ckptdetail

template <class T>
struct CheckpointBundle {
    RunConfig cfg;
    std::vector<std::string> class_names;
    Model<T> model;
    AdamState<T> opt;
    bool has_optimizer = false;
};

template <class T>
void save_checkpoint(Model<T>& model, const AdamState<T>* opt, const RunConfig& cfg,
                     const std::string& path) {
    using nlohmann::json;
    // manifest order: model params, then bn buffers, then optimizer moments
    json manifest = json::array();
    std::vector<uint8_t> blobs;
    auto emit = [&](const std::string& name, const std::vector<T>& values, const Shape& shape) {
        json entry;
        entry["name"] = name;
        entry["shape"] = shape;
        entry["dtype"] = "f32";
        manifest.push_back(entry);
        for (T v : values) ckptdetail::put_f32(blobs, static_cast<float>(v));
    };
    model.collect_all([&](const std::string& n, Tensor<T>& t) { emit(n, t.data(), t.shape()); });
    json bn_meta = json::array();
    model.collect_bn([&](const std::string& n, BnState<T>& st) {
        json b;
        b["name"] = n;
        b["momentum"] = st.momentum;
        b["initialized"] = st.initialized;
        bn_meta.push_back(b);
        int64_t c = static_cast<int64_t>(st.initialized ? st.running_mean.size() : 0);
        if (st.initialized) {
            emit(n + ".running_mean", st.running_mean, {c});
            emit(n + ".running_var", st.running_var, {c});
        }
    });
    if (opt) {
        for (const auto& [name, slot] : opt->slots) {
            Shape sh{static_cast<int64_t>(slot.m.size())};
            emit("opt.m:" + name, slot.m, sh);
            emit("opt.v:" + name, slot.v, sh);
        }
    }

    json meta;
    meta["config"] = run_config_to_json(cfg);
    meta["class_names"] = model.prompts.class_names;
    meta["vocab"] = model.text.vocab.id_to_tok;
    meta["params"] = manifest;
    meta["has_optimizer"] = opt != nullptr;
    meta["opt_step"] = opt ? opt->step : 0;
    meta["bn"] = bn_meta;
    std::string meta_str = meta.dump();

    std::vector<uint8_t> out;
    out.insert(out.end(), ckptdetail::kMagic, ckptdetail::kMagic + 4);
    ckptdetail::put_u32(out, ckptdetail::kVersion);
    ckptdetail::put_u64(out, meta_str.size());
    out.insert(out.end(), meta_str.begin(), meta_str.end());
    out.insert(out.end(), blobs.begin(), blobs.end());
    ckptdetail::put_u32(out, crc32_ieee(blobs.data(), blobs.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint '" + path + "'");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to checkpoint '" + path + "'");
}

template <class T>
CheckpointBundle<T> load_checkpoint(const std::string& path) {
    using nlohmann::json;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path + "'");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 16 || std::memcmp(buf.data(), ckptdetail::kMagic, 4) != 0)
        throw FormatError("checkpoint '" + path + "': bad magic (expected CTCP)");
    uint32_t version = ckptdetail::get_u32(buf.data() + 4);
    if (version != ckptdetail::kVersion)
        throw FormatError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
    uint64_t meta_len = ckptdetail::get_u64(buf.data() + 8);
    if (16 + meta_len + 4 > buf.size())
        throw FormatError("checkpoint '" + path + "': truncated metadata");
    json meta;
    try {
        meta = json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<int64_t>(meta_len));
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path + "': metadata is not valid JSON: " + e.what());
    }

    const uint8_t* blob = buf.data() + 16 + meta_len;
    size_t blob_len = buf.size() - 16 - static_cast<size_t>(meta_len) - 4;
    uint64_t expect = 0;
    for (const auto& entry : meta.at("params")) {
        uint64_t n = 1;
        for (int64_t e : entry.at("shape").get<std::vector<int64_t>>()) n *= static_cast<uint64_t>(e);
        expect += n * 4;
    }
    if (expect != blob_len)
        throw FormatError("checkpoint '" + path + "': manifest byte count " + std::to_string(expect) +
                          " != blob section length " + std::to_string(blob_len));
    uint32_t crc_stored = ckptdetail::get_u32(buf.data() + buf.size() - 4);
    uint32_t crc_actual = crc32_ieee(blob, blob_len);
    if (crc_stored != crc_actual)
        throw FormatError("checkpoint '" + path + "': CRC mismatch (stored " +
                          std::to_string(crc_stored) + ", computed " + std::to_string(crc_actual) + ")");

    RunConfig cfg = run_config_from_json(meta.at("config"));
    std::vector<std::string> class_names = meta.at("class_names").get<std::vector<std::string>>();
    Vocab vocab = Vocab::from_tokens(meta.at("vocab").get<std::vector<std::string>>());

    CheckpointBundle<T> bundle{cfg, class_names,
                               Model<T>::create_with_vocab(cfg, class_names, vocab),
                               AdamState<T>{}, meta.value("has_optimizer", false)};

    std::map<std::string, Tensor<T>> by_name;
    bundle.model.collect_all([&](const std::string& n, Tensor<T>& t) { by_name.emplace(n, t); });
    std::map<std::string, BnState<T>*> bn_by_name;
    bundle.model.collect_bn([&](const std::string& n, BnState<T>& st) { bn_by_name[n] = &st; });
    for (const auto& b : meta.at("bn")) {
        auto it = bn_by_name.find(b.at("name").get<std::string>());
        if (it == bn_by_name.end())
            throw FormatError("checkpoint: unknown norm state '" + b.at("name").get<std::string>() + "'");
        it->second->momentum = b.at("momentum").get<double>();
        it->second->initialized = b.at("initialized").get<bool>();
    }

    const uint8_t* at = blob;
    auto take = [&at](size_t n) {
        std::vector<T> v(n);
        for (size_t i = 0; i < n; ++i, at += 4) v[i] = static_cast<T>(ckptdetail::get_f32(at));
        return v;
    };
    for (const auto& entry : meta.at("params")) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<std::vector<int64_t>>();
        size_t n = static_cast<size_t>(shape_numel(shape));
        auto values = take(n);
        if (name.rfind("opt.m:", 0) == 0 || name.rfind("opt.v:", 0) == 0) {
            auto& slot = bundle.opt.slots[name.substr(6)];
            (name[4] == 'm' ? slot.m : slot.v) = std::move(values);
        } else if (name.size() > 13 && name.compare(name.size() - 13, 13, ".running_mean") == 0) {
            bn_by_name.at(name.substr(0, name.size() - 13))->running_mean = std::move(values);
        } else if (name.size() > 12 && name.compare(name.size() - 12, 12, ".running_var") == 0) {
            bn_by_name.at(name.substr(0, name.size() - 12))->running_var = std::move(values);
        } else {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw FormatError("checkpoint: unknown parameter '" + name + "'");
            if (it->second.shape() != shape)
                throw FormatError("checkpoint: parameter '" + name + "' has shape " +
                                  shape_str(shape) + ", model expects " + shape_str(it->second.shape()));
            it->second.data() = std::move(values);
        }
    }
    bundle.opt.step = meta.value("opt_step", int64_t{0});
    return bundle;
}

}  // namespace ctfusion
