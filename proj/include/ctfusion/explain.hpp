#pragma once

// Explanation surfaces: class-token attention heatmaps from the global
// encoder and gradient-weighted class activation maps over the fused visual
// features, plus PPM rendering (black->red->yellow ramp and a 0.5 blend).

#include "ctfusion/data.hpp"
#include "ctfusion/model.hpp"

namespace ctfusion {

struct Heatmap {
    enum class Source { attention, gradcam };
    int h = 0, w = 0;
    std::vector<double> values;  // [0,1], max 1 unless the raw map was all-zero
    Source source = Source::attention;
    int class_index = -1;
};

// min-max to [0,1]; an identically-zero map stays zero, a nonzero constant
// map maps to all ones
inline std::vector<double> normalize_unit(std::vector<double> v) {
    double lo = v[0], hi = v[0];
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    // constant maps (up to interpolation rounding) collapse: zero stays zero,
    // anything else becomes all ones
    if (hi - lo <= 1e-12 * std::max({std::abs(hi), std::abs(lo), 1e-30})) {
        std::fill(v.begin(), v.end(), hi == 0.0 ? 0.0 : 1.0);
        return v;
    }
    for (double& x : v) x = (x - lo) / (hi - lo);
    return v;
}

// pure grad-cam arithmetic on one [C,H,W] map: channel weights are the
// spatial means of the gradients, the map is the relu'd weighted sum
inline std::vector<double> gradcam_from(const std::vector<double>& values,
                                        const std::vector<double>& grads, int64_t c, int64_t h,
                                        int64_t w) {
    std::vector<double> out(static_cast<size_t>(h * w), 0.0);
    int64_t plane = h * w;
    for (int64_t ci = 0; ci < c; ++ci) {
        double alpha = 0.0;
        for (int64_t i = 0; i < plane; ++i) alpha += grads[static_cast<size_t>(ci * plane + i)];
        alpha /= static_cast<double>(plane);
        for (int64_t i = 0; i < plane; ++i)
            out[static_cast<size_t>(i)] += alpha * values[static_cast<size_t>(ci * plane + i)];
    }
    for (double& x : out) x = std::max(x, 0.0);
    return out;
}

// class-token self-attention scores of the last global block, head-averaged,
// upsampled to image size
template <class T>
Heatmap attention_heatmap(Model<T>& model, const Tensor<T>& image) {
    if (!model.toggles.vit)
        throw ConfigError("attention heatmap needs the global (vit) branch enabled");
    NoGradGuard ng;
    int64_t s = image.dim(1);
    auto batch = reshape(image, {1, 3, image.dim(1), image.dim(2)});
    std::vector<Tensor<T>> attn;
    model.global_enc.forward(batch, model.toggles.adapter, &attn);
    const auto& last = attn.back();  // [1,H,N+1,N+1]
    int64_t heads = last.dim(1), tokens = last.dim(2);
    int64_t n = tokens - 1;
    std::vector<double> scores(static_cast<size_t>(n), 0.0);
    const auto& d = last.data();
    for (int64_t hd = 0; hd < heads; ++hd)
        for (int64_t j = 0; j < n; ++j)
            scores[static_cast<size_t>(j)] +=
                static_cast<double>(d[static_cast<size_t>((hd * tokens + 0) * tokens + 1 + j)]) /
                static_cast<double>(heads);
    int grid = static_cast<int>(model.dims.image_size / model.dims.patch);
    Heatmap hm;
    hm.h = static_cast<int>(s);
    hm.w = static_cast<int>(image.dim(2));
    hm.values = normalize_unit(resize_bilinear(scores, grid, grid, hm.h, hm.w));
    hm.source = Heatmap::Source::attention;
    return hm;
}

enum class GradcamTarget { fusion, local };

// backward from one pre-softmax class logit; the target feature map's
// retained gradient drives the channel weighting
template <class T>
Heatmap gradcam_heatmap(Model<T>& model, const Tensor<T>& image, int class_index,
                        GradcamTarget target = GradcamTarget::fusion) {
    if (class_index < 0 || class_index >= model.dims.num_classes)
        throw ArgError("gradcam: class index " + std::to_string(class_index) + " out of [0," +
                       std::to_string(model.dims.num_classes) + ")");
    if (target == GradcamTarget::local && !model.toggles.cnn)
        throw ConfigError("gradcam target 'local' needs the cnn branch enabled");
    model.zero_grad();
    auto batch = reshape(image, {1, 3, image.dim(1), image.dim(2)});
    Diagnostics<T> diag;
    model.forward(batch, Mode::eval, &diag);
    auto logit = narrow(diag.logits, 1, class_index, 1);
    logit.backward();

    const Tensor<T>& fmap = target == GradcamTarget::fusion ? diag.fused_map : diag.local_map;
    int64_t c = fmap.dim(1), h = fmap.dim(2), w = fmap.dim(3);
    std::vector<double> values(fmap.data().begin(), fmap.data().end());
    std::vector<double> grads;
    if (fmap.has_grad())
        grads.assign(fmap.grad().begin(), fmap.grad().end());
    else
        grads.assign(values.size(), 0.0);  // detached target: identically zero map
    auto raw = gradcam_from(values, grads, c, h, w);

    Heatmap hm;
    hm.h = static_cast<int>(image.dim(1));
    hm.w = static_cast<int>(image.dim(2));
    hm.values = normalize_unit(
        resize_bilinear(raw, static_cast<int>(h), static_cast<int>(w), hm.h, hm.w));
    hm.source = Heatmap::Source::gradcam;
    hm.class_index = class_index;
    return hm;
}

// value ramp: 0 -> black, 0.5 -> red, 1 -> yellow
inline std::array<uint8_t, 3> heat_color(double v) {
    double r = std::clamp(2.0 * v, 0.0, 1.0);
    double g = std::clamp(2.0 * v - 1.0, 0.0, 1.0);
    return {static_cast<uint8_t>(std::lround(r * 255.0)),
            static_cast<uint8_t>(std::lround(g * 255.0)), 0};
}

// writes <base>_heat.ppm (ramp) and <base>_overlay.ppm (0.5 blend with the
// input); byte-deterministic for fixed inputs
template <class T>
void export_heatmap(const Heatmap& hm, const Tensor<T>& image, const std::string& base) {
    auto rgb = tensor_to_rgb(image);
    std::vector<uint8_t> heat(static_cast<size_t>(hm.h) * hm.w * 3);
    std::vector<uint8_t> overlay(heat.size());
    for (int64_t i = 0; i < static_cast<int64_t>(hm.values.size()); ++i) {
        auto c = heat_color(hm.values[static_cast<size_t>(i)]);
        for (int ch = 0; ch < 3; ++ch) {
            heat[static_cast<size_t>(i * 3 + ch)] = c[static_cast<size_t>(ch)];
            overlay[static_cast<size_t>(i * 3 + ch)] = static_cast<uint8_t>(std::lround(
                0.5 * rgb[static_cast<size_t>(i * 3 + ch)] + 0.5 * c[static_cast<size_t>(ch)]));
        }
    }
    write_ppm(base + "_heat.ppm", hm.w, hm.h, heat);
    write_ppm(base + "_overlay.ppm", hm.w, hm.h, overlay);
}

}  // namespace ctfusion
