#pragma once

// Dataset ingestion and generation: binary PPM/PGM decoding, bilinear
// resizing, class-folder loading, and the procedural lesion-disc dataset used
// for desk-scale verification.

#include "ctfusion/tensor.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace ctfusion {

template <class T>
struct Sample {
    Tensor<T> image;  // [3,H,W], values in [0,1]
    int label = 0;
    std::string source;  // file path or "synthetic"
};

template <class T>
struct Dataset {
    std::vector<Sample<T>> samples;
    std::vector<std::string> class_names;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

// ---------------------------------------------------------------------------
// PPM (P6) / PGM (P5), 8-bit

struct RawImage {
    int width = 0, height = 0, channels = 0;
    std::vector<uint8_t> pixels;  // interleaved rows, `channels` bytes per pixel
};

namespace ppmdetail {

inline int read_token(std::istream& in) {
    // skips whitespace and '#' comments, returns the next integer
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int v = -1;
    in >> v;
    return v;
}

}  // namespace ppmdetail

inline RawImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image '" + path + "'");
    char magic[2] = {0, 0};
    in.read(magic, 2);
    int channels;
    if (magic[0] == 'P' && magic[1] == '6') channels = 3;
    else if (magic[0] == 'P' && magic[1] == '5') channels = 1;
    else throw FormatError("'" + path + "': not a binary PPM (P6) or PGM (P5) file");
    int w = ppmdetail::read_token(in);
    int h = ppmdetail::read_token(in);
    int maxval = ppmdetail::read_token(in);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw FormatError("'" + path + "': bad header (8-bit only)");
    in.get();  // the single whitespace before pixel data
    RawImage img;
    img.width = w;
    img.height = h;
    img.channels = channels;
    img.pixels.resize(static_cast<size_t>(w) * h * channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw FormatError("'" + path + "': truncated pixel data");
    return img;
}

inline void write_ppm(const std::string& path, int width, int height,
                      const std::vector<uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3)
        throw ArgError("write_ppm: pixel buffer size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw DataError("short write to '" + path + "'");
}

// ---------------------------------------------------------------------------
// bilinear resize on a planar channel

inline std::vector<double> resize_bilinear(const std::vector<double>& src, int sh, int sw, int dh,
                                           int dw) {
    std::vector<double> dst(static_cast<size_t>(dh) * dw);
    double ry = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
    double rx = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
    for (int y = 0; y < dh; ++y) {
        double fy = y * ry;
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, sh - 1);
        double wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            double fx = x * rx;
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, sw - 1);
            double wx = fx - x0;
            double top = src[static_cast<size_t>(y0) * sw + x0] * (1 - wx) +
                         src[static_cast<size_t>(y0) * sw + x1] * wx;
            double bot = src[static_cast<size_t>(y1) * sw + x0] * (1 - wx) +
                         src[static_cast<size_t>(y1) * sw + x1] * wx;
            dst[static_cast<size_t>(y) * dw + x] = top * (1 - wy) + bot * wy;
        }
    }
    return dst;
}

// decoded image -> [3,size,size] tensor in [0,1], grayscale replicated
template <class T>
Tensor<T> image_to_tensor(const RawImage& img, int size) {
    std::vector<T> out(static_cast<size_t>(3) * size * size);
    for (int c = 0; c < 3; ++c) {
        int src_c = img.channels == 3 ? c : 0;
        std::vector<double> plane(static_cast<size_t>(img.width) * img.height);
        for (int i = 0; i < img.width * img.height; ++i)
            plane[static_cast<size_t>(i)] =
                img.pixels[static_cast<size_t>(i) * img.channels + src_c] / 255.0;
        auto resized = resize_bilinear(plane, img.height, img.width, size, size);
        for (int i = 0; i < size * size; ++i)
            out[static_cast<size_t>(c) * size * size + i] = static_cast<T>(resized[static_cast<size_t>(i)]);
    }
    return Tensor<T>::from({3, size, size}, std::move(out));
}

// [3,H,W] tensor in [0,1] -> interleaved 8-bit RGB
template <class T>
std::vector<uint8_t> tensor_to_rgb(const Tensor<T>& img) {
    int64_t h = img.dim(1), w = img.dim(2);
    std::vector<uint8_t> rgb(static_cast<size_t>(h * w * 3));
    const auto& d = img.data();
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                double v = static_cast<double>(d[static_cast<size_t>((c * h + y) * w + x)]);
                v = std::clamp(v, 0.0, 1.0);
                rgb[static_cast<size_t>((y * w + x) * 3 + c)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return rgb;
}

// ---------------------------------------------------------------------------
// class-folder ingestion: root/<class_name>/*.ppm, classes and files sorted

template <class T>
Dataset<T> load_image_folder(const std::string& root, int size, int* skipped = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("dataset root '" + root + "' is not a directory");
    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    std::sort(classes.begin(), classes.end());
    if (classes.empty()) throw DataError("dataset root '" + root + "' has no class directories");

    Dataset<T> ds;
    ds.class_names = classes;
    int skip_count = 0;
    for (size_t k = 0; k < classes.size(); ++k) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root) / classes[k]))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        int64_t loaded = 0;
        for (const auto& f : files) {
            try {
                ds.samples.push_back({image_to_tensor<T>(read_pnm(f), size), static_cast<int>(k), f});
                ++loaded;
            } catch (const std::exception& e) {
                std::fprintf(stderr, "warning: skipping '%s': %s\n", f.c_str(), e.what());
                ++skip_count;
            }
        }
        if (loaded == 0)
            throw DataError("class '" + classes[k] + "' has no readable images");
    }
    if (skipped) *skipped = skip_count;
    return ds;
}

// ---------------------------------------------------------------------------
// procedural dataset: green noisy background plus class-coded lesion discs,
// fully deterministic from (seed, class, index)

struct Disc {
    int cx = 0, cy = 0, r = 0;
};

// class-specific lesion colors
inline const std::array<std::array<double, 3>, 8>& synthetic_palette() {
    static const std::array<std::array<double, 3>, 8> p = {{{0.55, 0.27, 0.07},
                                                            {0.85, 0.65, 0.13},
                                                            {0.92, 0.92, 0.92},
                                                            {0.35, 0.05, 0.05},
                                                            {0.95, 0.45, 0.10},
                                                            {0.50, 0.00, 0.50},
                                                            {0.10, 0.10, 0.60},
                                                            {0.90, 0.85, 0.40}}};
    return p;
}

inline std::vector<Disc> synthetic_discs(uint64_t seed, int k, int index, int size) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(k), static_cast<uint64_t>(index), 0xD15C));
    int count = 3 + k;
    int radius = 2 + k;
    std::vector<Disc> discs;
    discs.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        int lo = radius, hi = size - 1 - radius;
        Disc d;
        d.cx = lo + static_cast<int>(rng.randint(hi - lo + 1));
        d.cy = lo + static_cast<int>(rng.randint(hi - lo + 1));
        d.r = radius;
        discs.push_back(d);
    }
    return discs;
}

template <class T>
Tensor<T> synthetic_image(uint64_t seed, int k, int index, int size) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(k), static_cast<uint64_t>(index), 0x4015E));
    const double bg[3] = {0.2, 0.5, 0.2};
    std::vector<double> img(static_cast<size_t>(3) * size * size);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < size * size; ++i)
            img[static_cast<size_t>(c) * size * size + i] =
                std::clamp(bg[c] + 0.05 * rng.normal(), 0.0, 1.0);
    const auto& color = synthetic_palette()[static_cast<size_t>(k)];
    for (const Disc& d : synthetic_discs(seed, k, index, size)) {
        for (int y = d.cy - d.r; y <= d.cy + d.r; ++y)
            for (int x = d.cx - d.r; x <= d.cx + d.r; ++x) {
                int dy = y - d.cy, dx = x - d.cx;
                if (dy * dy + dx * dx > d.r * d.r) continue;
                for (int c = 0; c < 3; ++c)
                    img[static_cast<size_t>(c) * size * size + y * size + x] = color[static_cast<size_t>(c)];
            }
    }
    std::vector<T> out(img.size());
    for (size_t i = 0; i < img.size(); ++i) out[i] = static_cast<T>(img[i]);
    return Tensor<T>::from({3, size, size}, std::move(out));
}

template <class T>
Dataset<T> generate_synthetic(int k, int n_per_class, int size, uint64_t seed) {
    if (k < 1 || k > 8) throw ArgError("generate_synthetic: classes must be in [1, 8]");
    if (size < 32) throw ArgError("generate_synthetic: size must be >= 32");
    if (n_per_class < 1) throw ArgError("generate_synthetic: need at least one sample per class");
    Dataset<T> ds;
    for (int c = 0; c < k; ++c) ds.class_names.push_back("class" + std::to_string(c));
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < n_per_class; ++i)
            ds.samples.push_back({synthetic_image<T>(seed, c, i, size), c,
                                  "synthetic:" + std::to_string(c) + ":" + std::to_string(i)});
    return ds;
}

// write a generated dataset as a class-folder PPM tree
template <class T>
void write_dataset_ppm(const Dataset<T>& ds, const std::string& root) {
    namespace fs = std::filesystem;
    std::vector<int> counter(ds.class_names.size(), 0);
    for (const auto& name : ds.class_names) fs::create_directories(fs::path(root) / name);
    for (const auto& s : ds.samples) {
        auto dir = fs::path(root) / ds.class_names[static_cast<size_t>(s.label)];
        char name[32];
        std::snprintf(name, sizeof(name), "%05d.ppm", counter[static_cast<size_t>(s.label)]++);
        write_ppm((dir / name).string(), static_cast<int>(s.image.dim(2)),
                  static_cast<int>(s.image.dim(1)), tensor_to_rgb(s.image));
    }
}

// batch assembly: stacked [B,3,H,W] plus labels
template <class T>
Tensor<T> stack_images(const Dataset<T>& ds, const std::vector<int64_t>& idx) {
    if (idx.empty()) throw ArgError("stack_images: empty batch");
    const auto& first = ds.samples[static_cast<size_t>(idx[0])].image;
    int64_t per = first.numel();
    std::vector<T> out(static_cast<size_t>(per) * idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& img = ds.samples[static_cast<size_t>(idx[i])].image;
        if (img.numel() != per) throw ShapeError("stack_images: mixed image shapes");
        std::copy(img.data().begin(), img.data().end(), out.begin() + static_cast<int64_t>(i) * per);
    }
    Shape sh = first.shape();
    sh.insert(sh.begin(), static_cast<int64_t>(idx.size()));
    return Tensor<T>::from(sh, std::move(out));
}

}  // namespace ctfusion
