#include <catch2/catch_amalgamated.hpp>

#include "ctfusion/data.hpp"

#include <cstdlib>
#include <filesystem>
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
        path = fs::temp_directory_path() / ("ctfusion_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};
}  // namespace

TEST_CASE("ppm round trip") {
    TempDir tmp;
    std::vector<uint8_t> rgb(4 * 3 * 3);
    for (size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<uint8_t>(i * 7);
    auto p = (tmp.path / "img.ppm").string();
    write_ppm(p, 4, 3, rgb);
    auto img = read_pnm(p);
    REQUIRE(img.width == 4);
    REQUIRE(img.height == 3);
    REQUIRE(img.channels == 3);
    REQUIRE(img.pixels == rgb);

    // comments and whitespace in the header
    {
        std::ofstream out(tmp.path / "c.pgm", std::ios::binary);
        out << "P5\n# a comment\n2 2\n255\n";
        uint8_t px[4] = {0, 64, 128, 255};
        out.write(reinterpret_cast<char*>(px), 4);
    }
    auto g = read_pnm((tmp.path / "c.pgm").string());
    REQUIRE(g.channels == 1);
    REQUIRE(g.pixels == std::vector<uint8_t>{0, 64, 128, 255});

    REQUIRE_THROWS_AS(read_pnm((tmp.path / "missing.ppm").string()), DataError);
    {
        std::ofstream out(tmp.path / "bad.ppm", std::ios::binary);
        out << "P6\n2 2\n255\nxx";  // truncated
    }
    REQUIRE_THROWS_AS(read_pnm((tmp.path / "bad.ppm").string()), FormatError);
    {
        std::ofstream out(tmp.path / "nope.txt", std::ios::binary);
        out << "hello";
    }
    REQUIRE_THROWS_AS(read_pnm((tmp.path / "nope.txt").string()), FormatError);
}

TEST_CASE("bilinear resize endpoints and constancy") {
    std::vector<double> plane{0, 1, 2, 3};  // 2x2
    auto up = resize_bilinear(plane, 2, 2, 4, 4);
    REQUIRE(up[0] == Approx(0.0));
    REQUIRE(up[3] == Approx(1.0));
    REQUIRE(up[12] == Approx(2.0));
    REQUIRE(up[15] == Approx(3.0));

    std::vector<double> c(36, 0.7);
    for (double v : resize_bilinear(c, 6, 6, 3, 3)) REQUIRE(v == Approx(0.7));
}

TEST_CASE("image folder loading: sorted classes, resize, error paths") {
    TempDir tmp;
    for (const char* cls : {"beta", "alpha"}) {
        fs::create_directories(tmp.path / cls);
        for (int i = 0; i < 3; ++i) {
            std::vector<uint8_t> rgb(8 * 8 * 3, static_cast<uint8_t>(50 * (i + 1)));
            write_ppm((tmp.path / cls / (std::to_string(i) + ".ppm")).string(), 8, 8, rgb);
        }
    }
    // mixed sizes land on the configured extent
    {
        std::vector<uint8_t> rgb(16 * 4 * 3, 99);
        write_ppm((tmp.path / "alpha" / "wide.ppm").string(), 16, 4, rgb);
    }
    auto ds = load_image_folder<float>(tmp.path.string(), 32);
    REQUIRE(ds.class_names == std::vector<std::string>{"alpha", "beta"});
    REQUIRE(ds.size() == 7);
    for (const auto& s : ds.samples) REQUIRE(s.image.shape() == Shape{3, 32, 32});
    // deterministic order: same tree loads identically
    auto ds2 = load_image_folder<float>(tmp.path.string(), 32);
    for (int64_t i = 0; i < ds.size(); ++i) {
        REQUIRE(ds.samples[static_cast<size_t>(i)].source == ds2.samples[static_cast<size_t>(i)].source);
        REQUIRE(ds.samples[static_cast<size_t>(i)].image.data() ==
                ds2.samples[static_cast<size_t>(i)].image.data());
    }

    // unreadable file: skipped with a count
    {
        std::ofstream out(tmp.path / "alpha" / "broken.ppm", std::ios::binary);
        out << "P6 garbage";
    }
    int skipped = 0;
    auto ds3 = load_image_folder<float>(tmp.path.string(), 32, &skipped);
    REQUIRE(skipped == 1);
    REQUIRE(ds3.size() == 7);

    // empty class directory: hard error naming the class
    fs::create_directories(tmp.path / "zeta");
    try {
        load_image_folder<float>(tmp.path.string(), 32);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("zeta") != std::string::npos);
    }

    REQUIRE_THROWS_AS(load_image_folder<float>((tmp.path / "missing").string(), 32), DataError);
}

TEST_CASE("synthetic dataset: counts, determinism, balance") {
    auto ds = generate_synthetic<float>(7, 50, 64, 1);
    REQUIRE(ds.size() == 350);
    REQUIRE(ds.num_classes() == 7);
    std::vector<int> counts(7, 0);
    for (const auto& s : ds.samples) ++counts[static_cast<size_t>(s.label)];
    for (int c : counts) REQUIRE(c == 50);
    REQUIRE(ds.class_names[0] == "class0");
    REQUIRE(ds.class_names[6] == "class6");

    // bit-identical regeneration
    auto again = generate_synthetic<float>(7, 50, 64, 1);
    for (int64_t i = 0; i < ds.size(); i += 37)
        REQUIRE(ds.samples[static_cast<size_t>(i)].image.data() ==
                again.samples[static_cast<size_t>(i)].image.data());

    // a different seed changes pixels
    auto other = generate_synthetic<float>(7, 2, 64, 2);
    REQUIRE(other.samples[0].image.data() != ds.samples[0].image.data());

    REQUIRE_THROWS_AS(generate_synthetic<float>(9, 5, 64, 1), ArgError);
    REQUIRE_THROWS_AS(generate_synthetic<float>(4, 5, 16, 1), ArgError);

    // pixel range
    for (float v : ds.samples[0].image.data()) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }
}

TEST_CASE("synthetic discs stay inside the image and match the generator") {
    for (int k = 0; k < 8; ++k) {
        auto discs = synthetic_discs(3, k, 0, 64);
        REQUIRE(static_cast<int>(discs.size()) == 3 + k);
        for (const auto& d : discs) {
            REQUIRE(d.r == 2 + k);
            REQUIRE(d.cx - d.r >= 0);
            REQUIRE(d.cy - d.r >= 0);
            REQUIRE(d.cx + d.r < 64);
            REQUIRE(d.cy + d.r < 64);
        }
    }
    // disc centers carry the class palette color exactly
    auto img = synthetic_image<double>(3, 2, 0, 64);
    auto discs = synthetic_discs(3, 2, 0, 64);
    const auto& color = synthetic_palette()[2];
    for (const auto& d : discs)
        for (int c = 0; c < 3; ++c)
            REQUIRE(img.data()[static_cast<size_t>((c * 64 + d.cy) * 64 + d.cx)] ==
                    Approx(color[static_cast<size_t>(c)]));
}

// Nearest-centroid on per-channel means plus a lesion-fraction proxy. This is
// the independent learnability oracle for the synthetic set: if a two-line
// classifier separates it, a trained model reaching 90% is a sane ask.
TEST_CASE("nearest-centroid oracle separates the synthetic classes") {
    const int k = 7, n = 50, size = 64;
    auto ds = generate_synthetic<double>(k, n, size, 1);

    auto features = [&](const Sample<double>& s) {
        std::array<double, 4> f{};
        const auto& d = s.image.data();
        int64_t plane = size * size;
        for (int c = 0; c < 3; ++c) {
            double m = 0;
            for (int64_t i = 0; i < plane; ++i) m += d[static_cast<size_t>(c * plane + i)];
            f[static_cast<size_t>(c)] = m / static_cast<double>(plane);
        }
        // fraction of pixels far from the background tint in any channel
        const double bg[3] = {0.2, 0.5, 0.2};
        int64_t hot = 0;
        for (int64_t i = 0; i < plane; ++i) {
            double dev = 0;
            for (int c = 0; c < 3; ++c)
                dev = std::max(dev, std::abs(d[static_cast<size_t>(c * plane + i)] - bg[c]));
            hot += dev > 0.2;
        }
        f[3] = static_cast<double>(hot) / static_cast<double>(plane);
        return f;
    };

    // fit centroids on even indices, score odd ones
    std::array<std::array<double, 4>, 7> centroid{};
    std::array<int, 7> cnt{};
    for (int64_t i = 0; i < ds.size(); i += 2) {
        auto f = features(ds.samples[static_cast<size_t>(i)]);
        int lab = ds.samples[static_cast<size_t>(i)].label;
        for (int j = 0; j < 4; ++j) centroid[static_cast<size_t>(lab)][static_cast<size_t>(j)] += f[static_cast<size_t>(j)];
        ++cnt[static_cast<size_t>(lab)];
    }
    for (int c = 0; c < 7; ++c)
        for (int j = 0; j < 4; ++j) centroid[static_cast<size_t>(c)][static_cast<size_t>(j)] /= cnt[static_cast<size_t>(c)];

    int64_t correct = 0, total = 0;
    for (int64_t i = 1; i < ds.size(); i += 2) {
        auto f = features(ds.samples[static_cast<size_t>(i)]);
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < 7; ++c) {
            double dist = 0;
            for (int j = 0; j < 4; ++j) {
                double diff = f[static_cast<size_t>(j)] - centroid[static_cast<size_t>(c)][static_cast<size_t>(j)];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        correct += best == ds.samples[static_cast<size_t>(i)].label;
        ++total;
    }
    double acc = static_cast<double>(correct) / static_cast<double>(total);
    INFO("nearest-centroid accuracy " << acc);
    REQUIRE(acc >= 0.95);
}

TEST_CASE("dataset ppm export round-trips pixels within quantization") {
    TempDir tmp;
    auto ds = generate_synthetic<double>(2, 3, 32, 5);
    write_dataset_ppm(ds, tmp.path.string());
    auto back = load_image_folder<double>(tmp.path.string(), 32);
    REQUIRE(back.size() == 6);
    REQUIRE(back.class_names == std::vector<std::string>{"class0", "class1"});
    for (size_t i = 0; i < 6; ++i) {
        const auto& a = ds.samples[i].image.data();
        const auto& b = back.samples[i].image.data();
        for (size_t j = 0; j < a.size(); ++j) REQUIRE(a[j] == Approx(b[j]).margin(1.0 / 255.0));
    }
}
