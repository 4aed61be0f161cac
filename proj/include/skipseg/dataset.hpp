#pragma once

// Synthetic shapes dataset and netpbm (P6 image / P5 mask) file I/O.
//
// Layout on disk:
//   <root>/images/<id>.ppm
//   <root>/masks/<id>.pgm
//   <root>/manifest.tsv      columns: id, split (train|val)

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "tsv.hpp"

namespace skipseg {

enum class ShapeKind { rectangle = 0, ellipse = 1, triangle = 2 };

/// One shape in pixel coordinates: bounding box [x0, x0 + w) x [y0, y0 + h).
struct PlacedShape {
    ShapeKind kind = ShapeKind::rectangle;
    int label = 0;
    int x0 = 0;
    int y0 = 0;
    int w = 0;
    int h = 0;
};

/// Pixel-center membership test in exact integer arithmetic.
inline bool shape_contains(const PlacedShape& s, int px, int py) {
    if (px < s.x0 || px >= s.x0 + s.w || py < s.y0 || py >= s.y0 + s.h) return false;
    const std::int64_t dx = 2 * (px - s.x0) + 1 - s.w;  // 2 * (center offset) along x
    const std::int64_t dy = 2 * (py - s.y0) + 1 - s.h;
    const std::int64_t w = s.w, h = s.h;
    switch (s.kind) {
        case ShapeKind::rectangle:
            return true;
        case ShapeKind::ellipse:
            return dx * dx * h * h + dy * dy * w * w <= w * w * h * h;
        case ShapeKind::triangle: {
            // apex at top center, base along the bottom edge
            const std::int64_t depth = 2 * (py - s.y0) + 1;
            return 2 * h * (dx < 0 ? -dx : dx) <= depth * w;
        }
    }
    return false;
}

struct Sample {
    Tensor<float> image;  // (1, 3, H, W), values in [0, 1]
    LabelImage mask;      // object labels 0..n_classes-2, background n_classes-1, 255 ignored
    std::string id;
    std::string split = "train";
    std::vector<PlacedShape> shapes;  // empty for samples loaded from disk
};

struct Dataset {
    int n_classes = 0;
    std::vector<Sample> samples;

    [[nodiscard]] bool empty() const { return samples.empty(); }
    [[nodiscard]] std::size_t size() const { return samples.size(); }

    [[nodiscard]] Dataset subset(const std::string& split) const {
        Dataset out{n_classes, {}};
        for (const auto& s : samples) {
            if (s.split == split) out.samples.push_back(s);
        }
        return out;
    }
};

struct GenerateOptions {
    int min_shapes = 1;
    int max_shapes = 3;
    int val_count = 0;            // the last `val_count` samples are marked "val"
    double max_area_fraction = 0.6;
    double min_extent = 0.2;      // shape side as a fraction of image size
    double max_extent = 0.45;
    double hue_jitter = 0.0;      // shape hue = class hue + uniform(-hue_jitter, hue_jitter), in turns
};

inline std::string sample_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05d", index);
    return buf;
}

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    const double c = v * s;
    const double hp = std::fmod(h * 6.0, 6.0);
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

inline bool boxes_overlap(const PlacedShape& a, const PlacedShape& b, int gap) {
    return a.x0 < b.x0 + b.w + gap && b.x0 < a.x0 + a.w + gap && a.y0 < b.y0 + b.h + gap &&
           b.y0 < a.y0 + a.h + gap;
}

inline Sample generate_one(std::uint64_t seed, int index, int n_object_classes, int size, const GenerateOptions& opt) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
    const int background = n_object_classes;
    Sample s;
    s.id = sample_id(index);
    s.image = Tensor<float>({1, 3, size, size});
    s.mask = LabelImage(size, size, background);

    // background: gray level with two random sinusoidal gratings and pixel noise
    const double base = rng.uniform(0.35, 0.55);
    const double f1 = rng.uniform(0.15, 0.6), f2 = rng.uniform(0.15, 0.6);
    const double p1 = rng.uniform(0.0, 6.28318), p2 = rng.uniform(0.0, 6.28318);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double tex = 0.08 * std::sin(f1 * x + p1) + 0.08 * std::sin(f2 * y + p2);
            for (int c = 0; c < 3; ++c) {
                s.image(0, c, y, x) = static_cast<float>(base + tex + 0.04 * rng.normal());
            }
        }
    }

    const int wanted = opt.max_shapes > 0 ? rng.uniform_int(std::max(opt.min_shapes, 0), opt.max_shapes) : 0;
    const int lo = std::max(2, static_cast<int>(std::lround(opt.min_extent * size)));
    const int hi = std::max(lo, static_cast<int>(std::lround(opt.max_extent * size)));
    const double area_budget = opt.max_area_fraction * size * size;
    double used = 0.0;
    for (int k = 0; k < wanted; ++k) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            PlacedShape sh;
            sh.label = rng.uniform_int(0, n_object_classes - 1);
            sh.kind = static_cast<ShapeKind>(sh.label % 3);
            sh.w = rng.uniform_int(lo, hi);
            sh.h = rng.uniform_int(lo, hi);
            sh.x0 = rng.uniform_int(0, size - sh.w);
            sh.y0 = rng.uniform_int(0, size - sh.h);
            if (used + static_cast<double>(sh.w) * sh.h > area_budget) continue;
            const bool clash = std::any_of(s.shapes.begin(), s.shapes.end(),
                                           [&](const PlacedShape& o) { return boxes_overlap(sh, o, 1); });
            if (clash) continue;
            used += static_cast<double>(sh.w) * sh.h;
            s.shapes.push_back(sh);
            break;
        }
    }

    for (const auto& sh : s.shapes) {
        double rgb[3];
        const double hue = static_cast<double>(sh.label) / n_object_classes + rng.uniform(-opt.hue_jitter, opt.hue_jitter);
        hsv_to_rgb(hue - std::floor(hue), 0.75, 0.9, rgb);
        const double shift = rng.uniform(-0.08, 0.08);
        for (int y = sh.y0; y < sh.y0 + sh.h; ++y) {
            for (int x = sh.x0; x < sh.x0 + sh.w; ++x) {
                if (!shape_contains(sh, x, y)) continue;
                s.mask.at(y, x) = sh.label;
                for (int c = 0; c < 3; ++c) {
                    s.image(0, c, y, x) = static_cast<float>(rgb[c] + shift + 0.06 * rng.normal());
                }
            }
        }
    }
    for (auto& v : s.image.data()) v = std::clamp(v, 0.0f, 1.0f);
    return s;
}

}  // namespace detail

/// Deterministic synthetic dataset: sample i depends only on (seed, i). Labels are
/// 0..n_object_classes-1 for shapes (shape kind cycles rectangle, ellipse, triangle with
/// the class) and n_object_classes for background.
inline Dataset generate(std::uint64_t seed, int count, int n_object_classes, int image_size,
                        const GenerateOptions& opt = {}) {
    if (n_object_classes < 1) throw ConfigError("need at least one object class");
    if (image_size < 4) throw ConfigError("image size must be at least 4");
    if (count < 0) throw ConfigError("sample count must be non-negative");
    Dataset ds{n_object_classes + 1, {}};
    for (int i = 0; i < count; ++i) {
        ds.samples.push_back(detail::generate_one(seed, i, n_object_classes, image_size, opt));
        ds.samples.back().split = i >= count - opt.val_count ? "val" : "train";
    }
    return ds;
}

// ---- netpbm I/O ----

namespace detail {

inline std::string read_token(std::istream& in, const std::string& path) {
    std::string tok;
    char c;
    while (in.get(c)) {
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok += c;
    }
    if (tok.empty()) throw DataError(path + ": truncated netpbm header");
    return tok;
}

inline int read_header_int(std::istream& in, const std::string& path) {
    const auto tok = read_token(in, path);
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v < 0) throw DataError("");
        return v;
    } catch (const std::exception&) {
        throw DataError(path + ": malformed netpbm header field '" + tok + "'");
    }
}

struct Netpbm {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
};

inline Netpbm read_netpbm(const std::string& path, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open");
    const auto m = read_token(in, path);
    if (m != magic) throw DataError(path + ": expected netpbm magic " + magic + ", got '" + m + "'");
    Netpbm img;
    img.channels = m == "P6" ? 3 : 1;
    img.width = read_header_int(in, path);
    img.height = read_header_int(in, path);
    const int maxval = read_header_int(in, path);
    if (maxval != 255) throw DataError(path + ": only maxval 255 is supported");
    if (img.width == 0 || img.height == 0) throw DataError(path + ": empty image");
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw DataError(path + ": truncated pixel data");
    }
    return img;
}

inline void write_netpbm(const std::string& path, const char* magic, int width, int height,
                         const std::vector<std::uint8_t>& pixels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot write");
    out << magic << '\n' << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw DataError(path + ": write failed");
}

inline std::uint8_t quantize(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline void write_ppm(const std::string& path, const Tensor<float>& image) {
    const int H = image.height(), W = image.width();
    std::vector<std::uint8_t> px(static_cast<std::size_t>(H) * W * 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * W + x) * 3 + c] = detail::quantize(image(0, c, y, x));
        }
    }
    detail::write_netpbm(path, "P6", W, H, px);
}

inline Tensor<float> read_ppm(const std::string& path) {
    const auto img = detail::read_netpbm(path, "P6");
    Tensor<float> t({1, 3, img.height, img.width});
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                t(0, c, y, x) = static_cast<float>(img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c]) / 255.0f;
            }
        }
    }
    return t;
}

/// Writes 8-bit gray values; labels and heatmaps share this path.
inline void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& values) {
    detail::write_netpbm(path, "P5", width, height, values);
}

inline void write_mask(const std::string& path, const LabelImage& mask) {
    std::vector<std::uint8_t> px(mask.labels.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
        if (mask.labels[i] < 0 || mask.labels[i] > 255) throw DataError(path + ": label does not fit in 8 bits");
        px[i] = static_cast<std::uint8_t>(mask.labels[i]);
    }
    write_pgm(path, mask.width, mask.height, px);
}

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;
    [[nodiscard]] int at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

inline GrayImage read_pgm(const std::string& path) {
    auto img = detail::read_netpbm(path, "P5");
    return {img.width, img.height, std::move(img.pixels)};
}

inline LabelImage read_mask(const std::string& path) {
    const auto g = read_pgm(path);
    LabelImage m(g.height, g.width);
    for (std::size_t i = 0; i < g.values.size(); ++i) m.labels[i] = g.values[i];
    return m;
}

struct SamplePaths {
    std::string image;
    std::string mask;
};

inline SamplePaths sample_paths(const std::string& root, const std::string& id) {
    const std::filesystem::path r(root);
    return {(r / "images" / (id + ".ppm")).string(), (r / "masks" / (id + ".pgm")).string()};
}

inline Sample load_sample(const std::string& image_path, const std::string& mask_path) {
    Sample s;
    s.image = read_ppm(image_path);
    s.mask = read_mask(mask_path);
    if (s.mask.height != s.image.height() || s.mask.width != s.image.width()) {
        throw DataError(mask_path + ": mask is " + std::to_string(s.mask.width) + "x" + std::to_string(s.mask.height) +
                        " but image " + image_path + " is " + std::to_string(s.image.width()) + "x" +
                        std::to_string(s.image.height()));
    }
    s.id = std::filesystem::path(image_path).stem().string();
    return s;
}

inline SamplePaths save_sample(const Sample& sample, const std::string& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(root) / "images", ec);
    fs::create_directories(fs::path(root) / "masks", ec);
    if (ec) throw DataError(root + ": cannot create dataset directories: " + ec.message());
    const auto paths = sample_paths(root, sample.id);
    write_ppm(paths.image, sample.image);
    write_mask(paths.mask, sample.mask);
    return paths;
}

/// Writes every sample plus manifest.tsv; returns the manifest path.
inline std::string save_dataset(const Dataset& ds, const std::string& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(root) / "images", ec);
    fs::create_directories(fs::path(root) / "masks", ec);
    if (ec) throw DataError(root + ": cannot create dataset directories: " + ec.message());
    for (const auto& s : ds.samples) save_sample(s, root);
    const auto manifest = (fs::path(root) / "manifest.tsv").string();
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw DataError(manifest + ": cannot write");
    out << tsv::row({"id", "split"});
    for (const auto& s : ds.samples) out << tsv::row({s.id, s.split});
    if (!out) throw DataError(manifest + ": write failed");
    return manifest;
}

/// Loads the dataset under `root`. The class count is taken from `n_classes` when positive,
/// otherwise inferred as max label + 1 (background is the highest label).
inline Dataset load_dataset(const std::string& root, int n_classes = 0) {
    const auto manifest = (std::filesystem::path(root) / "manifest.tsv").string();
    std::ifstream in(manifest);
    if (!in) throw DataError(manifest + ": cannot open");
    std::string line;
    if (!std::getline(in, line) || tsv::split(line) != std::vector<std::string>{"id", "split"}) {
        throw DataError(manifest + ": expected header 'id<TAB>split'");
    }
    Dataset ds;
    int max_label = -1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = tsv::split(line);
        if (f.size() != 2 || (f[1] != "train" && f[1] != "val")) throw DataError(manifest + ": malformed row '" + line + "'");
        const auto paths = sample_paths(root, f[0]);
        Sample s = load_sample(paths.image, paths.mask);
        s.id = f[0];
        s.split = f[1];
        for (int l : s.mask.labels) {
            if (l != kIgnoreLabel) max_label = std::max(max_label, l);
        }
        ds.samples.push_back(std::move(s));
    }
    ds.n_classes = n_classes > 0 ? n_classes : max_label + 1;
    for (const auto& s : ds.samples) {
        for (int l : s.mask.labels) {
            if (l != kIgnoreLabel && l >= ds.n_classes) {
                throw DataError(sample_paths(root, s.id).mask + ": label " + std::to_string(l) + " exceeds class count " +
                                std::to_string(ds.n_classes));
            }
        }
    }
    return ds;
}

}  // namespace skipseg
