#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fsdet/datasets.hpp"
#include "fsdet/png_io.hpp"

#include <nlohmann/json.hpp>

namespace fsdet::data {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void DatasetSpec::validate() const {
    if (image_size < 16) throw ConfigError("dataset spec: image_size must be >= 16");
    if (num_classes < 2) throw ConfigError("dataset spec: class catalogue must hold >= 2 classes");
    if (num_classes > 12) throw ConfigError("dataset spec: at most 12 shape x texture classes");
    if (min_objects < 0 || max_objects < min_objects) {
        throw ConfigError("dataset spec: invalid objects-per-image range");
    }
    if (min_scale < 4.0 || max_scale < min_scale ||
        max_scale + 4.0 > static_cast<double>(image_size)) {
        throw ConfigError("dataset spec: object scale range must fit the image");
    }
    if (clutter < 0.0 || clutter > 1.0) throw ConfigError("dataset spec: clutter must be in [0,1]");
    if (image_count < 1) throw ConfigError("dataset spec: image_count must be >= 1");
}

namespace {

enum class Shape { kCircle, kSquare, kTriangle, kDiamond, kRing, kCross };
constexpr std::array<const char*, 6> kShapeNames = {"circle", "square",  "triangle",
                                                    "diamond", "ring",   "cross"};
constexpr std::array<const char*, 2> kTextureNames = {"solid", "striped"};

// Coverage of the shape at a point in unit coordinates ([-1,1]^2 box).
bool inside_shape(Shape s, double u, double v) {
    switch (s) {
        case Shape::kCircle: return u * u + v * v <= 1.0;
        case Shape::kSquare: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        case Shape::kTriangle:  // upward triangle filling the box
            return v >= -1.0 && v <= 1.0 && std::abs(u) <= (v + 1.0) * 0.5;
        case Shape::kDiamond: return std::abs(u) + std::abs(v) <= 1.0;
        case Shape::kRing: {
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.36;
        }
        case Shape::kCross:
            return (std::abs(u) <= 0.34 && std::abs(v) <= 1.0) ||
                   (std::abs(v) <= 0.34 && std::abs(u) <= 1.0);
    }
    return false;
}

struct Rgb {
    double r, g, b;
};

double color_dist(const Rgb& a, const Rgb& b) {
    return std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b);
}

}  // namespace

std::vector<std::string> synthetic_class_names(std::int64_t count) {
    if (count < 2 || count > 12) {
        throw ConfigError("synthetic catalogue supports 2..12 classes, got " + std::to_string(count));
    }
    std::vector<std::string> names;
    for (std::size_t s = 0; s < kShapeNames.size() && static_cast<std::int64_t>(names.size()) < count;
         ++s) {
        for (std::size_t t = 0; t < kTextureNames.size() &&
                                static_cast<std::int64_t>(names.size()) < count;
             ++t) {
            names.push_back(std::string(kShapeNames[s]) + "_" + kTextureNames[t]);
        }
    }
    return names;
}

Dataset generate_synthetic(const DatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    Dataset ds;
    ds.class_names = synthetic_class_names(spec.num_classes);

    const std::int64_t size = spec.image_size;
    for (std::int64_t idx = 0; idx < spec.image_count; ++idx) {
        Rng rng = Rng::derived(seed, static_cast<std::uint64_t>(idx));
        AnnotatedImage img;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "img_%06lld", static_cast<long long>(idx));
        img.source_id = buf;
        img.image = Tensor({3, size, size});

        // Background: muted base color + low-frequency waves + speckle,
        // both scaled by the clutter level.
        const Rgb base{0.25 + 0.3 * rng.uniform(), 0.25 + 0.3 * rng.uniform(),
                       0.25 + 0.3 * rng.uniform()};
        struct Wave {
            double fx, fy, phase, amp;
        };
        std::array<Wave, 3> waves;
        for (auto& w : waves) {
            w.fx = rng.uniform(0.5, 3.0) * 6.283185307179586 / static_cast<double>(size);
            w.fy = rng.uniform(0.5, 3.0) * 6.283185307179586 / static_cast<double>(size);
            w.phase = rng.uniform(0.0, 6.283185307179586);
            w.amp = rng.uniform(0.02, 0.08) * spec.clutter * 3.0;
        }
        for (std::int64_t y = 0; y < size; ++y) {
            for (std::int64_t x = 0; x < size; ++x) {
                double wave = 0.0;
                for (const auto& w : waves) {
                    wave += w.amp * std::sin(w.fx * static_cast<double>(x) +
                                             w.fy * static_cast<double>(y) + w.phase);
                }
                const double speckle = spec.clutter * 0.12 * (rng.uniform() - 0.5);
                img.image.at3(0, y, x) = std::clamp(base.r + wave + speckle, 0.0, 1.0);
                img.image.at3(1, y, x) = std::clamp(base.g + wave + speckle, 0.0, 1.0);
                img.image.at3(2, y, x) = std::clamp(base.b + wave + speckle, 0.0, 1.0);
            }
        }

        const std::int64_t count =
            spec.min_objects +
            static_cast<std::int64_t>(rng.uniform_int(
                static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
        for (std::int64_t obj = 0; obj < count; ++obj) {
            const std::int64_t class_id =
                static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(spec.num_classes)));
            const Shape shape = static_cast<Shape>(class_id / 2);
            const bool striped = (class_id % 2) == 1;
            const double side = rng.uniform(spec.min_scale, spec.max_scale);
            const double half = side * 0.5;

            // Rejection-sample against heavy overlap; the final attempt is
            // accepted unconditionally so the object count stays exact.
            Box box;
            for (int attempt = 0; attempt < 24; ++attempt) {
                const double cx = rng.uniform(half + 1.0, static_cast<double>(size) - half - 1.0);
                const double cy = rng.uniform(half + 1.0, static_cast<double>(size) - half - 1.0);
                box = {cx - half, cy - half, cx + half, cy + half};
                bool clear = true;
                for (const auto& other : img.objects) {
                    if (iou(box, other.box) > 0.25) {
                        clear = false;
                        break;
                    }
                }
                if (clear) break;
            }

            // Bright color far from the background base.
            Rgb color;
            do {
                color = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
            } while (color_dist(color, base) < 0.8);
            const Rgb color2{std::clamp(1.2 * (1.0 - color.r), 0.0, 1.0),
                             std::clamp(1.2 * (1.0 - color.g), 0.0, 1.0),
                             std::clamp(1.2 * (1.0 - color.b), 0.0, 1.0)};
            const double stripe_period = std::max(3.0, side / 5.0);

            const std::int64_t px1 = static_cast<std::int64_t>(std::floor(box.x1));
            const std::int64_t py1 = static_cast<std::int64_t>(std::floor(box.y1));
            const std::int64_t px2 = static_cast<std::int64_t>(std::ceil(box.x2));
            const std::int64_t py2 = static_cast<std::int64_t>(std::ceil(box.y2));
            constexpr int kSub = 3;  // 3x3 supersampling for anti-aliased edges
            for (std::int64_t y = std::max<std::int64_t>(0, py1);
                 y < std::min<std::int64_t>(size, py2 + 1); ++y) {
                for (std::int64_t x = std::max<std::int64_t>(0, px1);
                     x < std::min<std::int64_t>(size, px2 + 1); ++x) {
                    int hits = 0;
                    for (int sy = 0; sy < kSub; ++sy) {
                        for (int sx = 0; sx < kSub; ++sx) {
                            const double fy = static_cast<double>(y) + (sy + 0.5) / kSub;
                            const double fx = static_cast<double>(x) + (sx + 0.5) / kSub;
                            const double u = (fx - box.cx()) / half;
                            const double v = (fy - box.cy()) / half;
                            if (inside_shape(shape, u, v)) ++hits;
                        }
                    }
                    if (hits == 0) continue;
                    const double alpha = static_cast<double>(hits) / (kSub * kSub);
                    Rgb fill = color;
                    if (striped) {
                        const double band = std::fmod(
                            (static_cast<double>(x) - box.x1) + (static_cast<double>(y) - box.y1),
                            2.0 * stripe_period);
                        if (band >= stripe_period) fill = color2;
                    }
                    img.image.at3(0, y, x) =
                        (1.0 - alpha) * img.image.at3(0, y, x) + alpha * fill.r;
                    img.image.at3(1, y, x) =
                        (1.0 - alpha) * img.image.at3(1, y, x) + alpha * fill.g;
                    img.image.at3(2, y, x) =
                        (1.0 - alpha) * img.image.at3(2, y, x) + alpha * fill.b;
                }
            }

            // Tight box of the drawn shape (the unit shapes touch their box).
            img.objects.push_back({box, class_id, false});
        }
        ds.images.push_back(std::move(img));
    }
    return ds;
}

namespace {

std::vector<std::uint8_t> tensor_to_rgb8(const Tensor& t) {
    const std::int64_t h = t.dim(1), w = t.dim(2);
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (std::int64_t c = 0; c < 3; ++c) {
                const double v = std::clamp(t.at3(c, y, x), 0.0, 1.0);
                rgb[static_cast<std::size_t>((y * w + x) * 3 + c)] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return rgb;
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes, std::uint64_t h) {
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

void write_dataset(const Dataset& dataset, const DatasetSpec& spec, std::uint64_t seed,
                   const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    ordered_json ann;
    ann["schema_version"] = 1;
    ann["classes"] = dataset.class_names;
    ann["images"] = ordered_json::array();
    ann["annotations"] = ordered_json::array();
    std::int64_t image_id = 0;
    for (const auto& img : dataset.images) {
        const std::string file = "images/" + img.source_id + ".png";
        write_png_rgb8((fs::path(dir) / file).string(), img.image.dim(2), img.image.dim(1),
                       tensor_to_rgb8(img.image));
        ordered_json rec;
        rec["id"] = image_id;
        rec["file"] = file;
        rec["width"] = img.image.dim(2);
        rec["height"] = img.image.dim(1);
        ann["images"].push_back(rec);
        for (const auto& obj : img.objects) {
            ordered_json a;
            a["image_id"] = image_id;
            a["box"] = {obj.box.x1, obj.box.y1, obj.box.x2, obj.box.y2};
            a["class_id"] = obj.class_id;
            a["class_name"] = dataset.class_names.at(static_cast<std::size_t>(obj.class_id));
            if (obj.ignore) a["ignore"] = true;
            ann["annotations"].push_back(a);
        }
        ++image_id;
    }
    {
        std::ofstream f(fs::path(dir) / "annotations.json", std::ios::trunc);
        f << ann.dump(2) << "\n";
    }
    ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["seed"] = seed;
    manifest["spec"] = {{"image_size", spec.image_size},
                        {"num_classes", spec.num_classes},
                        {"min_objects", spec.min_objects},
                        {"max_objects", spec.max_objects},
                        {"min_scale", spec.min_scale},
                        {"max_scale", spec.max_scale},
                        {"clutter", spec.clutter},
                        {"image_count", spec.image_count}};
    manifest["image_count"] = static_cast<std::int64_t>(dataset.images.size());
    {
        std::ofstream f(fs::path(dir) / "manifest.json", std::ios::trunc);
        f << manifest.dump(2) << "\n";
    }
    // Content hash over all artifacts, appended last so reruns can compare.
    ordered_json hash_rec;
    hash_rec["content_fnv1a"] = dataset_content_hash(dir);
    {
        std::ofstream f(fs::path(dir) / "content_hash.json", std::ios::trunc);
        f << hash_rec.dump(2) << "\n";
    }
}

std::uint64_t dataset_content_hash(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string rel = fs::relative(entry.path(), dir).string();
        if (rel == "content_hash.json") continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& rel : files) {
        h = fnv1a(std::vector<std::uint8_t>(rel.begin(), rel.end()), h);
        std::ifstream f(fs::path(dir) / rel, std::ios::binary);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
        h = fnv1a(bytes, h);
    }
    return h;
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "annotations.json");
    if (!f) throw DataError("load_dataset: missing annotations.json in " + dir);
    ordered_json ann = ordered_json::parse(f);
    Dataset ds;
    ds.class_names = ann.at("classes").get<std::vector<std::string>>();
    std::vector<AnnotatedImage> images;
    for (const auto& rec : ann.at("images")) {
        AnnotatedImage img;
        const std::string file = rec.at("file").get<std::string>();
        PngImage png = read_png_rgb8((fs::path(dir) / file).string());
        img.image = Tensor({3, png.height, png.width});
        for (std::int64_t y = 0; y < png.height; ++y) {
            for (std::int64_t x = 0; x < png.width; ++x) {
                for (std::int64_t c = 0; c < 3; ++c) {
                    img.image.at3(c, y, x) =
                        static_cast<double>(png.rgb[static_cast<std::size_t>((y * png.width + x) * 3 + c)]) /
                        255.0;
                }
            }
        }
        img.source_id = fs::path(file).stem().string();
        images.push_back(std::move(img));
    }
    for (const auto& a : ann.at("annotations")) {
        const std::int64_t image_id = a.at("image_id").get<std::int64_t>();
        ObjectAnnotation obj;
        const auto& b = a.at("box");
        obj.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                   b.at(3).get<double>()};
        obj.class_id = a.at("class_id").get<std::int64_t>();
        obj.ignore = a.value("ignore", false);
        images.at(static_cast<std::size_t>(image_id)).objects.push_back(obj);
    }
    ds.images = std::move(images);
    return ds;
}

}  // namespace fsdet::data
