#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fsdet/datasets.hpp"
#include "fsdet/png_io.hpp"

using namespace fsdet;
using namespace fsdet::data;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
    DatasetSpec spec;
    spec.image_size = 64;
    spec.num_classes = 4;
    spec.min_objects = 1;
    spec.max_objects = 2;
    spec.min_scale = 10;
    spec.max_scale = 28;
    spec.image_count = 12;
    return spec;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("fsdet_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generate_synthetic: determinism, counts, invariants") {
    const DatasetSpec spec = small_spec();
    const Dataset a = generate_synthetic(spec, 42);
    const Dataset b = generate_synthetic(spec, 42);
    REQUIRE(a.images.size() == 12);
    SUBCASE("same (spec, seed) twice gives identical tensors and annotations") {
        for (std::size_t i = 0; i < a.images.size(); ++i) {
            CHECK(max_abs_diff(a.images[i].image, b.images[i].image) == 0.0);
            REQUIRE(a.images[i].objects.size() == b.images[i].objects.size());
            for (std::size_t k = 0; k < a.images[i].objects.size(); ++k) {
                CHECK(a.images[i].objects[k].class_id == b.images[i].objects[k].class_id);
                CHECK(a.images[i].objects[k].box.x1 == b.images[i].objects[k].box.x1);
            }
        }
    }
    SUBCASE("a different seed is allowed to differ") {
        const Dataset c = generate_synthetic(spec, 43);
        double diff = 0.0;
        for (std::size_t i = 0; i < a.images.size(); ++i) {
            diff += max_abs_diff(a.images[i].image, c.images[i].image);
        }
        CHECK(diff > 0.0);
    }
    SUBCASE("boxes are valid and inside the image") {
        for (const auto& img : a.images) {
            for (const auto& obj : img.objects) {
                CHECK(obj.box.valid());
                CHECK(obj.box.x1 >= 0.0);
                CHECK(obj.box.y1 >= 0.0);
                CHECK(obj.box.x2 <= 64.0);
                CHECK(obj.box.y2 <= 64.0);
                CHECK(obj.class_id >= 0);
                CHECK(obj.class_id < 4);
            }
        }
    }
    SUBCASE("fixed objects-per-image yields exactly that many boxes") {
        DatasetSpec fixed = spec;
        fixed.min_objects = 3;
        fixed.max_objects = 3;
        const Dataset d = generate_synthetic(fixed, 7);
        for (const auto& img : d.images) CHECK(img.objects.size() == 3);
    }
    SUBCASE("catalogue smaller than 2 rejected") {
        DatasetSpec bad = spec;
        bad.num_classes = 1;
        CHECK_THROWS_AS(generate_synthetic(bad, 1), ConfigError);
    }
}

TEST_CASE("class frequency over 1000 single-object images is uniform within 5%") {
    DatasetSpec spec = small_spec();
    spec.num_classes = 8;
    spec.image_size = 64;
    spec.max_scale = 24;
    spec.min_objects = 1;
    spec.max_objects = 1;
    spec.image_count = 1000;
    const Dataset d = generate_synthetic(spec, 99);
    std::map<std::int64_t, std::int64_t> counts;
    std::int64_t total = 0;
    for (const auto& img : d.images) {
        for (const auto& obj : img.objects) {
            ++counts[obj.class_id];
            ++total;
        }
    }
    const double expect = static_cast<double>(total) / 8.0;
    for (const auto& [cid, n] : counts) {
        CHECK(std::abs(static_cast<double>(n) - expect) / static_cast<double>(total) < 0.05);
    }
}

TEST_CASE("png round trip preserves bytes") {
    const fs::path dir = temp_dir("png");
    Rng rng(3);
    const std::int64_t w = 33, h = 17;
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w * h * 3));
    for (auto& v : rgb) v = static_cast<std::uint8_t>(rng.uniform_int(256));
    write_png_rgb8((dir / "t.png").string(), w, h, rgb);
    const PngImage img = read_png_rgb8((dir / "t.png").string());
    CHECK(img.width == w);
    CHECK(img.height == h);
    CHECK(img.rgb == rgb);
}

TEST_CASE("dataset write/load round trip and byte-identical regeneration") {
    const DatasetSpec spec = small_spec();
    const Dataset d = generate_synthetic(spec, 5);
    const fs::path dir1 = temp_dir("ds1");
    const fs::path dir2 = temp_dir("ds2");
    write_dataset(d, spec, 5, dir1.string());
    write_dataset(generate_synthetic(spec, 5), spec, 5, dir2.string());

    SUBCASE("regeneration is byte-identical, including the content hash") {
        for (const auto& entry : fs::recursive_directory_iterator(dir1)) {
            if (!entry.is_regular_file()) continue;
            const auto rel = fs::relative(entry.path(), dir1);
            CHECK(slurp(entry.path()) == slurp(dir2 / rel));
        }
        CHECK(dataset_content_hash(dir1.string()) == dataset_content_hash(dir2.string()));
    }
    SUBCASE("loading restores classes, boxes, and quantized pixels") {
        const Dataset back = load_dataset(dir1.string());
        REQUIRE(back.images.size() == d.images.size());
        CHECK(back.class_names == d.class_names);
        for (std::size_t i = 0; i < d.images.size(); ++i) {
            REQUIRE(back.images[i].objects.size() == d.images[i].objects.size());
            // pixels went through 8-bit quantization
            CHECK(max_abs_diff(back.images[i].image, d.images[i].image) < 0.5 / 255.0 + 1e-9);
        }
    }
}

TEST_CASE("make_split reproduces the published class partitions") {
    SUBCASE("dior-1 novel list is verbatim") {
        const SplitSpec s = make_split({}, "dior-1");
        CHECK(s.novel_classes == std::vector<std::string>{"baseball field", "basketball court",
                                                          "bridge", "chimney", "ship"});
        CHECK(s.base_classes.size() == 15);
    }
    SUBCASE("dior-2..4 partition the catalogue") {
        for (const std::string id : {"dior-2", "dior-3", "dior-4"}) {
            const SplitSpec s = make_split({}, id);
            CHECK(s.novel_classes.size() == 5);
            CHECK(s.base_classes.size() == 15);
            std::set<std::string> all(s.base_classes.begin(), s.base_classes.end());
            all.insert(s.novel_classes.begin(), s.novel_classes.end());
            CHECK(all.size() == 20);
        }
    }
    SUBCASE("nwpu novel trio is verbatim") {
        const SplitSpec s = make_split({}, "nwpu");
        CHECK(s.novel_classes ==
              std::vector<std::string>{"airplane", "baseball diamond", "tennis court"});
        CHECK(s.base_classes.size() == 7);
    }
    SUBCASE("base and novel sets are disjoint for every split") {
        for (const std::string id : {"dior-1", "dior-2", "dior-3", "dior-4", "nwpu"}) {
            const SplitSpec s = make_split({}, id);
            std::set<std::string> base(s.base_classes.begin(), s.base_classes.end());
            for (const auto& n : s.novel_classes) CHECK(base.count(n) == 0);
        }
    }
    SUBCASE("synthetic split takes the last M classes as novel") {
        const auto cat = synthetic_class_names(8);
        const SplitSpec s = make_split(cat, "synthetic");
        CHECK(s.novel_classes == std::vector<std::string>{cat[6], cat[7]});
        const SplitSpec s3 = make_split(cat, "synthetic-3");
        CHECK(s3.novel_classes.size() == 3);
    }
    SUBCASE("unknown split id lists the options") {
        CHECK_THROWS_WITH_AS(make_split({}, "dior-9"),
                             doctest::Contains("options"), ConfigError);
    }
}

TEST_CASE("sample_k_shot: exactly-K with masking, determinism, errors") {
    DatasetSpec spec = small_spec();
    spec.num_classes = 4;
    spec.min_objects = 1;
    spec.max_objects = 3;
    spec.image_count = 200;
    const Dataset d = generate_synthetic(spec, 11);
    const std::vector<std::string> classes = {d.class_names[0], d.class_names[2]};

    SUBCASE("exactly K counted instances per class after masking") {
        for (const std::int64_t k : {3, 5, 10, 20}) {
            const Dataset shot = sample_k_shot(d, classes, k, 77);
            std::map<std::string, std::int64_t> counts;  // independent counting pass
            for (const auto& img : shot.images) {
                for (const auto& obj : img.objects) {
                    if (!obj.ignore) {
                        ++counts[shot.class_names[static_cast<std::size_t>(obj.class_id)]];
                    }
                }
            }
            for (const auto& name : classes) CHECK(counts[name] == k);
            CHECK(counts.size() == classes.size());  // unrequested classes fully masked
        }
    }
    SUBCASE("single-object images give exactly K images per class") {
        DatasetSpec single = spec;
        single.min_objects = 1;
        single.max_objects = 1;
        single.image_count = 400;
        const Dataset ds = generate_synthetic(single, 12);
        const Dataset shot = sample_k_shot(ds, {ds.class_names[1]}, 3, 5);
        std::int64_t selected_with_instance = 0;
        for (const auto& img : shot.images) {
            for (const auto& obj : img.objects) {
                if (!obj.ignore) ++selected_with_instance;
            }
        }
        CHECK(selected_with_instance == 3);
        CHECK(shot.images.size() == 3);
    }
    SUBCASE("same seed identical, different seed may differ") {
        const Dataset s1 = sample_k_shot(d, classes, 5, 4);
        const Dataset s2 = sample_k_shot(d, classes, 5, 4);
        REQUIRE(s1.images.size() == s2.images.size());
        for (std::size_t i = 0; i < s1.images.size(); ++i) {
            CHECK(s1.images[i].source_id == s2.images[i].source_id);
        }
    }
    SUBCASE("insufficient instances raise a structured error with counts") {
        CHECK_THROWS_WITH_AS(sample_k_shot(d, classes, 100000, 1),
                             doctest::Contains("insufficient"), DataError);
    }
}

TEST_CASE("parse_voc_xml: conversion, empties, malformed input") {
    const fs::path dir = temp_dir("voc");
    SUBCASE("1-indexed VOC coordinates convert to the documented convention") {
        std::ofstream f(dir / "a.xml");
        f << "<annotation><size><width>100</width><height>80</height></size>"
             "<object><name>ship</name><bndbox><xmin>10</xmin><ymin>20</ymin>"
             "<xmax>30</xmax><ymax>40</ymax></bndbox></object></annotation>";
        f.close();
        const auto parsed = parse_voc_xml((dir / "a.xml").string());
        CHECK(parsed.width == 100);
        CHECK(parsed.height == 80);
        REQUIRE(parsed.objects.size() == 1);
        CHECK(parsed.objects[0].class_name == "ship");
        CHECK(parsed.objects[0].box.x1 == doctest::Approx(9.0));
        CHECK(parsed.objects[0].box.y1 == doctest::Approx(19.0));
        CHECK(parsed.objects[0].box.x2 == doctest::Approx(30.0));
        CHECK(parsed.objects[0].box.y2 == doctest::Approx(40.0));
    }
    SUBCASE("empty object list is valid") {
        std::ofstream f(dir / "b.xml");
        f << "<annotation><size><width>10</width><height>10</height></size></annotation>";
        f.close();
        CHECK(parse_voc_xml((dir / "b.xml").string()).objects.empty());
    }
    SUBCASE("xmax <= xmin names the object in the error") {
        std::ofstream f(dir / "c.xml");
        f << "<annotation><object><name>dam</name><bndbox><xmin>30</xmin><ymin>5</ymin>"
             "<xmax>30</xmax><ymax>9</ymax></bndbox></object></annotation>";
        f.close();
        CHECK_THROWS_WITH_AS(parse_voc_xml((dir / "c.xml").string()), doctest::Contains("dam"),
                             ParseError);
    }
    SUBCASE("missing bndbox field names the element path") {
        std::ofstream f(dir / "d.xml");
        f << "<annotation><object><name>x</name><bndbox><xmin>1</xmin><ymin>1</ymin>"
             "<xmax>5</xmax></bndbox></object></annotation>";
        f.close();
        CHECK_THROWS_WITH_AS(parse_voc_xml((dir / "d.xml").string()),
                             doctest::Contains("bndbox.ymax"), ParseError);
    }
}

TEST_CASE("parse_nwpu: grammar, blanks, invariant enforcement") {
    const fs::path dir = temp_dir("nwpu");
    SUBCASE("documented line format parses") {
        std::ofstream f(dir / "a.txt");
        f << "(563,478),(630,573),1\n";
        f.close();
        const auto parsed = parse_nwpu((dir / "a.txt").string());
        REQUIRE(parsed.objects.size() == 1);
        CHECK(parsed.objects[0].box.x1 == doctest::Approx(563));
        CHECK(parsed.objects[0].box.y1 == doctest::Approx(478));
        CHECK(parsed.objects[0].box.x2 == doctest::Approx(630));
        CHECK(parsed.objects[0].box.y2 == doctest::Approx(573));
        CHECK(parsed.objects[0].class_id == 1);
        CHECK(parsed.objects[0].class_name == "airplane");
    }
    SUBCASE("whitespace tolerant") {
        std::ofstream f(dir / "b.txt");
        f << "  ( 5 , 6 ) , ( 9 , 12 ) , 3  \n\n";
        f.close();
        const auto parsed = parse_nwpu((dir / "b.txt").string());
        REQUIRE(parsed.objects.size() == 1);
        CHECK(parsed.objects[0].class_name == "storage tank");
    }
    SUBCASE("blank-line-only file gives zero boxes") {
        std::ofstream f(dir / "c.txt");
        f << "\n   \n\n";
        f.close();
        CHECK(parse_nwpu((dir / "c.txt").string()).objects.empty());
    }
    SUBCASE("x2 <= x1 is rejected with the line number") {
        std::ofstream f(dir / "d.txt");
        f << "(1,1),(4,9),2\n(5,5),(4,9),2\n";
        f.close();
        CHECK_THROWS_WITH_AS(parse_nwpu((dir / "d.txt").string()), doctest::Contains("line 2"),
                             ParseError);
    }
    SUBCASE("malformed line is rejected with the line number") {
        std::ofstream f(dir / "e.txt");
        f << "(1,2),(3,4)\n";
        f.close();
        CHECK_THROWS_WITH_AS(parse_nwpu((dir / "e.txt").string()), doctest::Contains("line 1"),
                             ParseError);
    }
}
