#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsdet/boxes.hpp"
#include "fsdet/rng.hpp"
#include "fsdet/tensor.hpp"

namespace fsdet::data {

struct ObjectAnnotation {
    Box box;
    std::int64_t class_id = -1;
    bool ignore = false;  // masked from training targets (k-shot surplus etc.)
};

struct AnnotatedImage {
    Tensor image;  // (3,H,W) in [0,1]; may be empty for metadata-only records
    std::vector<ObjectAnnotation> objects;
    std::string source_id;
};

struct Dataset {
    std::vector<std::string> class_names;  // catalogue; class_id indexes this
    std::vector<AnnotatedImage> images;
};

// ---- synthetic generation ---------------------------------------------------

struct DatasetSpec {
    std::int64_t image_size = 128;
    std::int64_t num_classes = 8;  // shape x texture combos
    std::int64_t min_objects = 1;
    std::int64_t max_objects = 3;
    double min_scale = 8.0;   // object side length, pixels
    double max_scale = 64.0;
    double clutter = 0.3;     // background clutter level in [0,1]
    std::int64_t image_count = 100;

    void validate() const;
};

// Shape x texture class names, shape-major ("circle_solid", "circle_striped", ...).
std::vector<std::string> synthetic_class_names(std::int64_t count);

// Deterministic generation: image i is drawn from Rng::derived(seed, i).
Dataset generate_synthetic(const DatasetSpec& spec, std::uint64_t seed);

// On-disk form: images/img_%06d.png + annotations.json + manifest.json.
void write_dataset(const Dataset& dataset, const DatasetSpec& spec, std::uint64_t seed,
                   const std::string& dir);
Dataset load_dataset(const std::string& dir);

// FNV-1a over every dataset artifact byte; reproducibility checks key on it.
std::uint64_t dataset_content_hash(const std::string& dir);

// ---- splits -----------------------------------------------------------------

struct SplitSpec {
    std::vector<std::string> base_classes;
    std::vector<std::string> novel_classes;

    void validate(const std::vector<std::string>& catalogue) const;
};

std::vector<std::string> dior_catalogue();
std::vector<std::string> nwpu_catalogue();

// split_id: dior-1..dior-4, nwpu, or synthetic[-M] (last M classes novel,
// default 2). Paper splits ignore the passed catalogue and use the built-in
// one; passing a different non-empty catalogue for them is an error.
SplitSpec make_split(const std::vector<std::string>& catalogue, const std::string& split_id);

// ---- k-shot sampling ----------------------------------------------------------

// Greedy seeded image sampling until each requested class holds exactly K
// counted instances. Surplus instances of requested classes and all
// instances of unrequested classes are masked (ignore=true).
Dataset sample_k_shot(const Dataset& dataset, const std::vector<std::string>& classes,
                      std::int64_t k, std::uint64_t seed);

// ---- annotation parsers -------------------------------------------------------

struct ParsedObject {
    Box box;
    std::string class_name;
    std::int64_t class_id = -1;  // NWPU numeric id (1-based); -1 for VOC
};

struct ParsedAnnotations {
    std::int64_t width = -1;
    std::int64_t height = -1;
    std::vector<ParsedObject> objects;
};

// VOC-style XML; 1-indexed inclusive pixel coordinates convert to the
// internal convention as x1 = xmin - 1, y1 = ymin - 1, x2 = xmax, y2 = ymax.
ParsedAnnotations parse_voc_xml(const std::string& path);

// NWPU VHR-10 text lines: "(x1,y1),(x2,y2),class" with tolerant whitespace.
ParsedAnnotations parse_nwpu(const std::string& path);

}  // namespace fsdet::data
