#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fsdet/detector.hpp"

namespace fsdet::det {

using ordered_json = nlohmann::ordered_json;

namespace {
constexpr char kMagic[8] = {'F', 'S', 'D', 'E', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const Detector& detector, const std::string& path,
                     const std::string& rng_state) {
    ordered_json manifest;
    manifest["format_version"] = kVersion;
    manifest["phase"] = phase_name(detector.phase());
    manifest["config"] = ordered_json::parse(detector.config().to_json());
    manifest["layout"] = {{"base_classes", detector.layout().base_classes},
                          {"novel_classes", detector.layout().novel_classes},
                          {"placeholders", detector.layout().placeholders}};
    manifest["rng_state"] = rng_state.empty() ? detector.rng_state : rng_state;
    ordered_json params = ordered_json::array();
    for (const auto& [name, v] : detector.params().items()) {
        params.push_back({{"name", name}, {"shape", v.val().shape()}});
    }
    manifest["params"] = params;
    const std::string text = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save_checkpoint: cannot open " + path);
    f.write(kMagic, 8);
    const std::uint32_t version = kVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = text.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, v] : detector.params().items()) {
        f.write(reinterpret_cast<const char*>(v.val().data()),
                static_cast<std::streamsize>(v.val().numel() * sizeof(double)));
    }
    if (!f) throw DataError("save_checkpoint: write failed for " + path);
}

Detector load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0) {
        throw ParseError("load_checkpoint: bad magic in " + path);
    }
    std::uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kVersion) {
        throw ParseError("load_checkpoint: unsupported version " + std::to_string(version));
    }
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    f.read(text.data(), static_cast<std::streamsize>(len));
    if (!f) throw ParseError("load_checkpoint: truncated manifest");
    ordered_json manifest = ordered_json::parse(text);

    const DetectorConfig cfg = DetectorConfig::from_json(manifest.at("config").dump());
    const auto base = manifest.at("layout").at("base_classes").get<std::vector<std::string>>();
    const auto novel = manifest.at("layout").at("novel_classes").get<std::vector<std::string>>();

    Detector detector = Detector::init(cfg, base, 0);
    if (!novel.empty()) detector.activate_novel(novel, 0);
    detector.set_phase(manifest.at("phase").get<std::string>() == "finetuned" ? Phase::kFinetuned
                                                                              : Phase::kBase);
    detector.rng_state = manifest.value("rng_state", "");

    for (const auto& rec : manifest.at("params")) {
        const std::string name = rec.at("name").get<std::string>();
        const auto shape = rec.at("shape").get<std::vector<std::int64_t>>();
        ad::Var v = detector.params().get(name);
        if (v.val().shape() != shape) {
            throw ParseError("load_checkpoint: shape mismatch for " + name);
        }
        f.read(reinterpret_cast<char*>(v.mutable_val().data()),
               static_cast<std::streamsize>(v.val().numel() * sizeof(double)));
        if (!f) throw ParseError("load_checkpoint: truncated parameter data at " + name);
    }
    return detector;
}

}  // namespace fsdet::det
