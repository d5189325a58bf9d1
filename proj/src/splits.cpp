#include <algorithm>
#include <set>

#include "fsdet/datasets.hpp"

namespace fsdet::data {

void SplitSpec::validate(const std::vector<std::string>& catalogue) const {
    std::set<std::string> cat(catalogue.begin(), catalogue.end());
    std::set<std::string> base(base_classes.begin(), base_classes.end());
    for (const auto& n : novel_classes) {
        if (base.count(n)) {
            throw ConfigError("split: class '" + n + "' appears in both base and novel sets");
        }
    }
    for (const auto& n : base_classes) {
        if (!cat.count(n)) throw ConfigError("split: base class '" + n + "' not in catalogue");
    }
    for (const auto& n : novel_classes) {
        if (!cat.count(n)) throw ConfigError("split: novel class '" + n + "' not in catalogue");
    }
}

std::vector<std::string> dior_catalogue() {
    // The union of the four published novel sets covers all twenty classes.
    std::vector<std::string> names = {
        "airplane",      "airport",       "baseball field", "basketball court", "bridge",
        "chimney",       "dam",           "golf course",    "highway toll station",
        "port",          "service area",  "ship",           "stadium",
        "storage tank",  "tennis court",  "track field",    "train station",
        "vehicle",       "viaduct",       "windmill"};
    return names;
}

std::vector<std::string> nwpu_catalogue() {
    // Class ids 1..10 in the NWPU VHR-10 ground-truth files follow this order.
    return {"airplane",         "ship",   "storage tank", "baseball diamond", "tennis court",
            "basketball court", "ground track field", "harbor", "bridge",     "vehicle"};
}

namespace {

SplitSpec split_from_novel(const std::vector<std::string>& catalogue,
                           std::vector<std::string> novel) {
    SplitSpec s;
    s.novel_classes = std::move(novel);
    std::set<std::string> novel_set(s.novel_classes.begin(), s.novel_classes.end());
    for (const auto& n : catalogue) {
        if (!novel_set.count(n)) s.base_classes.push_back(n);
    }
    s.validate(catalogue);
    return s;
}

}  // namespace

SplitSpec make_split(const std::vector<std::string>& catalogue, const std::string& split_id) {
    static const std::vector<std::vector<std::string>> dior_novel = {
        {"baseball field", "basketball court", "bridge", "chimney", "ship"},
        {"airplane", "airport", "highway toll station", "port", "track field"},
        {"dam", "golf course", "storage tank", "tennis court", "vehicle"},
        {"service area", "viaduct", "stadium", "train station", "windmill"},
    };

    if (split_id.rfind("dior-", 0) == 0) {
        const std::string n = split_id.substr(5);
        if (n.size() == 1 && n[0] >= '1' && n[0] <= '4') {
            const auto cat = dior_catalogue();
            if (!catalogue.empty() && catalogue != cat) {
                throw ConfigError("make_split: '" + split_id + "' requires the DIOR catalogue");
            }
            return split_from_novel(cat, dior_novel[static_cast<std::size_t>(n[0] - '1')]);
        }
    }
    if (split_id == "nwpu") {
        const auto cat = nwpu_catalogue();
        if (!catalogue.empty() && catalogue != cat) {
            throw ConfigError("make_split: 'nwpu' requires the NWPU VHR-10 catalogue");
        }
        return split_from_novel(cat, {"airplane", "baseball diamond", "tennis court"});
    }
    if (split_id.rfind("synthetic", 0) == 0) {
        if (catalogue.size() < 2) {
            throw ConfigError("make_split: synthetic split needs a catalogue of >= 2 classes");
        }
        std::int64_t m = 2;  // last M classes novel
        if (split_id.size() > 9) {
            if (split_id[9] != '-') throw ConfigError("make_split: unknown split id '" + split_id + "'");
            try {
                m = std::stoll(split_id.substr(10));
            } catch (...) {
                throw ConfigError("make_split: unknown split id '" + split_id + "'");
            }
        }
        if (m < 1 || m >= static_cast<std::int64_t>(catalogue.size())) {
            throw ConfigError("make_split: synthetic novel count must be in [1, catalogue size)");
        }
        std::vector<std::string> novel(catalogue.end() - m, catalogue.end());
        return split_from_novel(catalogue, std::move(novel));
    }
    throw ConfigError("make_split: unknown split id '" + split_id +
                      "' (options: dior-1..dior-4, nwpu, synthetic[-M])");
}

}  // namespace fsdet::data
