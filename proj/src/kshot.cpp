#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "fsdet/datasets.hpp"

namespace fsdet::data {

Dataset sample_k_shot(const Dataset& dataset, const std::vector<std::string>& classes,
                      std::int64_t k, std::uint64_t seed) {
    if (k < 1) throw ConfigError("sample_k_shot: K must be >= 1");
    if (classes.empty()) throw ConfigError("sample_k_shot: empty class list");

    std::map<std::string, std::int64_t> class_ids;
    for (std::size_t i = 0; i < dataset.class_names.size(); ++i) {
        class_ids[dataset.class_names[i]] = static_cast<std::int64_t>(i);
    }
    std::set<std::int64_t> requested;
    for (const auto& name : classes) {
        auto it = class_ids.find(name);
        if (it == class_ids.end()) {
            throw DataError("sample_k_shot: class '" + name + "' not in the dataset catalogue");
        }
        requested.insert(it->second);
    }

    // Availability check first so the error can report per-class counts.
    std::map<std::int64_t, std::int64_t> available;
    for (const auto& img : dataset.images) {
        for (const auto& obj : img.objects) {
            if (!obj.ignore && requested.count(obj.class_id)) ++available[obj.class_id];
        }
    }
    std::ostringstream lack;
    for (std::int64_t cid : requested) {
        if (available[cid] < k) {
            lack << " " << dataset.class_names[static_cast<std::size_t>(cid)] << "="
                 << available[cid];
        }
    }
    if (!lack.str().empty()) {
        throw DataError("sample_k_shot: insufficient instances for K=" + std::to_string(k) +
                        ":" + lack.str());
    }

    std::vector<std::size_t> order(dataset.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(splitmix64(seed));
    rng.shuffle(order);

    Dataset out;
    out.class_names = dataset.class_names;
    std::map<std::int64_t, std::int64_t> counts;
    auto all_full = [&]() {
        for (std::int64_t cid : requested) {
            if (counts[cid] < k) return false;
        }
        return true;
    };

    for (std::size_t idx : order) {
        if (all_full()) break;
        const AnnotatedImage& img = dataset.images[idx];
        bool useful = false;
        for (const auto& obj : img.objects) {
            if (!obj.ignore && requested.count(obj.class_id) && counts[obj.class_id] < k) {
                useful = true;
                break;
            }
        }
        if (!useful) continue;
        AnnotatedImage copy = img;
        for (auto& obj : copy.objects) {
            if (obj.ignore) continue;
            if (requested.count(obj.class_id) && counts[obj.class_id] < k) {
                ++counts[obj.class_id];
            } else {
                obj.ignore = true;  // surplus or unrequested: masked from training targets
            }
        }
        out.images.push_back(std::move(copy));
    }
    return out;
}

}  // namespace fsdet::data
