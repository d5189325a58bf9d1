#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "fsdet/detector.hpp"
#include "fsdet/gradient_suite.hpp"

using namespace fsdet;
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitProtocolViolation = 3;

// One training process per output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        std::ifstream probe(path_);
        if (probe.good()) {
            throw ProtocolError("output directory is locked by another run: " + path_.string());
        }
        std::ofstream f(path_);
        f << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

det::RunConfig load_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
    ordered_json j = ordered_json::object();
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw ConfigError("cannot open config file " + config_path);
        try {
            j = ordered_json::parse(f);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config parse error: " + std::string(e.what()));
        }
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects dotted.path=value, got '" + kv + "'");
        }
        const std::string path = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        ordered_json parsed;
        try {
            parsed = ordered_json::parse(value);
        } catch (...) {
            parsed = value;  // bare strings stay strings
        }
        ordered_json* node = &j;
        std::size_t start = 0;
        while (true) {
            const auto dot = path.find('.', start);
            const std::string key = path.substr(start, dot - start);
            if (key.empty()) throw ConfigError("--set has an empty path segment: " + path);
            if (dot == std::string::npos) {
                (*node)[key] = parsed;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
    return det::RunConfig::from_json(j.dump());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
}

data::SplitSpec split_for(const det::RunConfig& cfg, const data::Dataset& dataset) {
    return data::make_split(dataset.class_names, cfg.split_id);
}

// Balanced K-shot fine-tune set over base + novel classes (the default
// protocol); novel-only when requested.
data::Dataset finetune_set(const det::RunConfig& cfg, const data::Dataset& dataset,
                           const data::SplitSpec& split, bool novel_only) {
    std::vector<std::string> classes = split.novel_classes;
    if (!novel_only) {
        classes.insert(classes.end(), split.base_classes.begin(), split.base_classes.end());
    }
    return data::sample_k_shot(dataset, classes, cfg.shots, cfg.shot_seed);
}

int cmd_gen_data(const det::RunConfig& cfg, const std::string& out_dir) {
    const data::Dataset ds = data::generate_synthetic(cfg.data, cfg.data_seed);
    data::write_dataset(ds, cfg.data, cfg.data_seed, out_dir);
    write_text(fs::path(out_dir) / "run_config.json", cfg.to_json() + "\n");
    std::cout << "dataset written to " << out_dir << " (" << ds.images.size() << " images, hash "
              << data::dataset_content_hash(out_dir) << ")\n";
    return kExitOk;
}

int cmd_train_base(const det::RunConfig& cfg, const std::string& data_dir,
                   const std::string& out_dir) {
    DirLock lock{fs::path(out_dir)};
    const data::Dataset ds = data::load_dataset(data_dir);
    const data::SplitSpec split = split_for(cfg, ds);
    // Base training sees base-class images only.
    data::Dataset base_only;
    base_only.class_names = ds.class_names;
    std::set<std::string> novel(split.novel_classes.begin(), split.novel_classes.end());
    for (const auto& img : ds.images) {
        bool has_novel = false;
        for (const auto& obj : img.objects) {
            if (novel.count(ds.class_names[static_cast<std::size_t>(obj.class_id)])) {
                has_novel = true;
            }
        }
        if (!has_novel) base_only.images.push_back(img);
    }
    det::TrainResult result = det::train_base(base_only, split, cfg.model, cfg.model.train.seed,
                                              (fs::path(out_dir) / "train_log.jsonl").string());
    save_checkpoint(result.detector, (fs::path(out_dir) / "base.ckpt").string());
    write_text(fs::path(out_dir) / "run_config.json", cfg.to_json() + "\n");
    std::cout << "base checkpoint written (first loss " << result.first_loss
              << ", last epoch mean " << result.last_epoch_mean_loss << ", simplex dev "
              << result.max_simplex_deviation << ")\n";
    return kExitOk;
}

int cmd_finetune(const det::RunConfig& cfg, const std::string& ckpt_path,
                 const std::string& data_dir, const std::string& out_dir, bool novel_only) {
    DirLock lock{fs::path(out_dir)};
    det::Detector detector = det::load_checkpoint(ckpt_path);
    const data::Dataset ds = data::load_dataset(data_dir);
    const data::SplitSpec split = split_for(cfg, ds);
    const data::Dataset shots = finetune_set(cfg, ds, split, novel_only);
    det::TrainResult result =
        det::fine_tune(std::move(detector), shots, split, cfg.shot_seed,
                       (fs::path(out_dir) / "finetune_log.jsonl").string());
    save_checkpoint(result.detector, (fs::path(out_dir) / "finetuned.ckpt").string());
    write_text(fs::path(out_dir) / "run_config.json", cfg.to_json() + "\n");
    std::cout << "finetuned checkpoint written (" << shots.images.size() << " shot images)\n";
    return kExitOk;
}

int cmd_eval(const det::RunConfig& cfg, const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_file) {
    const det::Detector detector = det::load_checkpoint(ckpt_path);
    const data::Dataset ds = data::load_dataset(data_dir);
    const data::SplitSpec split = split_for(cfg, ds);
    eval::EvalReport report = det::evaluate(detector, ds, split, cfg.shots, cfg.shot_seed,
                                            cfg.score_thresh, cfg.nms_thresh);
    report.split_id = cfg.split_id;
    report.config_echo = cfg.to_json();
    const std::string json = report.to_json();
    std::cout << json;
    if (!out_file.empty()) write_text(out_file, json);
    return kExitOk;
}

void apply_variant(det::DetectorConfig& cfg, const std::string& axis, const std::string& variant) {
    if (axis == "neck") {
        if (variant == "fpn") {
            cfg.neck.use_cbam = false;
            cfg.neck.adaptive_fusion = false;  // frozen (0.5, 0, 0.5) static sum
        }
    } else if (axis == "cbam") {
        if (variant == "off") cfg.neck.use_cbam = false;
    } else if (axis == "stages") {
        const std::int64_t n = std::stoll(variant);
        cfg.mrrpn.num_stages = n;
        cfg.mrrpn.dilations.assign(static_cast<std::size_t>(n - 1), 2);
        cfg.mrrpn.pos_iou_thresholds.clear();
        for (std::int64_t t = 0; t < n; ++t) {
            cfg.mrrpn.pos_iou_thresholds.push_back(std::min(0.5 + 0.1 * static_cast<double>(t), 0.7));
        }
    } else if (axis == "loss") {
        if (variant == "standard") {
            cfg.gcl.placeholders = 0;
            cfg.gcl.lambda_placeholder = 0.0;
            cfg.gcl.lambda_regularization = 0.0;
        }
    }
}

int cmd_ablate(const det::RunConfig& cfg, const std::string& data_dir, const std::string& axis,
               const std::vector<std::int64_t>& shots, const std::vector<std::uint64_t>& seeds,
               const std::string& out_dir) {
    static const std::map<std::string, std::vector<std::string>> axes = {
        {"neck", {"cfpan", "fpn"}},
        {"cbam", {"on", "off"}},
        {"stages", {"1", "2", "3", "4"}},
        {"loss", {"gcl", "standard"}},
    };
    const auto it = axes.find(axis);
    if (it == axes.end()) {
        throw ConfigError("unknown ablation axis '" + axis + "' (options: neck, cbam, stages, loss)");
    }
    DirLock lock{fs::path(out_dir)};
    const data::Dataset ds = data::load_dataset(data_dir);
    const data::SplitSpec split = split_for(cfg, ds);
    data::Dataset base_only;
    base_only.class_names = ds.class_names;
    std::set<std::string> novel(split.novel_classes.begin(), split.novel_classes.end());
    for (const auto& img : ds.images) {
        bool has_novel = false;
        for (const auto& obj : img.objects) {
            if (novel.count(ds.class_names[static_cast<std::size_t>(obj.class_id)])) {
                has_novel = true;
            }
        }
        if (!has_novel) base_only.images.push_back(img);
    }

    std::ostringstream csv;
    csv << "variant,shot,seed,novel_map,param_count\n";
    for (const auto& variant : it->second) {
        det::DetectorConfig model = cfg.model;
        apply_variant(model, axis, variant);
        det::TrainResult base = det::train_base(base_only, split, model, model.train.seed, "");
        const std::int64_t params = base.detector.param_count();
        for (const std::int64_t shot : shots) {
            std::vector<double> maps;
            for (const std::uint64_t seed : seeds) {
                det::RunConfig run = cfg;
                run.shots = shot;
                run.shot_seed = seed;
                const data::Dataset shot_set = finetune_set(run, ds, split, false);
                det::Detector copy = base.detector;  // fresh fine-tune per seed
                det::TrainResult ft = det::fine_tune(std::move(copy), shot_set, split, seed, "");
                const auto report = det::evaluate(ft.detector, ds, split, shot, seed,
                                                  cfg.score_thresh, cfg.nms_thresh);
                maps.push_back(report.map_novel);
                csv << variant << "," << shot << "," << seed << "," << report.map_novel << ","
                    << params << "\n";
            }
            std::sort(maps.begin(), maps.end());
            const double median = maps[maps.size() / 2];
            csv << variant << "," << shot << ",median," << median << "," << params << "\n";
        }
    }
    write_text(fs::path(out_dir) / ("ablation_" + axis + ".csv"), csv.str());
    write_text(fs::path(out_dir) / "run_config.json", cfg.to_json() + "\n");
    std::cout << csv.str();
    return kExitOk;
}

int cmd_gradcheck() {
    const auto rows = nn::run_gradient_suite();
    bool all_pass = true;
    std::printf("%-34s %-12s %-10s %-6s %s\n", "op", "max_rel_err", "threshold", "pass",
                "worst coordinate");
    for (const auto& r : rows) {
        std::printf("%-34s %-12.3e %-10.0e %-6s %s\n", r.op.c_str(), r.max_rel_error, r.threshold,
                    r.pass ? "yes" : "NO", r.worst_coordinate.c_str());
        all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot object detection stack: synthetic data, two-phase training, evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "JSON run configuration")->envname("FSDET_CONFIG");
    app.add_option("--set", overrides, "Override config values as dotted.path=value");

    std::string out_dir = "run";
    std::string data_dir;
    std::string ckpt_path;
    std::string out_file;
    std::string axis;
    bool novel_only = false;
    bool freeze_backbone = true;
    std::vector<std::int64_t> shots_list = {10};
    std::vector<std::uint64_t> seeds_list = {1, 2, 3};
    std::int64_t shots_flag = -1;
    std::int64_t shot_seed_flag = -1;
    std::string split_flag;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset on disk");
    gen->add_option("--out", out_dir, "Output directory")->required();

    auto* train = app.add_subcommand("train-base", "Base-phase training on the base classes");
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--out", out_dir, "Output directory")->required();

    auto* ft = app.add_subcommand("finetune", "K-shot fine-tuning of a base checkpoint");
    ft->add_option("--ckpt", ckpt_path, "Base checkpoint")->required();
    ft->add_option("--data", data_dir, "Dataset directory")->required();
    ft->add_option("--out", out_dir, "Output directory")->required();
    ft->add_option("--shots", shots_flag, "K instances per class");
    ft->add_option("--split", split_flag, "Split id");
    ft->add_option("--shot-seed", shot_seed_flag, "K-shot sampling seed");
    ft->add_flag("--novel-only", novel_only, "Fine-tune on novel classes only");
    ft->add_flag("--freeze-backbone,!--no-freeze-backbone", freeze_backbone,
                 "Backbone freezing (protocol-locked to on)");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and emit the report JSON");
    ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    ev->add_option("--data", data_dir, "Dataset directory")->required();
    ev->add_option("--out", out_file, "Also write the report to this file");
    ev->add_option("--shots", shots_flag, "Shot setting recorded in the report");
    ev->add_option("--split", split_flag, "Split id");
    ev->add_option("--shot-seed", shot_seed_flag, "Seed recorded in the report");

    auto* ab = app.add_subcommand("ablate", "Run one ablation axis and write a CSV");
    ab->add_option("--data", data_dir, "Dataset directory")->required();
    ab->add_option("--out", out_dir, "Output directory")->required();
    ab->add_option("--axis", axis, "Axis: neck | cbam | stages | loss")->required();
    ab->add_option("--shots", shots_list, "Shot settings");
    ab->add_option("--seeds", seeds_list, "Fine-tune sampling seeds");

    auto* gc = app.add_subcommand("gradcheck", "Run the registered gradient checks");

    CLI11_PARSE(app, argc, argv);

    try {
        det::RunConfig cfg = load_config(config_path, overrides);
        if (shots_flag >= 0) cfg.shots = shots_flag;
        if (shot_seed_flag >= 0) cfg.shot_seed = static_cast<std::uint64_t>(shot_seed_flag);
        if (!split_flag.empty()) cfg.split_id = split_flag;

        if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
        if (train->parsed()) return cmd_train_base(cfg, data_dir, out_dir);
        if (ft->parsed()) {
            if (!freeze_backbone) {
                throw ConfigError("--no-freeze-backbone is rejected: the fine-tune protocol keeps "
                                  "the backbone frozen");
            }
            return cmd_finetune(cfg, ckpt_path, data_dir, out_dir, novel_only);
        }
        if (ev->parsed()) return cmd_eval(cfg, ckpt_path, data_dir, out_file);
        if (ab->parsed()) return cmd_ablate(cfg, data_dir, axis, shots_list, seeds_list, out_dir);
        if (gc->parsed()) return cmd_gradcheck();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const ProtocolError& e) {
        std::cerr << "protocol violation: " << e.what() << "\n";
        return kExitProtocolViolation;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailure;
    }
    return kExitOk;
}
