#include "milcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "io_util.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace milcl {

void validate(const SynthConfig& cfg) {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("SynthConfig." + field + ": " + why);
    };
    if (cfg.tasks == 0) fail("tasks", "must be >= 1");
    if (cfg.classes_per_task == 0) fail("classes_per_task", "must be >= 1");
    if (cfg.train_bags_per_class == 0) fail("train_bags_per_class", "must be >= 1");
    if (cfg.dim == 0) fail("dim", "must be >= 1");
    if (cfg.patches_min < 2) fail("patches_min", "must be >= 2");
    if (cfg.patches_max < cfg.patches_min) fail("patches_max", "must be >= patches_min");
    if (!(cfg.evidence_fraction > 0.0 && cfg.evidence_fraction < 1.0))
        fail("evidence_fraction", "must be in (0,1)");
    if (cfg.evidence_fraction * static_cast<double>(cfg.patches_min) < 1.0)
        fail("evidence_fraction", "must give at least one evidence patch at patches_min");
    if (!(cfg.noise_sigma > 0.0)) fail("noise_sigma", "must be > 0");
    if (!(cfg.background_sigma > 0.0)) fail("background_sigma", "must be > 0");
    if (cfg.tasks * cfg.classes_per_task > cfg.dim)
        fail("dim", "must be >= tasks * classes_per_task for the class-mean simplex");
}

Vec synth_class_mean(const SynthConfig& cfg, std::size_t class_id) {
    // Centered regular simplex over scaled basis vectors: pairwise distance
    // is exactly class_mean_separation, and the means sum to zero, so every
    // class carries a small negative component along every other class's
    // direction (classes share the feature space instead of occupying
    // disjoint axes).
    const std::size_t total = cfg.tasks * cfg.classes_per_task;
    const double s = cfg.class_mean_separation / std::sqrt(2.0);
    Vec mean(cfg.dim, 0.0);
    for (std::size_t j = 0; j < total; ++j)
        mean[j] = -s / static_cast<double>(total);
    mean[class_id] += s;
    return mean;
}

SynthConfig synth_config_from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("config " + path + ": " + e.what());
    }
    static const std::set<std::string> known = {
        "tasks", "classes_per_task", "train_bags_per_class",
        "val_bags_per_class", "test_bags_per_class", "dim", "patches_min",
        "patches_max", "evidence_fraction", "class_mean_separation",
        "noise_sigma", "background_sigma", "seed"};
    for (const auto& [key, _] : j.items())
        if (!known.contains(key))
            throw FormatError("config " + path + ": unknown key \"" + key + "\"");
    SynthConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("tasks", cfg.tasks);
    get("classes_per_task", cfg.classes_per_task);
    get("train_bags_per_class", cfg.train_bags_per_class);
    get("val_bags_per_class", cfg.val_bags_per_class);
    get("test_bags_per_class", cfg.test_bags_per_class);
    get("dim", cfg.dim);
    get("patches_min", cfg.patches_min);
    get("patches_max", cfg.patches_max);
    get("evidence_fraction", cfg.evidence_fraction);
    get("class_mean_separation", cfg.class_mean_separation);
    get("noise_sigma", cfg.noise_sigma);
    get("background_sigma", cfg.background_sigma);
    get("seed", cfg.seed);
    return cfg;
}

namespace {

nlohmann::ordered_json synth_config_to_json(const SynthConfig& cfg) {
    nlohmann::ordered_json j;
    j["tasks"] = cfg.tasks;
    j["classes_per_task"] = cfg.classes_per_task;
    j["train_bags_per_class"] = cfg.train_bags_per_class;
    j["val_bags_per_class"] = cfg.val_bags_per_class;
    j["test_bags_per_class"] = cfg.test_bags_per_class;
    j["dim"] = cfg.dim;
    j["patches_min"] = cfg.patches_min;
    j["patches_max"] = cfg.patches_max;
    j["evidence_fraction"] = cfg.evidence_fraction;
    j["class_mean_separation"] = cfg.class_mean_separation;
    j["noise_sigma"] = cfg.noise_sigma;
    j["background_sigma"] = cfg.background_sigma;
    j["seed"] = cfg.seed;
    return j;
}

Bag make_bag(const SynthConfig& cfg, int label, int task,
             const std::string& bag_id, Rng& rng) {
    const std::size_t span = cfg.patches_max - cfg.patches_min + 1;
    const std::size_t n = cfg.patches_min + rng.index_below(span);
    const std::size_t evidence =
        static_cast<std::size_t>(std::ceil(cfg.evidence_fraction *
                                           static_cast<double>(n)));
    const Vec mean = synth_class_mean(cfg, static_cast<std::size_t>(label));

    Bag bag;
    bag.label = label;
    bag.task = task;
    bag.bag_id = bag_id;
    bag.features = Mat(n, cfg.dim);
    // Evidence patches occupy the first rows.
    for (std::size_t i = 0; i < n; ++i) {
        auto row = bag.features.row(i);
        if (i < evidence) {
            for (std::size_t j = 0; j < cfg.dim; ++j)
                row[j] = mean[j] + cfg.noise_sigma * rng.normal();
        } else {
            for (std::size_t j = 0; j < cfg.dim; ++j)
                row[j] = cfg.background_sigma * rng.normal();
        }
    }
    return bag;
}

}  // namespace

void write_bag(const Bag& bag, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_bag: cannot open " + path);
    io::write_bytes(os, "MILB", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(bag.features.cols));
    io::write_u32(os, static_cast<std::uint32_t>(bag.features.rows));
    io::write_i32(os, bag.label);
    io::write_i32(os, bag.task);
    for (double v : bag.features.data) io::write_f64(os, v);
    if (!os) throw FormatError("write_bag: write failed for " + path);
}

Bag read_bag(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_bag: cannot open " + path);
    io::expect_magic(is, "MILB", "read_bag " + path);
    const std::uint32_t version = io::read_u32(is, "read_bag " + path);
    if (version != 1)
        throw FormatError("read_bag " + path + ": unsupported version " +
                          std::to_string(version) + " at offset 4");
    Bag bag;
    const std::uint32_t d = io::read_u32(is, "read_bag " + path);
    const std::uint32_t n = io::read_u32(is, "read_bag " + path);
    bag.label = io::read_i32(is, "read_bag " + path);
    bag.task = io::read_i32(is, "read_bag " + path);
    bag.features = Mat(n, d);
    for (double& v : bag.features.data)
        v = io::read_f64(is, "read_bag " + path);
    bag.bag_id = fs::path(path).stem().string();
    return bag;
}

void write_manifest(const std::vector<ManifestRow>& rows,
                    const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("write_manifest: cannot open " + path);
    os << "path,label,task,split,bag_id\n";
    for (const auto& r : rows)
        os << r.path << ',' << r.label << ',' << r.task << ',' << r.split
           << ',' << r.bag_id << '\n';
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("read_manifest: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "path,label,task,split,bag_id")
        throw FormatError("read_manifest " + path + ": bad header");
    std::vector<ManifestRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        ManifestRow r;
        std::string label_s, task_s;
        if (!std::getline(ss, r.path, ',') || !std::getline(ss, label_s, ',') ||
            !std::getline(ss, task_s, ',') || !std::getline(ss, r.split, ',') ||
            !std::getline(ss, r.bag_id, ','))
            throw FormatError("read_manifest " + path + ": malformed row: " + line);
        try {
            r.label = std::stoi(label_s);
            r.task = std::stoi(task_s);
        } catch (const std::exception&) {
            throw FormatError("read_manifest " + path + ": bad integer in: " + line);
        }
        if (r.split != "train" && r.split != "val" && r.split != "test")
            throw FormatError("read_manifest " + path + ": bad split: " + r.split);
        rows.push_back(std::move(r));
    }
    return rows;
}

void gen_synthetic(const SynthConfig& cfg, const std::string& out_dir) {
    validate(cfg);
    fs::create_directories(fs::path(out_dir) / "bags");

    Rng rng(derive_seed(cfg.seed, 0xDA7A));
    std::vector<ManifestRow> manifest;

    const struct {
        const char* split;
        std::size_t SynthConfig::* count;
    } splits[] = {
        {"train", &SynthConfig::train_bags_per_class},
        {"val", &SynthConfig::val_bags_per_class},
        {"test", &SynthConfig::test_bags_per_class},
    };

    for (std::size_t t = 0; t < cfg.tasks; ++t) {
        for (std::size_t c = 0; c < cfg.classes_per_task; ++c) {
            const int label = static_cast<int>(t * cfg.classes_per_task + c);
            for (const auto& sp : splits) {
                for (std::size_t i = 0; i < cfg.*(sp.count); ++i) {
                    std::string bag_id = "t" + std::to_string(t) + "_c" +
                                         std::to_string(label) + "_" + sp.split +
                                         "_" + std::to_string(i);
                    const Bag bag = make_bag(cfg, label, static_cast<int>(t),
                                             bag_id, rng);
                    const std::string rel = "bags/" + bag_id + ".milb";
                    write_bag(bag, (fs::path(out_dir) / rel).string());
                    manifest.push_back({rel, label, static_cast<int>(t),
                                        sp.split, bag_id});
                }
            }
        }
    }
    write_manifest(manifest, (fs::path(out_dir) / "manifest.csv").string());
    std::ofstream js(fs::path(out_dir) / "synth_config.json");
    js << synth_config_to_json(cfg).dump(2) << "\n";
}

TaskStream load_task_stream(const std::string& dir) {
    const auto rows = read_manifest((fs::path(dir) / "manifest.csv").string());
    std::map<int, TaskDataset> by_task;
    for (const auto& r : rows) {
        const std::string full = (fs::path(dir) / r.path).string();
        Bag bag = read_bag(full);
        if (bag.label != r.label || bag.task != r.task)
            throw FormatError("load_task_stream: manifest row for " + r.path +
                              " disagrees with bag header");
        bag.bag_id = r.bag_id;
        TaskDataset& task = by_task[r.task];
        task.task = r.task;
        if (r.split == "train") task.train.push_back(std::move(bag));
        else if (r.split == "val") task.val.push_back(std::move(bag));
        else task.test.push_back(std::move(bag));
    }

    TaskStream stream;
    std::set<int> seen_classes;
    for (auto& [task_id, task] : by_task) {
        std::set<int> classes;
        for (const auto* bags : {&task.train, &task.val, &task.test})
            for (const Bag& b : *bags) classes.insert(b.label);
        for (int c : classes) {
            if (seen_classes.contains(c))
                throw FormatError("load_task_stream: class " +
                                  std::to_string(c) +
                                  " appears in multiple tasks");
            seen_classes.insert(c);
            task.class_ids.push_back(c);
        }
        stream.push_back(std::move(task));
    }
    return stream;
}

}  // namespace milcl
