#pragma once

#include <string>
#include <vector>

#include "milcl/model.hpp"

namespace milcl {

struct TaskDataset {
    int task = -1;
    std::vector<int> class_ids;
    std::vector<Bag> train;
    std::vector<Bag> val;
    std::vector<Bag> test;
};

// Ordered CIL sequence; class id sets are pairwise disjoint across tasks.
using TaskStream = std::vector<TaskDataset>;

struct SynthConfig {
    std::size_t tasks = 3;
    std::size_t classes_per_task = 2;
    std::size_t train_bags_per_class = 40;
    std::size_t val_bags_per_class = 10;
    std::size_t test_bags_per_class = 20;
    std::size_t dim = 16;
    std::size_t patches_min = 64;
    std::size_t patches_max = 256;
    double evidence_fraction = 0.1;
    double class_mean_separation = 12.0;
    double noise_sigma = 0.3;
    double background_sigma = 0.6;
    std::uint64_t seed = 1;
};

SynthConfig synth_config_from_json_file(const std::string& path);
void validate(const SynthConfig& cfg);

// Evidence patches for a class sit around a class-specific mean (pairwise
// separation `class_mean_separation`); the rest of a bag is shared
// zero-mean background. Writes one MILB file per bag plus manifest.csv.
void gen_synthetic(const SynthConfig& cfg, const std::string& out_dir);

// Class mean used by the generator; evidence patches of class c are drawn
// around it (needed by drift diagnostics to locate evidence directions).
Vec synth_class_mean(const SynthConfig& cfg, std::size_t class_id);

// MILB bag file: magic, u32 version=1, u32 d, u32 N, i32 label, i32 task,
// then N*d little-endian f64 row-major.
void write_bag(const Bag& bag, const std::string& path);
Bag read_bag(const std::string& path);

struct ManifestRow {
    std::string path;
    int label = -1;
    int task = -1;
    std::string split;  // train | val | test
    std::string bag_id;
};

void write_manifest(const std::vector<ManifestRow>& rows,
                    const std::string& path);
std::vector<ManifestRow> read_manifest(const std::string& path);

// Load a dataset directory (manifest.csv + bag files) into a TaskStream,
// cross-checking every manifest row against the embedded bag header.
TaskStream load_task_stream(const std::string& dir);

}  // namespace milcl
