#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "milcl/data.hpp"
#include "milcl/memory.hpp"
#include "milcl/metrics.hpp"
#include "milcl/model.hpp"

namespace milcl {

enum class Method { Finetune, ER, Ours, Joint };

Method method_from_name(const std::string& name);
std::string method_name(Method m);

struct TrainConfig {
    double alpha = 1.0;
    double beta = 1.0;
    double temperature = 1.0;
    SelectionStrategy strategy{StrategyKind::MaxMinRand, 256};
    std::size_t pool_capacity_total = 12;  // pseudo-bags across all classes
    std::size_t epochs = 50;
    std::size_t patience = 10;
    std::size_t hidden_dim = 128;
    AdamConfig adam;
    std::uint64_t seed = 1;
    Method method = Method::Ours;
    bool insert_once_per_bag = true;
    bool refresh_teacher_at_task_end = false;
};

TrainConfig train_config_from_json_file(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);
std::uint64_t config_digest(const TrainConfig& cfg);

struct StepRecord {
    std::uint64_t step = 0;
    int task = -1;
    LossBreakdown loss;
    double attn_grad_norm = 0.0;        // L2 over {w, V1, V2}
    double classifier_grad_norm = 0.0;  // L2 over {weight, bias}
};

struct EpochRecord {
    std::size_t epoch = 0;
    double val_balanced_acc = 0.0;
    double val_ce = 0.0;
};

struct SessionLog {
    int task = -1;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::string checkpoint_path;
};

// Mean per-class recall over the classes present in `bags`.
double evaluate(const MilModel& model, const std::vector<Bag>& bags);

// Adam over the five parameter blocks; the head blocks can grow with the
// classifier.
class ModelOptimizer {
public:
    ModelOptimizer(const MilModel& model, AdamConfig cfg);

    void step(MilModel& model, const MilGradients& grads);
    void append_head_classes(std::size_t new_class_count, std::size_t dim);

private:
    AdamConfig cfg_;
    Vec m_v1_, v_v1_, m_v2_, v_v2_, m_w_, v_w_, m_weight_, v_weight_,
        m_bias_, v_bias_;
    std::uint64_t step_count_ = 0;
};

// One CL session: epochs over the seeded interleave of current-task bags
// and a snapshot of the pool, early stopping on validation balanced
// accuracy with best-weight restore, then pseudo-bag insertion.
SessionLog train_task(MilModel& model, const TaskDataset& task,
                      PseudoBagPool* pool, const TrainConfig& cfg,
                      ModelOptimizer& opt, std::uint64_t& global_step);

struct ClRunResult {
    AccuracyMatrix matrix;
    std::vector<MilModel> session_models;
    std::vector<SessionLog> logs;
    std::optional<PseudoBagPool> pool;  // for pool-backed methods
};

ClRunResult run_cl(const TaskStream& stream, const TrainConfig& cfg);

struct JointRunResult {
    Vec per_task_acc;  // a*_j
    MilModel model;
    SessionLog log;
};

JointRunResult run_joint(const TaskStream& stream, const TrainConfig& cfg);

// Full pipeline for the CLI: runs the configured method on a dataset
// directory and writes checkpoints, per-session step logs, the pool
// snapshot, and run_manifest.json into `out_dir`.
void run_experiment(const std::string& data_dir, const TrainConfig& cfg,
                    const std::string& out_dir);

void write_session_log_csv(const SessionLog& log, const std::string& path);
SessionLog read_session_log_csv(const std::string& path);

}  // namespace milcl
