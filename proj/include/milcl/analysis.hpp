#pragma once

#include <string>
#include <vector>

#include "milcl/model.hpp"
#include "milcl/trainer.hpp"

namespace milcl {

// grid[classifier_session][attention_session] = balanced Task-1 accuracy of
// the hybrid model pairing those two sub-networks.
struct DecoupleGrid {
    std::vector<Vec> cells;  // T x T
};

// Heads from earlier sessions are zero-padded to the final class count, so
// hybrids share one label space and earlier logits are preserved exactly.
DecoupleGrid decouple_grid(const std::vector<MilModel>& session_models,
                           const std::vector<Bag>& task1_test);

struct GradTraceRecord {
    std::size_t window = 0;
    std::string block;  // "attention" | "classifier"
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
    bool partial = false;
};

using GradTrace = std::vector<GradTraceRecord>;

// Per-block five-number summaries of the per-step gradient norms over
// consecutive windows of `window` steps. Quartiles use linear interpolation
// between closest ranks. A trailing short window is flagged partial.
GradTrace grad_trace(const SessionLog& log, std::size_t window = 50);
GradTrace grad_trace(const std::vector<StepRecord>& steps,
                     std::size_t window = 50);

struct DriftMap {
    std::string bag_id;
    Vec attention_ref;  // session-1 attention over the bag
    Vec attention_t;    // later-session attention
    Vec delta;          // attention_t - attention_ref, sums to 0
};

DriftMap attention_drift(const GatedAttentionParams& theta_ref,
                         const GatedAttentionParams& theta_t, const Bag& bag);

void write_decouple_csv(const DecoupleGrid& grid, const std::string& path);
void write_gradtrace_csv(const GradTrace& trace, const std::string& path);
void write_drift_csv(const DriftMap& drift, const std::string& path);

// Linear-interpolation quantile of an unsorted sample, p in [0,1].
double quantile(Vec values, double p);

}  // namespace milcl
