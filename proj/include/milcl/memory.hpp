#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "milcl/model.hpp"
#include "milcl/numerics.hpp"

namespace milcl {

enum class StrategyKind { Random, Max, MaxMin, MaxRand, MaxMinRand };

StrategyKind strategy_from_name(const std::string& name);
std::string strategy_name(StrategyKind kind);

struct SelectionStrategy {
    StrategyKind kind = StrategyKind::MaxMinRand;
    std::size_t k = 256;
};

// Pick min(K, N) distinct patch indices from an attention distribution.
//   Random:     K uniform without replacement
//   Max:        top-K by attention
//   MaxMin:     top-ceil(K/2) plus bottom-floor(K/2)
//   MaxRand:    top-ceil(K/2) plus floor(K/2) uniform from the remainder
//   MaxMinRand: top-ceil(K/4), bottom-ceil(K/4), rest uniform from remainder
// Attention ties break toward the lower patch index.
std::vector<std::size_t> select_indices(const Vec& attention,
                                        const SelectionStrategy& strategy,
                                        Rng& rng);

// A distilled pseudo-bag with its frozen teacher payload.
struct MemoryEntry {
    Mat features;            // K' x d, K' = min(K, N)
    int label = -1;
    int task = -1;
    Vec teacher_attn_logits;  // raw scores at the selected indices
    Vec teacher_class_logits; // head logits at storage time
    std::string bag_id;
};

// Build a MemoryEntry from a bag and the teacher outputs computed on it.
// Stored attention logits are pre-softmax so both sides of the replay KL
// can be renormalized over the same K-patch support.
MemoryEntry distill(const Bag& bag, const AttentionOutputs& teacher_outputs,
                    const Vec& teacher_class_logits,
                    const SelectionStrategy& strategy, Rng& rng);

using MemoryEntryPtr = std::shared_ptr<const MemoryEntry>;

// Class-balanced pool maintained by per-class reservoir sampling. A total
// budget of B entries maps to floor(B / classes-seen) slots per class;
// registering new classes rebalances by uniform random eviction.
class PseudoBagPool {
public:
    PseudoBagPool(std::size_t total_budget, std::uint64_t seed);

    void register_class(int label);
    void insert(MemoryEntry entry);

    // Every stored entry exactly once, in a seeded shuffle.
    std::vector<MemoryEntryPtr> iterate(Rng& rng) const;
    std::vector<MemoryEntryPtr> entries() const;

    std::size_t size() const;
    std::size_t per_class_capacity() const { return per_class_capacity_; }
    std::size_t total_budget() const { return total_budget_; }
    std::size_t seen_count(int label) const;
    std::uint64_t seed() const { return seed_; }

    // Recompute frozen teacher payloads with a (typically end-of-task) model.
    void refresh_teacher(const MilModel& model);

    // "MILP" binary container plus a JSON sidecar next to it.
    void save(const std::string& path) const;
    static PseudoBagPool load(const std::string& path);

private:
    struct Bucket {
        std::vector<MemoryEntryPtr> entries;
        std::size_t seen = 0;
    };

    void rebalance();

    std::size_t total_budget_;
    std::size_t per_class_capacity_ = 0;
    std::map<int, Bucket> buckets_;
    std::uint64_t seed_;
    Rng rng_;
};

}  // namespace milcl
